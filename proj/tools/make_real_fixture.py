#!/usr/bin/env python3
"""Writes tests/data/real_molecules.jsonl: small drug-like molecules with
ETKDG conformers relaxed by MMFF, in goflow's JSON-lines record format."""

import argparse
import json

from rdkit import Chem
from rdkit.Chem import AllChem

SMILES = {
    "ethanol": "CCO",
    "butane": "CCCC",
    "isopropanol": "CC(C)O",
    "acetic_acid": "CC(=O)O",
    "cyclohexane": "C1CCCCC1",
    "benzene": "c1ccccc1",
    "toluene": "Cc1ccccc1",
    "phenol": "Oc1ccccc1",
    "pyridine": "c1ccncc1",
    "alanine": "C[C@H](N)C(=O)O",
    "aspirin": "CC(=O)Oc1ccccc1C(=O)O",
    "ibuprofen": "CC(C)Cc1ccc(cc1)[C@@H](C)C(=O)O",
    "paracetamol": "CC(=O)Nc1ccc(O)cc1",
    "caffeine": "Cn1cnc2c1c(=O)n(C)c(=O)n2C",
    "methyl_pentanoate": "CCCCC(=O)OC",
}

CHIRALITY = {
    Chem.ChiralType.CHI_UNSPECIFIED: "unspecified",
    Chem.ChiralType.CHI_TETRAHEDRAL_CW: "cw",
    Chem.ChiralType.CHI_TETRAHEDRAL_CCW: "ccw",
}
HYBRIDIZATION = {
    Chem.HybridizationType.SP: "sp",
    Chem.HybridizationType.SP2: "sp2",
    Chem.HybridizationType.SP3: "sp3",
    Chem.HybridizationType.SP3D: "sp3d",
    Chem.HybridizationType.SP3D2: "sp3d2",
}
ORDER = {
    Chem.BondType.SINGLE: 1,
    Chem.BondType.DOUBLE: 2,
    Chem.BondType.TRIPLE: 3,
    Chem.BondType.AROMATIC: 4,
}


def record(name, smiles, n_conf, seed):
    mol = Chem.AddHs(Chem.MolFromSmiles(smiles))
    params = AllChem.ETKDGv3()
    params.randomSeed = seed
    ids = list(AllChem.EmbedMultipleConfs(mol, numConfs=n_conf, params=params))
    if not ids:
        raise RuntimeError(f"embedding failed for {name}")
    AllChem.MMFFOptimizeMoleculeConfs(mol, maxIters=2000)
    atoms = []
    for a in mol.GetAtoms():
        atoms.append({
            "element": a.GetAtomicNum(),
            "chirality": CHIRALITY.get(a.GetChiralTag(), "other"),
            "degree": a.GetDegree(),
            "charge": a.GetFormalCharge(),
            "num_h": a.GetTotalNumHs(),
            "radicals": a.GetNumRadicalElectrons(),
            "hybridization": HYBRIDIZATION.get(a.GetHybridization(), "other"),
            "aromatic": a.GetIsAromatic(),
            "in_ring": a.IsInRing(),
        })
    bonds = [[b.GetBeginAtomIdx(), b.GetEndAtomIdx(), ORDER.get(b.GetBondType(), 1)] for b in mol.GetBonds()]
    confs = []
    for cid in ids:
        pos = mol.GetConformer(cid).GetPositions()
        confs.append([[round(float(v), 6) for v in row] for row in pos])
    return {"name": name, "split": "test", "meta": {"smiles": smiles, "source": "rdkit-etkdg-mmff"},
            "atoms": atoms, "bonds": bonds, "conformers": confs}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="tests/data/real_molecules.jsonl")
    ap.add_argument("--conformers", type=int, default=5)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    with open(args.out, "w") as f:
        for name, smi in SMILES.items():
            f.write(json.dumps(record(name, smi, args.conformers, args.seed), separators=(",", ":")) + "\n")


if __name__ == "__main__":
    main()
