// goflow command-line tool: toy data, decomposition, training, sampling,
// evaluation and the oracle checks.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "goflow/goflow.hpp"

#ifndef GOFLOW_DEFAULT_REAL_FIXTURE
#define GOFLOW_DEFAULT_REAL_FIXTURE ""
#endif

namespace {

using goflow::json;

struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "key = value configuration file");
  sub->add_option("--seed", c.seed, "seed for every random stream");
}

goflow::AppConfig load(const Common& c) {
  goflow::AppConfig cfg = goflow::load_config(c.config_path);
  cfg.set_seed(c.seed);
  cfg.validate();
  return cfg;
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw goflow::ValidationError("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

json prior_json(const goflow::PriorSpec& p) {
  return {{"sigma_trans", p.sigma_trans}, {"sigma_rot", p.sigma_rot}, {"sigma_conf", p.sigma_conf},
          {"cartesian", p.cartesian}};
}

/// The prior a checkpoint was trained against; falls back to the configured one.
goflow::PriorSpec checkpoint_prior(const goflow::Checkpoint& ck, goflow::PriorSpec fallback) {
  if (!ck.meta.contains("prior")) return fallback;
  const json& p = ck.meta.at("prior");
  fallback.sigma_trans = p.value("sigma_trans", fallback.sigma_trans);
  fallback.sigma_rot = p.value("sigma_rot", fallback.sigma_rot);
  fallback.sigma_conf = p.value("sigma_conf", fallback.sigma_conf);
  fallback.cartesian = p.value("cartesian", fallback.cartesian);
  return fallback;
}

std::vector<int> parse_stages(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item != "1" && item != "2" && item != "3")
      throw goflow::ValidationError("--stages expects a comma list of 1, 2, 3; got '" + item + "'");
    const int k = item[0] - '0';
    if (!out.empty() && k != out.back() + 1) throw goflow::ValidationError("--stages must be consecutive and increasing");
    out.push_back(k);
  }
  if (out.empty()) throw goflow::ValidationError("--stages is empty");
  return out;
}

// ---------------------------------------------------------------------------

int run_check(const Common& c, const std::string& real_path, const std::string& json_out) {
  const goflow::AppConfig cfg = load(c);
  (void)cfg;
  goflow::Dataset real;
  const bool have_real = !real_path.empty();
  if (have_real) real = goflow::load_dataset(real_path);
  const auto results = goflow::run_checks(c.seed, have_real ? &real : nullptr);
  std::cout << goflow::format_checks(results);
  int failed = 0;
  for (const auto& r : results) failed += !r.passed;
  std::cout << (failed ? std::to_string(failed) + " check(s) failed\n" : "all checks passed\n");
  if (!json_out.empty()) write_json(json_out, goflow::checks_to_json(results));
  // A failed oracle is a numerical defect rather than a user error.
  return failed ? static_cast<int>(goflow::ExitCode::kNumerical) : 0;
}

int run_toygen(const Common& c, const std::string& out) {
  const goflow::AppConfig cfg = load(c);
  const goflow::Dataset d = goflow::generate_toy_dataset(cfg.toy);
  goflow::write_dataset(out, d);
  std::cerr << "wrote " << d.size() << " molecule(s), " << d.front().conformers.size() << " conformers each to " << out
            << '\n';
  return 0;
}

int run_import(const Common& c, const std::string& in, const std::string& out) {
  load(c);
  const goflow::Dataset d = goflow::import_coordinate_lists(in);
  goflow::write_dataset(out, d);
  std::cerr << "imported " << d.size() << " molecule(s) to " << out << '\n';
  return 0;
}

int run_decompose(const Common& c, const std::string& in, const std::string& out) {
  load(c);
  const goflow::Dataset d = goflow::load_dataset(in);
  std::ofstream os(out);
  if (!os) throw goflow::ValidationError("cannot write '" + out + "'");
  goflow::write_decomposition(os, d);
  return 0;
}

int run_train(const Common& c, const std::string& data_path, const std::string& stages_arg, const std::string& out,
              std::string loss_csv, std::string init_ckpt) {
  const goflow::AppConfig cfg = load(c);
  const std::vector<int> stages = parse_stages(stages_arg);
  goflow::Dataset data = goflow::filter_split(goflow::load_dataset(data_path), "train");
  if (data.empty()) throw goflow::ValidationError(data_path + ": no records in the train split");
  const goflow::TrainingSet set = goflow::make_training_set(data);

  goflow::TrainState state;
  if (!init_ckpt.empty()) {
    goflow::Checkpoint ck = goflow::read_checkpoint(init_ckpt);
    state.params = std::move(ck.params);
    state.completed_stage = ck.completed_stage;
  } else {
    state.params = goflow::init_params(cfg.net);
  }
  if (loss_csv.empty()) loss_csv = out + ".loss.csv";

  json meta = {{"prior", prior_json(cfg.train.prior)}, {"seed", c.seed}, {"data", data_path}};
  for (int s : stages) {
    const goflow::StageConfig& sc = cfg.stages[s - 1];
    std::cerr << "stage " << s << ": " << sc.epochs << " steps, batch " << sc.batch_size << ", lr " << sc.learning_rate
              << '\n';
    const auto records = goflow::train_stage(sc, cfg.train, set, state);
    if (!records.empty())
      std::cerr << "stage " << s << " final total loss " << records.back().total << '\n';
    goflow::Checkpoint ck{state.params, state.completed_stage, meta};
    goflow::write_checkpoint(out + ".stage" + std::to_string(s), ck);
    goflow::write_loss_csv(loss_csv, state.history);
  }
  goflow::write_checkpoint(out, {state.params, state.completed_stage, meta});
  std::cerr << "wrote " << out << " (completed stage " << state.completed_stage << "), losses in " << loss_csv << '\n';
  return 0;
}

int run_sample(const Common& c, const std::string& ckpt_path, const std::string& data_path, int mol_index, int num,
               int steps, const std::string& method, bool cartesian, const std::string& out) {
  goflow::AppConfig cfg = load(c);
  if (steps > 0) cfg.sampler.steps = steps;
  if (!method.empty()) cfg.sampler.method = goflow::parse_ode_method(method);
  if (cartesian) cfg.sampler.cartesian = true;
  cfg.sampler.validate();
  const goflow::Checkpoint ck = goflow::read_checkpoint(ckpt_path);
  const goflow::Dataset data = goflow::load_dataset(data_path);
  if (mol_index < 0 || mol_index >= static_cast<int>(data.size()))
    throw goflow::ValidationError("--mol-index " + std::to_string(mol_index) + " out of range (dataset has " +
                                  std::to_string(data.size()) + " molecules)");
  const goflow::MoleculeRecord& src = data[mol_index];
  const goflow::MoleculeContext mol = goflow::make_context(src.graph);
  const goflow::PriorSpec prior = checkpoint_prior(ck, cfg.train.prior);
  const goflow::SampleSet s = goflow::sample_conformers(ck.params, mol, num, cfg.sampler, prior);

  goflow::MoleculeRecord rec;
  rec.name = src.name;
  rec.graph = src.graph;
  rec.split = "generated";
  rec.conformers = s.conformers;
  json prov = json::array();
  for (int i = 0; i < num; ++i)
    prov.push_back({{"seed", cfg.sampler.seed}, {"draw", i}, {"steps", cfg.sampler.steps},
                    {"method", goflow::method_name(cfg.sampler.method)}});
  rec.meta_json = json{{"checkpoint", ckpt_path},
                       {"source", data_path},
                       {"mol_index", mol_index},
                       {"cartesian", cfg.sampler.cartesian},
                       {"provenance", prov}}
                      .dump();
  goflow::write_dataset(out, goflow::Dataset{rec});
  std::cerr << "wrote " << num << " conformer(s) of " << rec.name << " to " << out << '\n';
  return 0;
}

int run_eval(const Common& c, const std::string& gen_path, const std::string& ref_path, double delta,
             bool delta_set, bool heavy, const std::string& out) {
  goflow::AppConfig cfg = load(c);
  if (delta_set) cfg.delta = delta;
  if (heavy) cfg.heavy_atoms_only = true;
  if (!(cfg.delta >= 0)) throw goflow::ValidationError("--delta must be nonnegative");
  const goflow::Dataset gen = goflow::load_dataset(gen_path);
  const goflow::Dataset ref = goflow::load_dataset(ref_path);
  std::map<std::string, const goflow::MoleculeRecord*> by_name;
  for (const auto& r : ref) {
    if (by_name.count(r.name)) throw goflow::ValidationError(ref_path + ": duplicate molecule name '" + r.name + "'");
    by_name[r.name] = &r;
  }
  std::map<std::string, std::vector<goflow::Coords>> generated;
  std::vector<std::string> order;
  for (const auto& g : gen) {
    if (!by_name.count(g.name))
      throw goflow::ValidationError(gen_path + ": molecule '" + g.name + "' has no reference in " + ref_path);
    if (g.graph.size() != by_name[g.name]->graph.size())
      throw goflow::ValidationError("molecule '" + g.name + "': generated and reference atom counts differ");
    if (!generated.count(g.name)) order.push_back(g.name);
    auto& v = generated[g.name];
    v.insert(v.end(), g.conformers.begin(), g.conformers.end());
  }
  std::vector<goflow::MoleculeMetrics> per;
  for (const std::string& name : order) {
    const goflow::MoleculeRecord& r = *by_name[name];
    const std::vector<bool> mask = cfg.heavy_atoms_only ? goflow::heavy_atom_mask(r.graph) : std::vector<bool>{};
    per.push_back({name, goflow::cov_mat(generated[name], r.conformers, cfg.delta, mask)});
  }
  const goflow::AggregateReport rep = goflow::aggregate(per);
  std::cout << goflow::format_table(rep);
  json j = goflow::to_json(rep);
  j["heavy_atoms_only"] = cfg.heavy_atoms_only;
  if (!out.empty()) write_json(out, j);
  return 0;
}

int run_loglik(const Common& c, const std::string& ckpt_path, const std::string& data_path, int probes, int steps,
               const std::string& out) {
  goflow::AppConfig cfg = load(c);
  if (probes > 0) cfg.train.likelihood_probes = probes;
  if (steps > 0) cfg.loglik_steps = steps;
  const goflow::Checkpoint ck = goflow::read_checkpoint(ckpt_path);
  const goflow::PriorSpec prior = checkpoint_prior(ck, cfg.train.prior);
  const goflow::Dataset data = goflow::load_dataset(data_path);
  goflow::Rng rng = goflow::Rng(c.seed).stream(97);
  json rows = json::array();
  double sum = 0.0;
  int n = 0;
  for (const auto& rec : data) {
    const goflow::MoleculeContext mol = goflow::make_context(rec.graph);
    for (std::size_t k = 0; k < rec.conformers.size(); ++k) {
      const goflow::LikelihoodResult r =
          goflow::log_likelihood(ck.params, mol, rec.conformers[k], cfg.loglik_steps, cfg.train.likelihood_probes, rng,
                                 prior, cfg.train.hutchinson_step);
      std::printf("%-24s %4zu  log p = %14.6f  (prior %14.6f, flow %12.6f)\n", rec.name.c_str(), k, r.log_likelihood,
                  r.prior_log_density, r.delta);
      rows.push_back({{"molecule", rec.name}, {"conformer", k}, {"log_likelihood", r.log_likelihood},
                      {"prior_log_density", r.prior_log_density}, {"flow_delta", r.delta}});
      sum += r.log_likelihood;
      ++n;
    }
  }
  if (n == 0) throw goflow::ValidationError(data_path + ": no conformers to score");
  std::printf("mean log p = %.6f over %d conformer(s), %d probes, %d steps\n", sum / n, n,
              cfg.train.likelihood_probes, cfg.loglik_steps);
  if (!out.empty())
    write_json(out, {{"mean_log_likelihood", sum / n}, {"probes", cfg.train.likelihood_probes},
                     {"steps", cfg.loglik_steps}, {"conformers", rows}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"goflow: manifold-decomposed flow matching for molecular conformers"};
  app.require_subcommand(1);
  Common common;

  auto* check = app.add_subcommand("check", "run the geometry, Jacobian, roundtrip and Sinkhorn oracle suites");
  std::string real_path = GOFLOW_DEFAULT_REAL_FIXTURE, check_json;
  check->add_option("--real", real_path, "dataset of real molecules for the roundtrip suite (empty to skip)");
  check->add_option("--json", check_json, "also write results as JSON");
  add_common(check, common);

  auto* toygen = app.add_subcommand("toygen", "write a synthetic dataset with a known torsion law");
  std::string toy_out;
  toygen->add_option("--out", toy_out, "output dataset")->required();
  add_common(toygen, common);

  auto* import = app.add_subcommand("import", "convert per-molecule coordinate lists into a dataset");
  std::string import_in, import_out;
  import->add_option("--in", import_in, "JSON lines of {name, elements, bonds, conformers}")->required();
  import->add_option("--out", import_out, "output dataset")->required();
  add_common(import, common);

  auto* decompose = app.add_subcommand("decompose", "write (c, q, z) records per conformer");
  std::string dec_in, dec_out;
  decompose->add_option("--in", dec_in, "input dataset")->required();
  decompose->add_option("--out", dec_out, "output JSON lines")->required();
  add_common(decompose, common);

  auto* train = app.add_subcommand("train", "train the velocity network");
  std::string train_data, train_stages = "1,2,3", train_out, train_csv, train_init;
  train->add_option("--data", train_data, "training dataset")->required();
  train->add_option("--stages", train_stages, "consecutive stages to run, e.g. 1,2,3");
  train->add_option("--out", train_out, "checkpoint path; per-stage copies get a .stageN suffix")->required();
  train->add_option("--loss-csv", train_csv, "loss history (default: CKPT.loss.csv)");
  train->add_option("--init", train_init, "resume from this checkpoint");
  add_common(train, common);

  auto* sample = app.add_subcommand("sample", "generate conformers for one molecule");
  std::string smp_ckpt, smp_data, smp_method, smp_out;
  int smp_index = 0, smp_num = 10, smp_steps = 0;
  bool smp_cart = false;
  sample->add_option("--ckpt", smp_ckpt, "checkpoint")->required();
  sample->add_option("--data", smp_data, "dataset holding the molecule graph")->required();
  sample->add_option("--mol-index", smp_index, "molecule index in --data");
  sample->add_option("--num", smp_num, "number of conformers");
  sample->add_option("--steps", smp_steps, "integration steps (default from config)");
  sample->add_option("--method", smp_method, "euler, rk4 or dopri");
  sample->add_flag("--cartesian", smp_cart, "integrate Cartesian coordinates with per-step re-decomposition");
  sample->add_option("--out", smp_out, "output dataset")->required();
  add_common(sample, common);

  auto* eval = app.add_subcommand("eval", "COV/MAT metrics of generated against reference ensembles");
  std::string ev_gen, ev_ref, ev_out;
  double ev_delta = 0.5;
  bool ev_heavy = false;
  eval->add_option("--generated", ev_gen, "generated dataset")->required();
  eval->add_option("--reference", ev_ref, "reference dataset")->required();
  auto* delta_opt = eval->add_option("--delta", ev_delta, "coverage threshold in Angstrom");
  eval->add_flag("--heavy-atoms", ev_heavy, "RMSD over heavy atoms only");
  eval->add_option("--out", ev_out, "JSON report");
  add_common(eval, common);

  auto* loglik = app.add_subcommand("loglik", "log-likelihood of conformers under the flow");
  std::string ll_ckpt, ll_data, ll_out;
  int ll_probes = 0, ll_steps = 0;
  loglik->add_option("--ckpt", ll_ckpt, "checkpoint")->required();
  loglik->add_option("--data", ll_data, "dataset to score")->required();
  loglik->add_option("--probes", ll_probes, "Hutchinson probes (default from config)");
  loglik->add_option("--steps", ll_steps, "integration steps (default from config)");
  loglik->add_option("--out", ll_out, "JSON results");
  add_common(loglik, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(goflow::ExitCode::kValidation);
  }

  try {
    if (*check) return run_check(common, real_path, check_json);
    if (*toygen) return run_toygen(common, toy_out);
    if (*import) return run_import(common, import_in, import_out);
    if (*decompose) return run_decompose(common, dec_in, dec_out);
    if (*train) return run_train(common, train_data, train_stages, train_out, train_csv, train_init);
    if (*sample)
      return run_sample(common, smp_ckpt, smp_data, smp_index, smp_num, smp_steps, smp_method, smp_cart, smp_out);
    if (*eval) return run_eval(common, ev_gen, ev_ref, ev_delta, delta_opt->count() > 0, ev_heavy, ev_out);
    if (*loglik) return run_loglik(common, ll_ckpt, ll_data, ll_probes, ll_steps, ll_out);
  } catch (const goflow::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(goflow::ExitCode::kValidation);
  }
  return 0;
}
