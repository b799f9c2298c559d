#pragma once

// Flat `key = value` configuration. Lines starting with '#' are comments.
// Unknown keys, duplicates and malformed values are errors naming the line.

#include <array>
#include <cerrno>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "goflow/errors.hpp"
#include "goflow/ode_sampler.hpp"
#include "goflow/toy_data.hpp"
#include "goflow/training.hpp"
#include "goflow/velocity_net.hpp"

namespace goflow {

struct AppConfig {
  NetConfig net;
  TrainOptions train;
  std::array<StageConfig, 3> stages{StageConfig::defaults(1), StageConfig::defaults(2), StageConfig::defaults(3)};
  SamplerConfig sampler;
  ToyDatasetConfig toy;
  double delta = 0.5;
  bool heavy_atoms_only = false;
  int loglik_steps = 10;

  /// One seed drives every random stream.
  void set_seed(std::uint64_t seed) {
    net.seed = seed;
    train.seed = seed;
    sampler.seed = seed;
    toy.seed = seed;
  }

  void validate() const {
    net.validate();
    train.validate();
    for (const StageConfig& s : stages) s.validate();
    sampler.validate();
    toy.validate();
    if (!(delta >= 0)) throw ValidationError("eval.delta must be nonnegative");
    if (loglik_steps < 1) throw ValidationError("loglik.steps must be at least 1");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || errno == ERANGE) throw ValidationError("expected a number, got '" + v + "'");
  return d;
}

inline long long parse_int(const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const long long k = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0' || errno == ERANGE) throw ValidationError("expected an integer, got '" + v + "'");
  return k;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ValidationError("expected a boolean, got '" + v + "'");
}

/// "mean:weight:std, mean:weight:std, ..." with angles in radians.
inline std::vector<TorsionMode> parse_modes(const std::string& v) {
  std::vector<TorsionMode> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    std::array<std::string, 3> part;
    std::stringstream is(item);
    int n = 0;
    while (n < 3 && std::getline(is, part[n], ':')) part[n] = trim(part[n]), ++n;
    std::string rest;
    if (n != 3 || std::getline(is, rest)) throw ValidationError("torsion mode '" + item + "' must be mean:weight:std");
    out.push_back({parse_double(part[0]), parse_double(part[1]), parse_double(part[2])});
  }
  if (out.empty()) throw ValidationError("expected at least one torsion mode");
  return out;
}

using Setter = std::function<void(AppConfig&, const std::string&)>;

inline const std::map<std::string, Setter>& config_setters() {
  static const std::map<std::string, Setter> k = [] {
    std::map<std::string, Setter> m;
    auto d = [](double& (*f)(AppConfig&)) { return [f](AppConfig& c, const std::string& v) { f(c) = parse_double(v); }; };
    auto i = [](int& (*f)(AppConfig&)) {
      return [f](AppConfig& c, const std::string& v) { f(c) = static_cast<int>(parse_int(v)); };
    };
    auto b = [](bool& (*f)(AppConfig&)) { return [f](AppConfig& c, const std::string& v) { f(c) = parse_bool(v); }; };
    m["net.hidden_dim"] = i([](AppConfig& c) -> int& { return c.net.hidden_dim; });
    m["net.num_layers"] = i([](AppConfig& c) -> int& { return c.net.num_layers; });
    m["net.time_embed_dim"] = i([](AppConfig& c) -> int& { return c.net.time_embed_dim; });
    m["net.message_passing"] = b([](AppConfig& c) -> bool& { return c.net.message_passing; });
    m["prior.sigma_trans"] = d([](AppConfig& c) -> double& { return c.train.prior.sigma_trans; });
    m["prior.sigma_rot"] = d([](AppConfig& c) -> double& { return c.train.prior.sigma_rot; });
    m["prior.sigma_conf"] = d([](AppConfig& c) -> double& { return c.train.prior.sigma_conf; });
    m["prior.cartesian"] = b([](AppConfig& c) -> bool& { return c.train.prior.cartesian; });
    m["cost.alpha_r"] = d([](AppConfig& c) -> double& { return c.train.cost.alpha_r; });
    m["cost.alpha_theta"] = d([](AppConfig& c) -> double& { return c.train.cost.alpha_theta; });
    m["cost.alpha_phi"] = d([](AppConfig& c) -> double& { return c.train.cost.alpha_phi; });
    m["ot.epsilon"] = d([](AppConfig& c) -> double& { return c.train.ot_epsilon; });
    m["ot.max_iters"] = i([](AppConfig& c) -> int& { return c.train.ot_max_iters; });
    m["ot.tol"] = d([](AppConfig& c) -> double& { return c.train.ot_tol; });
    m["train.momentum"] = d([](AppConfig& c) -> double& { return c.train.momentum; });
    m["train.divergence_factor"] = d([](AppConfig& c) -> double& { return c.train.divergence_factor; });
    m["train.guard_window"] = i([](AppConfig& c) -> int& { return c.train.guard_window; });
    m["train.likelihood_steps"] = i([](AppConfig& c) -> int& { return c.train.likelihood_steps; });
    m["train.likelihood_probes"] = i([](AppConfig& c) -> int& { return c.train.likelihood_probes; });
    m["train.hutchinson_step"] = d([](AppConfig& c) -> double& { return c.train.hutchinson_step; });
    m["train.trans"] = b([](AppConfig& c) -> bool& { return c.train.train_trans; });
    m["train.rot"] = b([](AppConfig& c) -> bool& { return c.train.train_rot; });
    m["train.conf"] = b([](AppConfig& c) -> bool& { return c.train.train_conf; });
    for (int s = 0; s < 3; ++s) {
      const std::string p = "stage" + std::to_string(s + 1) + ".";
      m[p + "epochs"] = [s](AppConfig& c, const std::string& v) { c.stages[s].epochs = static_cast<int>(parse_int(v)); };
      m[p + "learning_rate"] = [s](AppConfig& c, const std::string& v) { c.stages[s].learning_rate = parse_double(v); };
      m[p + "batch_size"] = [s](AppConfig& c, const std::string& v) { c.stages[s].batch_size = static_cast<int>(parse_int(v)); };
      m[p + "lambda_flow"] = [s](AppConfig& c, const std::string& v) { c.stages[s].lambda_flow = parse_double(v); };
    }
    m["sampler.method"] = [](AppConfig& c, const std::string& v) { c.sampler.method = parse_ode_method(v); };
    m["sampler.steps"] = i([](AppConfig& c) -> int& { return c.sampler.steps; });
    m["sampler.rtol"] = d([](AppConfig& c) -> double& { return c.sampler.rtol; });
    m["sampler.atol"] = d([](AppConfig& c) -> double& { return c.sampler.atol; });
    m["sampler.min_step"] = d([](AppConfig& c) -> double& { return c.sampler.min_step; });
    m["sampler.cartesian"] = b([](AppConfig& c) -> bool& { return c.sampler.cartesian; });
    m["toy.family"] = [](AppConfig& c, const std::string& v) { c.toy.family = parse_family(v); };
    m["toy.chain_length"] = i([](AppConfig& c) -> int& { return c.toy.chain_length; });
    m["toy.modes"] = [](AppConfig& c, const std::string& v) { c.toy.torsion_modes = parse_modes(v); };
    m["toy.n_molecules"] = i([](AppConfig& c) -> int& { return c.toy.n_molecules; });
    m["toy.conformers_per_molecule"] = i([](AppConfig& c) -> int& { return c.toy.conformers_per_molecule; });
    m["eval.delta"] = d([](AppConfig& c) -> double& { return c.delta; });
    m["eval.heavy_atoms_only"] = b([](AppConfig& c) -> bool& { return c.heavy_atoms_only; });
    m["loglik.steps"] = i([](AppConfig& c) -> int& { return c.loglik_steps; });
    return m;
  }();
  return k;
}

}  // namespace detail

/// Applies `key = value` lines from `in` on top of `config`.
inline void apply_config(std::istream& in, AppConfig& config, const std::string& source = "<config>") {
  const auto& setters = detail::config_setters();
  std::map<std::string, int> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ValidationError(where + "expected 'key = value'");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end()) throw ValidationError(where + "unknown key '" + key + "'");
    if (seen.count(key))
      throw ValidationError(where + "duplicate key '" + key + "' (first set on line " + std::to_string(seen[key]) + ")");
    seen[key] = line_no;
    try {
      it->second(config, value);
    } catch (const ValidationError& e) {
      throw ValidationError(where + key + ": " + e.what());
    }
  }
}

inline AppConfig load_config(const std::string& path) {
  AppConfig config;
  if (path.empty()) return config;
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config '" + path + "'");
  apply_config(in, config, path);
  return config;
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, v] : detail::config_setters()) out.push_back(k);
  return out;
}

}  // namespace goflow
