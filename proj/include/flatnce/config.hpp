#pragma once

// Experiment config files: a flat `key: value` table (YAML subset, `#` comments).
// Every key is optional; unset keys keep the TrainConfig defaults.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include "flatnce/trainer.hpp"

namespace flatnce {

struct ExperimentConfig {
  TrainConfig train;
  std::string out_dir = "runs";

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline const std::set<std::string>& config_keys() {
  static const std::set<std::string> keys = {
      "dataset", "dim", "rho", "true_mi", "sigma", "critic", "embed_dim", "hidden", "normalize",
      "estimator", "holder_gamma", "k", "optimizer", "lr", "momentum", "adam_beta1", "adam_beta2",
      "adam_eps", "steps", "eval_every", "log_every", "k_eval", "eval_batches", "beta_policy",
      "beta", "ess_target_start", "ess_target_end", "ess_rate", "scheduler_mode", "seed",
      "precision", "record_timing", "out"};
  return keys;
}

namespace detail {

template <class T>
T yaml_get(const YAML::Node& n, const std::string& key) {
  try {
    return n[key].as<T>();
  } catch (const YAML::Exception& e) {
    throw ConfigError(fmt::format("config key '{}': {}", key, e.what()));
  }
}

template <class E, class Parse>
E enum_get(const YAML::Node& n, const std::string& key, Parse parse) {
  const auto s = yaml_get<std::string>(n, key);
  const auto v = parse(s);
  if (!v) throw ConfigError(fmt::format("config key '{}': unknown value '{}'", key, s));
  return *v;
}

inline std::string shortest(double v) { return fmt::format("{}", v); }

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ExperimentConfig cfg;
  if (root.IsNull()) return cfg;
  if (!root.IsMap()) throw ConfigError("config: top level must be a flat key table");
  for (const auto& kv : root) {
    const auto key = kv.first.as<std::string>();
    if (!config_keys().count(key)) throw ConfigError(fmt::format("config: unknown key '{}'", key));
    if (!kv.second.IsScalar()) throw ConfigError(fmt::format("config key '{}': must be a scalar", key));
  }
  using detail::yaml_get;
  auto& t = cfg.train;
  auto has = [&](const char* k) { return static_cast<bool>(root[k]); };

  if (has("dataset")) t.dataset.kind = detail::enum_get<DatasetKind>(root, "dataset", parse_dataset_kind);
  if (has("dim")) t.dataset.dim = yaml_get<std::size_t>(root, "dim");
  if (has("rho")) t.dataset.rho = yaml_get<double>(root, "rho");
  if (has("true_mi")) {
    if (has("rho")) throw ConfigError("config: give either rho or true_mi, not both");
    t.dataset.rho = rho_for_mi(yaml_get<double>(root, "true_mi"), t.dataset.dim);
  }
  if (has("sigma")) t.dataset.sigma = yaml_get<double>(root, "sigma");
  if (has("critic")) t.critic = detail::enum_get<CriticKind>(root, "critic", parse_critic_kind);
  if (has("embed_dim")) t.embed_dim = yaml_get<std::size_t>(root, "embed_dim");
  if (has("hidden")) t.hidden = yaml_get<std::size_t>(root, "hidden");
  if (has("normalize")) t.normalize = yaml_get<bool>(root, "normalize");
  const double gamma = has("holder_gamma") ? yaml_get<double>(root, "holder_gamma") : 1.0;
  if (has("estimator")) {
    const auto s = yaml_get<std::string>(root, "estimator");
    const auto k = parse_estimator(s, gamma);
    if (!k) throw ConfigError(fmt::format("config key 'estimator': unknown value '{}'", s));
    t.estimator = *k;
  }
  if (has("k")) t.batch_size = yaml_get<std::size_t>(root, "k");
  if (has("optimizer")) t.optimizer.kind = detail::enum_get<OptimizerKind>(root, "optimizer", parse_optimizer_kind);
  if (has("lr")) t.optimizer.lr = yaml_get<double>(root, "lr");
  if (has("momentum")) t.optimizer.momentum = yaml_get<double>(root, "momentum");
  if (has("adam_beta1")) t.optimizer.beta1 = yaml_get<double>(root, "adam_beta1");
  if (has("adam_beta2")) t.optimizer.beta2 = yaml_get<double>(root, "adam_beta2");
  if (has("adam_eps")) t.optimizer.eps = yaml_get<double>(root, "adam_eps");
  if (has("steps")) t.steps = yaml_get<long>(root, "steps");
  if (has("eval_every")) t.eval_every = yaml_get<long>(root, "eval_every");
  if (has("log_every")) t.log_every = yaml_get<long>(root, "log_every");
  if (has("k_eval")) t.k_eval = yaml_get<std::size_t>(root, "k_eval");
  if (has("eval_batches")) t.eval_batches = yaml_get<std::size_t>(root, "eval_batches");
  if (has("beta_policy")) t.beta_policy = detail::enum_get<BetaPolicy>(root, "beta_policy", parse_beta_policy);
  if (has("beta")) t.beta = yaml_get<double>(root, "beta");
  if (has("ess_target_start")) t.scheduler.target_start = yaml_get<double>(root, "ess_target_start");
  if (has("ess_target_end")) t.scheduler.target_end = yaml_get<double>(root, "ess_target_end");
  if (has("ess_rate")) t.scheduler.rate = yaml_get<double>(root, "ess_rate");
  if (has("scheduler_mode")) t.scheduler.mode = detail::enum_get<SchedulerMode>(root, "scheduler_mode", parse_scheduler_mode);
  if (has("seed")) t.seed = yaml_get<std::uint64_t>(root, "seed");
  if (has("precision")) t.precision = detail::enum_get<Precision>(root, "precision", parse_precision);
  if (has("record_timing")) t.record_timing = yaml_get<bool>(root, "record_timing");
  if (has("out")) cfg.out_dir = yaml_get<std::string>(root, "out");

  t.dataset.seed = t.seed;
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Canonical text form; parse_config(save_config(c)) == c.
inline std::string save_config(const ExperimentConfig& cfg) {
  const auto& t = cfg.train;
  using detail::shortest;
  std::string s;
  auto line = [&](std::string_view k, const std::string& v) { s += fmt::format("{}: {}\n", k, v); };
  line("dataset", std::string(to_string(t.dataset.kind)));
  line("dim", std::to_string(t.dataset.dim));
  line("rho", shortest(t.dataset.rho));
  line("sigma", shortest(t.dataset.sigma));
  line("critic", std::string(to_string(t.critic)));
  line("embed_dim", std::to_string(t.embed_dim));
  line("hidden", std::to_string(t.hidden));
  line("normalize", t.normalize ? "true" : "false");
  line("estimator", std::string(to_string(t.estimator.tag)));
  line("holder_gamma", shortest(t.estimator.gamma));
  line("k", std::to_string(t.batch_size));
  line("optimizer", std::string(to_string(t.optimizer.kind)));
  line("lr", shortest(t.optimizer.lr));
  line("momentum", shortest(t.optimizer.momentum));
  line("adam_beta1", shortest(t.optimizer.beta1));
  line("adam_beta2", shortest(t.optimizer.beta2));
  line("adam_eps", shortest(t.optimizer.eps));
  line("steps", std::to_string(t.steps));
  line("eval_every", std::to_string(t.eval_every));
  line("log_every", std::to_string(t.log_every));
  line("k_eval", std::to_string(t.k_eval));
  line("eval_batches", std::to_string(t.eval_batches));
  line("beta_policy", std::string(to_string(t.beta_policy)));
  line("beta", shortest(t.beta));
  line("ess_target_start", shortest(t.scheduler.target_start));
  line("ess_target_end", shortest(t.scheduler.target_end));
  line("ess_rate", shortest(t.scheduler.rate));
  line("scheduler_mode", std::string(to_string(t.scheduler.mode)));
  line("seed", std::to_string(t.seed));
  line("precision", std::string(to_string(t.precision)));
  line("record_timing", t.record_timing ? "true" : "false");
  line("out", fmt::format("\"{}\"", cfg.out_dir));
  return s;
}

}  // namespace flatnce
