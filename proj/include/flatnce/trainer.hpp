#pragma once

// The training loop: batch → scores → objective → gradients → update, with periodic
// large-K evaluation, ESS logging and run-record persistence (JSONL + CSV).

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "flatnce/autodiff.hpp"
#include "flatnce/critics.hpp"
#include "flatnce/data.hpp"
#include "flatnce/diagnostics.hpp"
#include "flatnce/estimators.hpp"
#include "flatnce/optim.hpp"
#include "flatnce/rng.hpp"

namespace flatnce {

enum class BetaPolicy { fixed, scheduler };
enum class Precision { f64, f32 };

inline std::string_view to_string(BetaPolicy p) { return p == BetaPolicy::fixed ? "fixed" : "scheduler"; }
inline std::string_view to_string(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }

inline std::optional<BetaPolicy> parse_beta_policy(std::string_view s) {
  if (s == "fixed") return BetaPolicy::fixed;
  if (s == "scheduler") return BetaPolicy::scheduler;
  return std::nullopt;
}
inline std::optional<Precision> parse_precision(std::string_view s) {
  if (s == "f64") return Precision::f64;
  if (s == "f32") return Precision::f32;
  return std::nullopt;
}

inline constexpr double kGradGuard = 1e6;

struct TrainConfig {
  DatasetSpec dataset;
  CriticKind critic = CriticKind::separable;
  std::size_t embed_dim = 16;
  std::size_t hidden = 64;
  bool normalize = false;
  EstimatorKind estimator;
  std::size_t batch_size = 128;
  OptimizerSpec optimizer;
  long steps = 1000;
  long eval_every = 100;
  long log_every = 0;  // 0: same as eval_every
  std::size_t k_eval = 4096;
  std::size_t eval_batches = 1;
  BetaPolicy beta_policy = BetaPolicy::fixed;
  double beta = 1.0;
  SchedulerState scheduler;  // used when beta_policy == scheduler; horizon = steps
  std::uint64_t seed = 0;
  Precision precision = Precision::f64;
  bool record_timing = false;

  long log_cadence() const { return log_every > 0 ? log_every : eval_every; }

  void validate() const {
    dataset.validate();
    estimator.validate();
    optimizer.validate();
    if (steps < 1) throw std::invalid_argument("config: steps must be >= 1");
    if (batch_size < 2) throw std::invalid_argument("config: K must be >= 2");
    if (eval_every < 1) throw std::invalid_argument("config: eval_every must be >= 1");
    if (log_every < 0) throw std::invalid_argument("config: log_every must be >= 0");
    if (k_eval < 2) throw std::invalid_argument("config: k_eval must be >= 2");
    if (eval_batches < 1) throw std::invalid_argument("config: eval_batches must be >= 1");
    if (!(beta > 0.0)) throw std::invalid_argument("config: beta must be positive");
    if (beta_policy == BetaPolicy::scheduler) scheduler.validate();
    if (estimator.tag == EstimatorTag::flo && critic == CriticKind::dual_u) {
      throw std::invalid_argument("config: the primal critic cannot be dual-u");
    }
    if (critic == CriticKind::dual_u) throw std::invalid_argument("config: critic cannot be dual-u");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {
      {"dataset", to_string(c.dataset.kind)},
      {"dim", c.dataset.dim},
      {"rho", c.dataset.rho},
      {"sigma", c.dataset.sigma},
      {"critic", to_string(c.critic)},
      {"embed_dim", c.embed_dim},
      {"hidden", c.hidden},
      {"normalize", c.normalize},
      {"estimator", to_string(c.estimator)},
      {"k", c.batch_size},
      {"optimizer", to_string(c.optimizer.kind)},
      {"lr", c.optimizer.lr},
      {"momentum", c.optimizer.momentum},
      {"adam_beta1", c.optimizer.beta1},
      {"adam_beta2", c.optimizer.beta2},
      {"adam_eps", c.optimizer.eps},
      {"steps", c.steps},
      {"eval_every", c.eval_every},
      {"log_every", c.log_every},
      {"k_eval", c.k_eval},
      {"eval_batches", c.eval_batches},
      {"beta_policy", to_string(c.beta_policy)},
      {"beta", c.beta},
      {"ess_target_start", c.scheduler.target_start},
      {"ess_target_end", c.scheduler.target_end},
      {"ess_rate", c.scheduler.rate},
      {"scheduler_mode", to_string(c.scheduler.mode)},
      {"seed", c.seed},
      {"precision", to_string(c.precision)},
      {"record_timing", c.record_timing},
  };
}

/// FNV-1a over the canonical JSON form of the config.
inline std::uint64_t config_hash(const TrainConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json(c).dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct RunRow {
  long step = 0;
  double train_loss = 0.0;
  double batch_mi_estimate = 0.0;  // InfoNCE estimate on the training batch
  std::optional<double> eval_mi;
  double batch_mean_ess = 0.0;  // of the training objective's own weights
  double beta = 1.0;
  std::optional<double> wall_ms;

  friend bool operator==(const RunRow&, const RunRow&) = default;
};

enum class RunStatus { completed, diverged, failed };

inline std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::completed: return "completed";
    case RunStatus::diverged: return "diverged";
    case RunStatus::failed: return "failed";
  }
  return "?";
}

struct RunHeader {
  std::uint64_t config_hash = 0;
  double true_mi = 0.0;
  double log_k = 0.0;
  std::string estimator;
  std::size_t k = 0;
  std::size_t k_eval = 0;
  std::uint64_t seed = 0;
  RunStatus status = RunStatus::completed;
  std::optional<long> failed_step;
  std::string message;

  friend bool operator==(const RunHeader&, const RunHeader&) = default;
};

struct RunRecord {
  RunHeader header;
  std::vector<RunRow> rows;
  // Final parameters; not part of the serialized record.
  CriticParams critic;
  std::optional<CriticParams> dual;
};

struct StepInfo {
  long step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;  // L2 over every trained parameter
  double grad_inf = 0.0;
  double beta = 1.0;
  double mean_ess = 0.0;
  const std::vector<Matrix<double>>* grads = nullptr;
};

using StepObserver = std::function<void(const StepInfo&)>;

namespace detail {

struct StepResult {
  EstimatorOutput<double> out;
  double batch_mi = 0.0;
  Matrix<double> scores;
  std::vector<Matrix<double>> critic_grads;
  std::vector<Matrix<double>> dual_grads;
};

template <class T>
EstimatorOutput<double> widen(const EstimatorOutput<T>& o) {
  EstimatorOutput<double> w;
  w.loss = static_cast<double>(o.loss);
  w.mi_estimate = static_cast<double>(o.mi_estimate);
  w.row_weights = o.row_weights.template cast<double>();
  w.row_ess.assign(o.row_ess.begin(), o.row_ess.end());
  return w;
}

inline StepResult forward_backward(const TrainConfig& cfg, const CriticParams& critic,
                                   const CriticParams* dual, const Batch& batch) {
  Tape<double> tape;
  const BoundCritic bc = bind(tape, critic);
  std::optional<BoundCritic> bd;
  std::optional<Var<double>> u;
  if (dual) {
    bd = bind(tape, *dual);
    u = dual_score_batch(tape, *bd, batch.xs, batch.ys);
  }
  const Var<double> s = score_batch(tape, bc, batch.xs, batch.ys);

  StepResult r;
  if (cfg.precision == Precision::f64) {
    auto est = estimate(cfg.estimator, s, u);
    tape.backward(est.loss);
    r.out = std::move(est.out);
  } else {
    // Objective in 32-bit; its score gradient is pulled back through the 64-bit critic
    // graph by differentiating Σ s ⊙ G (and Σ u ⊙ G_u) with G held constant.
    Tape<float> t32;
    const Var<float> s32 = t32.leaf(s.value().cast<float>());
    std::optional<Var<float>> u32;
    if (u) u32 = t32.leaf(u->value().cast<float>());
    auto est = estimate(cfg.estimator, s32, u32);
    t32.backward(est.loss);
    Var<double> surrogate = sum(mul(s, tape.constant(t32.grad(s32).cast<double>())));
    if (u) surrogate = add(surrogate, sum(mul(*u, tape.constant(t32.grad(*u32).cast<double>()))));
    tape.backward(surrogate);
    r.out = widen(est.out);
  }
  r.critic_grads = bc.grads(tape);
  if (bd) r.dual_grads = bd->grads(tape);
  r.scores = s.value();
  r.batch_mi = infonce_mi(r.scores);
  return r;
}

inline void grad_norms(const std::vector<Matrix<double>>& gs, double& sq, double& inf) {
  for (const auto& g : gs)
    for (double v : g.data()) {
      sq += v * v;
      inf = std::max(inf, std::abs(v));
      if (!std::isfinite(v)) inf = std::numeric_limits<double>::infinity();
    }
}

}  // namespace detail

/// Runs the full loop. Deterministic given the config (timing column excepted, and it
/// is off unless record_timing is set).
inline RunRecord train(const TrainConfig& cfg, const StepObserver& observer = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Rng init_rng(cfg.seed, streams::init);
  Rng dual_rng(cfg.seed, streams::dual_init);
  Rng train_rng(cfg.seed, streams::train);
  Rng eval_rng(cfg.seed, streams::eval);

  const std::size_t d = cfg.dataset.dim;
  RunRecord rec;
  rec.critic = make_critic(cfg.critic, d, d, cfg.embed_dim, init_rng, cfg.beta, cfg.normalize, cfg.hidden);
  if (cfg.estimator.tag == EstimatorTag::flo) {
    rec.dual = make_critic(CriticKind::dual_u, d, d, 1, dual_rng, 1.0, false, cfg.hidden);
  }
  rec.header.config_hash = config_hash(cfg);
  rec.header.true_mi = true_mi(cfg.dataset);
  rec.header.log_k = std::log(static_cast<double>(cfg.batch_size));
  rec.header.estimator = to_string(cfg.estimator);
  rec.header.k = cfg.batch_size;
  rec.header.k_eval = cfg.k_eval;
  rec.header.seed = cfg.seed;

  SchedulerState sched = cfg.scheduler;
  sched.beta = cfg.beta;
  sched.horizon = cfg.steps;
  OptimizerState opt_state, dual_state;

  for (long t = 1; t <= cfg.steps; ++t) {
    const Batch batch = sample_batch(cfg.dataset, cfg.batch_size, train_rng);
    const double beta_used = rec.critic.beta;
    detail::StepResult r =
        detail::forward_backward(cfg, rec.critic, rec.dual ? &*rec.dual : nullptr, batch);

    double sq = 0.0, inf = 0.0;
    detail::grad_norms(r.critic_grads, sq, inf);
    detail::grad_norms(r.dual_grads, sq, inf);
    if (observer) {
      observer({t, r.out.loss, std::sqrt(sq), inf, beta_used, r.out.mean_ess(), &r.critic_grads});
    }
    if (!std::isfinite(r.out.loss) || !(inf <= kGradGuard)) {
      rec.header.status = RunStatus::diverged;
      rec.header.failed_step = t;
      rec.header.message = !std::isfinite(r.out.loss)
                               ? fmt::format("non-finite loss at step {}", t)
                               : fmt::format("gradient max-norm {} exceeds {} at step {}", inf, kGradGuard, t);
      break;
    }
    try {
      optimizer_step(rec.critic.params, r.critic_grads, opt_state, cfg.optimizer);
      if (rec.dual) optimizer_step(rec.dual->params, r.dual_grads, dual_state, cfg.optimizer);
    } catch (const NonFiniteGradient& e) {
      rec.header.status = RunStatus::diverged;
      rec.header.failed_step = t;
      rec.header.message = e.what();
      break;
    }

    if (cfg.beta_policy == BetaPolicy::scheduler) {
      const EssReport rep = ess_report(r.scores, beta_used);
      sched = step_scheduler(sched, rep.mean_ess, t);
      rec.critic.beta = sched.beta;
    }

    const bool last = t == cfg.steps;
    if (t % cfg.log_cadence() == 0 || last) {
      RunRow row;
      row.step = t;
      row.train_loss = r.out.loss;
      row.batch_mi_estimate = r.batch_mi;
      row.batch_mean_ess = r.out.mean_ess();
      row.beta = beta_used;
      if (t % cfg.eval_every == 0 || last) {
        row.eval_mi = evaluate_large_k(rec.critic, cfg.dataset, cfg.k_eval, eval_rng, cfg.eval_batches);
      }
      if (cfg.record_timing) {
        row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      }
      rec.rows.push_back(row);
    }
  }
  return rec;
}

/// Runs configs on a bounded worker pool; a throwing run is recorded as failed and the
/// sweep continues. Output order matches input order.
inline std::vector<RunRecord> sweep(const std::vector<TrainConfig>& configs, unsigned workers = 0) {
  if (configs.empty()) throw std::invalid_argument("sweep: empty config list");
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min<unsigned>(workers, static_cast<unsigned>(configs.size()));
  std::vector<RunRecord> out(configs.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      try {
        out[i] = train(configs[i]);
      } catch (const std::exception& e) {
        RunRecord r;
        r.header.status = RunStatus::failed;
        r.header.message = e.what();
        r.header.seed = configs[i].seed;
        r.header.k = configs[i].batch_size;
        r.header.estimator = to_string(configs[i].estimator);
        try {
          r.header.config_hash = config_hash(configs[i]);
          r.header.true_mi = true_mi(configs[i].dataset);
        } catch (const std::exception&) {
        }
        out[i] = std::move(r);
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& th : pool) th.join();
  return out;
}

// ---------------------------------------------------------------------------
// Persistence.

inline nlohmann::json to_json(const RunHeader& h) {
  nlohmann::json j = {{"type", "header"},
                      {"config_hash", fmt::format("{:016x}", h.config_hash)},
                      {"true_mi", h.true_mi},
                      {"log_k", h.log_k},
                      {"estimator", h.estimator},
                      {"k", h.k},
                      {"k_eval", h.k_eval},
                      {"seed", h.seed},
                      {"status", to_string(h.status)},
                      {"failed_step", nullptr},
                      {"message", h.message}};
  if (h.failed_step) j["failed_step"] = *h.failed_step;
  return j;
}

inline nlohmann::json to_json(const RunRow& r) {
  nlohmann::json j = {{"step", r.step},
                      {"train_loss", r.train_loss},
                      {"batch_mi_estimate", r.batch_mi_estimate},
                      {"eval_mi", nullptr},
                      {"batch_mean_ess", r.batch_mean_ess},
                      {"beta", r.beta},
                      {"wall_ms", nullptr}};
  if (r.eval_mi) j["eval_mi"] = *r.eval_mi;
  if (r.wall_ms) j["wall_ms"] = *r.wall_ms;
  return j;
}

inline std::string to_jsonl(const RunRecord& rec) {
  std::string out = to_json(rec.header).dump() + "\n";
  for (const auto& r : rec.rows) out += to_json(r).dump() + "\n";
  return out;
}

inline constexpr std::string_view kCsvHeader =
    "step,train_loss,batch_mi_estimate,eval_mi,batch_mean_ess,beta,wall_ms";

namespace detail {
// Shortest round-trip text for a double; empty for a missing value.
inline std::string num(std::optional<double> v) {
  if (!v) return "";
  if (!std::isfinite(*v)) return std::isnan(*v) ? "nan" : (*v > 0 ? "inf" : "-inf");
  return fmt::format("{}", *v);
}
}  // namespace detail

inline std::string to_csv(const RunRecord& rec) {
  std::string out(kCsvHeader);
  out += '\n';
  for (const auto& r : rec.rows) {
    out += fmt::format("{},{},{},{},{},{},{}\n", r.step, detail::num(r.train_loss),
                       detail::num(r.batch_mi_estimate), detail::num(r.eval_mi),
                       detail::num(r.batch_mean_ess), detail::num(r.beta), detail::num(r.wall_ms));
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

/// Writes <stem>.jsonl and <stem>.csv.
inline void write_record(const RunRecord& rec, const std::filesystem::path& stem) {
  write_text(std::filesystem::path(stem.string() + ".jsonl"), to_jsonl(rec));
  write_text(std::filesystem::path(stem.string() + ".csv"), to_csv(rec));
}

class RecordParseError : public std::runtime_error {
 public:
  RecordParseError(std::size_t line, const std::string& what)
      : std::runtime_error(fmt::format("line {}: {}", line, what)), line_number(line) {}
  std::size_t line_number;
};

namespace detail {
inline std::optional<double> opt_num(const nlohmann::json& j, const char* key) {
  const auto& v = j.at(key);
  if (v.is_null()) return std::nullopt;
  return v.get<double>();
}
}  // namespace detail

/// Parses a JSONL record; errors carry the 1-based line number.
inline RunRecord parse_jsonl(std::istream& in) {
  RunRecord rec;
  std::string line;
  std::size_t n = 0;
  bool have_header = false;
  long last_step = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!have_header) {
        if (j.value("type", "") != "header") throw std::runtime_error("first object must be the header");
        auto& h = rec.header;
        h.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
        h.true_mi = j.at("true_mi").get<double>();
        h.log_k = j.at("log_k").get<double>();
        h.estimator = j.at("estimator").get<std::string>();
        h.k = j.at("k").get<std::size_t>();
        h.k_eval = j.at("k_eval").get<std::size_t>();
        h.seed = j.at("seed").get<std::uint64_t>();
        const auto status = j.at("status").get<std::string>();
        if (status == "completed") h.status = RunStatus::completed;
        else if (status == "diverged") h.status = RunStatus::diverged;
        else if (status == "failed") h.status = RunStatus::failed;
        else throw std::runtime_error("unknown status " + status);
        if (!j.at("failed_step").is_null()) h.failed_step = j.at("failed_step").get<long>();
        h.message = j.at("message").get<std::string>();
        have_header = true;
        continue;
      }
      RunRow r;
      r.step = j.at("step").get<long>();
      if (r.step <= last_step) throw std::runtime_error("steps must be strictly increasing");
      last_step = r.step;
      r.train_loss = j.at("train_loss").get<double>();
      r.batch_mi_estimate = j.at("batch_mi_estimate").get<double>();
      r.eval_mi = detail::opt_num(j, "eval_mi");
      r.batch_mean_ess = j.at("batch_mean_ess").get<double>();
      r.beta = j.at("beta").get<double>();
      r.wall_ms = detail::opt_num(j, "wall_ms");
      rec.rows.push_back(r);
    } catch (const RecordParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw RecordParseError(n, e.what());
    }
  }
  if (!have_header) throw RecordParseError(n == 0 ? 1 : n, "missing header");
  return rec;
}

inline RunRecord read_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RecordParseError(0, "cannot open " + path.string());
  return parse_jsonl(in);
}

/// One line per run: final evaluation and batch quantities.
inline std::string sweep_summary_csv(const std::vector<TrainConfig>& configs,
                                     const std::vector<RunRecord>& records) {
  std::string out = "run,estimator,k,seed,status,steps_logged,final_step,final_eval_mi,final_batch_mi,final_ess,true_mi\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    std::optional<double> eval, batch, ess;
    long step = 0;
    if (!r.rows.empty()) {
      step = r.rows.back().step;
      batch = r.rows.back().batch_mi_estimate;
      ess = r.rows.back().batch_mean_ess;
      for (auto it = r.rows.rbegin(); it != r.rows.rend(); ++it)
        if (it->eval_mi) {
          eval = it->eval_mi;
          break;
        }
    }
    out += fmt::format("{},{},{},{},{},{},{},{},{},{},{}\n", i, to_string(configs[i].estimator),
                       configs[i].batch_size, configs[i].seed, to_string(r.header.status), r.rows.size(),
                       step, detail::num(eval), detail::num(batch), detail::num(ess),
                       detail::num(r.header.true_mi));
  }
  return out;
}

}  // namespace flatnce
