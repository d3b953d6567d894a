// flatnce: estimation, training, sweeps and diagnostics for contrastive MI objectives.
//
// Exit codes: 0 success, 2 usage, 3 divergence guard tripped, 4 bad input file.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "flatnce/config.hpp"
#include "flatnce/flatnce.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace flatnce;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitBadInput = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BadInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonFlags {
  std::vector<std::string> configs;
  std::optional<std::string> estimator;
  std::optional<std::size_t> k;
  std::optional<std::size_t> k_eval;
  std::optional<long> steps;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> precision;
  std::optional<std::string> out;
  bool json = false;
  unsigned workers = 0;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool multi_config = false) {
  if (multi_config) {
    cmd->add_option("--config", f.configs, "Experiment config file (repeatable)");
  } else {
    cmd->add_option("--config", f.configs, "Experiment config file")->expected(0, 1);
  }
  cmd->add_option("--estimator", f.estimator, std::string("Estimator tag: ") + std::string(kEstimatorTags));
  cmd->add_option("--k", f.k, "Batch size K")->check(CLI::Range(2ul, 1ul << 20));
  cmd->add_option("--k-eval", f.k_eval, "Evaluation batch size")->check(CLI::Range(2ul, 1ul << 20));
  cmd->add_option("--steps", f.steps, "Training steps")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", f.seed, "Random seed");
  cmd->add_option("--precision", f.precision, "Objective precision")->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_flag("--json", f.json, "Machine-readable JSON on stdout");
  cmd->add_option("--workers", f.workers, "Worker threads for sweeps (0 = logical cores)");
}

ExperimentConfig load_base(const std::string& path) {
  try {
    return path.empty() ? ExperimentConfig{} : load_config(path);
  } catch (const ConfigError& e) {
    throw BadInput(e.what());
  } catch (const std::invalid_argument& e) {
    throw BadInput(e.what());
  }
}

EstimatorKind parse_estimator_or_usage(const std::string& tag, double gamma) {
  const auto k = parse_estimator(tag, gamma);
  if (!k) {
    throw UsageError(fmt::format("unknown estimator '{}'; valid tags: {}", tag, kEstimatorTags));
  }
  return *k;
}

void apply_flags(ExperimentConfig& cfg, const CommonFlags& f) {
  auto& t = cfg.train;
  if (f.estimator) t.estimator = parse_estimator_or_usage(*f.estimator, t.estimator.gamma);
  if (f.k) t.batch_size = *f.k;
  if (f.k_eval) t.k_eval = *f.k_eval;
  if (f.steps) t.steps = *f.steps;
  if (f.seed) {
    t.seed = *f.seed;
    t.dataset.seed = *f.seed;
  }
  if (f.precision) t.precision = *parse_precision(*f.precision);
  if (f.out) cfg.out_dir = *f.out;
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

std::string fmt_num(double v) { return fmt::format("{:.4f}", v); }

// ---------------------------------------------------------------------------

int cmd_estimate(const CommonFlags& f, std::size_t batches, const std::string& checkpoint,
                 const std::string& dual_path) {
  ExperimentConfig cfg = load_base(f.configs.empty() ? "" : f.configs.front());
  apply_flags(cfg, f);
  const auto& t = cfg.train;
  const std::size_t K = f.k ? *f.k : t.batch_size;

  ScoreFn score;
  DualFn dual;
  std::string critic_name;
  if (!checkpoint.empty()) {
    CriticParams p;
    try {
      p = load_checkpoint(checkpoint);
    } catch (const std::exception& e) {
      throw BadInput(e.what());
    }
    score = [p](const Matrix<double>& x, const Matrix<double>& y) { return score_batch(p, x, y); };
    critic_name = checkpoint;
  } else {
    DensityRatioCritic oracle(t.dataset);
    score = [oracle](const Matrix<double>& x, const Matrix<double>& y) { return oracle.scores(x, y); };
    critic_name = "oracle";
  }
  if (!dual_path.empty()) {
    CriticParams u;
    try {
      u = load_checkpoint(dual_path);
    } catch (const std::exception& e) {
      throw BadInput(e.what());
    }
    dual = [u](const Matrix<double>& x, const Matrix<double>& y) { return dual_score_batch(u, x, y); };
  }
  if (t.precision == Precision::f32) {
    // Round the scores to 32-bit and evaluate the objective there.
    score = [inner = score](const Matrix<double>& x, const Matrix<double>& y) {
      return inner(x, y).cast<float>().cast<double>();
    };
  }

  Rng rng(t.seed, streams::eval);
  const MiSummary s = estimate_batches(score, t.estimator, t.dataset, K, batches, rng, dual);
  const double mi = true_mi(t.dataset);
  if (f.json) {
    json j = {{"command", "estimate"},      {"estimator", to_string(t.estimator)},
              {"critic", critic_name},      {"k", K},
              {"batches", batches},         {"mean", s.mean},
              {"stderr", s.stderr_},        {"true_mi", mi},
              {"log_k", std::log(static_cast<double>(K))}, {"seed", t.seed},
              {"per_batch", s.per_batch}};
    std::cout << j.dump() << '\n';
  } else {
    std::cout << fmt::format("{} (K={}, {} batches, {} critic): {} ± {} nats; true MI {} nats\n",
                             to_string(t.estimator), K, batches, critic_name, fmt_num(s.mean),
                             fmt_num(s.stderr_), fmt_num(mi));
  }
  return kExitOk;
}

json run_summary(const RunRecord& r) {
  json j = to_json(r.header);
  j.erase("type");
  if (!r.rows.empty()) {
    const auto& last = r.rows.back();
    j["final_step"] = last.step;
    j["final_batch_mi"] = last.batch_mi_estimate;
    j["final_ess"] = last.batch_mean_ess;
    j["final_eval_mi"] = last.eval_mi ? json(*last.eval_mi) : json(nullptr);
  }
  j["rows"] = r.rows.size();
  return j;
}

int cmd_train(const CommonFlags& f) {
  ExperimentConfig cfg = load_base(f.configs.empty() ? "" : f.configs.front());
  apply_flags(cfg, f);
  const RunRecord rec = train(cfg.train);
  const fs::path out(cfg.out_dir);
  write_record(rec, out / "run");
  save_checkpoint(rec.critic, out / "critic.json");
  if (rec.dual) save_checkpoint(*rec.dual, out / "dual.json");
  write_text(out / "config.yaml", save_config(cfg));

  if (f.json) {
    json j = run_summary(rec);
    j["command"] = "train";
    j["out"] = cfg.out_dir;
    std::cout << j.dump() << '\n';
  } else {
    std::cout << fmt::format("{}: {} after {} logged rows -> {}\n", rec.header.estimator,
                             to_string(rec.header.status), rec.rows.size(), (out / "run.jsonl").string());
    if (!rec.rows.empty()) {
      const auto& last = rec.rows.back();
      std::cout << fmt::format("step {}: batch MI {} (log K {}), eval MI {}, ESS {}, true MI {}\n",
                               last.step, fmt_num(last.batch_mi_estimate), fmt_num(rec.header.log_k),
                               last.eval_mi ? fmt_num(*last.eval_mi) : "-", fmt_num(last.batch_mean_ess),
                               fmt_num(rec.header.true_mi));
    }
    if (rec.header.status == RunStatus::diverged) std::cerr << rec.header.message << '\n';
  }
  return rec.header.status == RunStatus::diverged ? kExitDiverged : kExitOk;
}

template <class T>
std::vector<T> parse_list(const std::string& s) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::stringstream is(item);
    T v{};
    if (!(is >> v)) throw UsageError("cannot parse list item '" + item + "'");
    out.push_back(v);
  }
  return out;
}

int cmd_sweep(const CommonFlags& f, const std::string& k_list, const std::string& estimators,
              const std::string& seeds) {
  std::vector<ExperimentConfig> bases;
  if (f.configs.empty()) bases.push_back(load_base(""));
  for (const auto& c : f.configs) bases.push_back(load_base(c));
  std::vector<TrainConfig> grid;
  std::string out_dir = f.out.value_or(bases.front().out_dir);
  for (auto& b : bases) {
    apply_flags(b, f);
    const auto ks = k_list.empty() ? std::vector<std::size_t>{b.train.batch_size} : parse_list<std::size_t>(k_list);
    std::vector<EstimatorKind> es;
    if (estimators.empty()) es.push_back(b.train.estimator);
    for (const auto& e : parse_list<std::string>(estimators)) es.push_back(parse_estimator_or_usage(e, b.train.estimator.gamma));
    const auto ss = seeds.empty() ? std::vector<std::uint64_t>{b.train.seed} : parse_list<std::uint64_t>(seeds);
    for (auto k : ks)
      for (const auto& e : es)
        for (auto s : ss) {
          TrainConfig c = b.train;
          c.batch_size = k;
          c.estimator = e;
          c.seed = s;
          c.dataset.seed = s;
          grid.push_back(c);
        }
  }
  const auto records = sweep(grid, f.workers);
  const fs::path out(out_dir);
  for (std::size_t i = 0; i < records.size(); ++i) write_record(records[i], out / fmt::format("run_{:03d}", i));
  const std::string summary = sweep_summary_csv(grid, records);
  write_text(out / "summary.csv", summary);
  if (f.json) {
    json runs = json::array();
    for (const auto& r : records) runs.push_back(run_summary(r));
    std::cout << json{{"command", "sweep"}, {"out", out_dir}, {"runs", runs}}.dump() << '\n';
  } else {
    std::cout << summary;
  }
  return kExitOk;
}

int cmd_diagnose(const CommonFlags& f, const std::vector<std::string>& files, std::size_t window,
                 std::size_t probe_matrices, double margin) {
  if (files.empty()) throw BadInput("diagnose: no record files given");
  std::vector<RunRecord> records;
  for (const auto& path : files) {
    try {
      records.push_back(read_record(path));
    } catch (const RecordParseError& e) {
      throw BadInput(fmt::format("{}: {}", path, e.what()));
    }
  }

  std::string series = "run,step,ess,beta,batch_mi_estimate\n";
  json runs = json::array();
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& rec = records[r];
    std::vector<double> mi;
    for (const auto& row : rec.rows) {
      series += fmt::format("{},{},{},{},{}\n", r, row.step, row.batch_mean_ess, row.beta, row.batch_mi_estimate);
      mi.push_back(row.batch_mi_estimate);
    }
    const std::size_t K = rec.header.k;
    std::optional<std::size_t> sat;
    if (K >= 2 && window >= 2) sat = saturation_index(mi, K, window);
    const std::size_t n = rec.rows.size();
    const std::size_t q = std::max<std::size_t>(1, n / 4);
    double first = 0.0, last = 0.0;
    if (n > 0) {
      for (std::size_t i = 0; i < q; ++i) first += rec.rows[i].batch_mean_ess;
      for (std::size_t i = n - q; i < n; ++i) last += rec.rows[i].batch_mean_ess;
      first /= static_cast<double>(q);
      last /= static_cast<double>(q);
    }
    runs.push_back({{"file", files[r]},
                    {"estimator", rec.header.estimator},
                    {"k", K},
                    {"rows", n},
                    {"saturation_step", sat ? json(rec.rows[*sat].step) : json(nullptr)},
                    {"ess_first_quarter", first},
                    {"ess_last_quarter", last},
                    {"ess_trend", last > first ? "rising" : (last < first ? "falling" : "flat")}});
  }

  // Precision probe on engineered saturated batches.
  const std::size_t K = f.k.value_or(128);
  Rng rng(f.seed.value_or(0), streams::eval);
  std::vector<double> naive, cancelled;
  std::size_t cancelled_wins = 0;
  double max_diff64 = 0.0;
  for (std::size_t m = 0; m < probe_matrices; ++m) {
    const auto rep = precision_probe(saturated_scores(K, margin, rng));
    naive.push_back(rep.median_rel_err_naive32);
    cancelled.push_back(rep.median_rel_err_cancelled32);
    cancelled_wins += rep.median_rel_err_cancelled32 < rep.median_rel_err_naive32;
    max_diff64 = std::max(max_diff64, rep.max_abs_diff64);
  }
  json probe = {{"k", K},
                {"matrices", probe_matrices},
                {"margin", margin},
                {"median_rel_err_naive32", detail::median(naive)},
                {"median_rel_err_cancelled32", detail::median(cancelled)},
                {"cancelled_better_fraction",
                 probe_matrices ? static_cast<double>(cancelled_wins) / static_cast<double>(probe_matrices) : 0.0},
                {"max_abs_diff64", max_diff64}};

  json doc = {{"command", "diagnose"}, {"runs", runs}, {"precision_probe", probe}};
  if (f.out) {
    const fs::path out(*f.out);
    write_text(out / "ess_series.csv", series);
    write_text(out / "diagnose.json", doc.dump(2) + "\n");
  }
  if (f.json) {
    std::cout << doc.dump() << '\n';
  } else {
    std::cout << series;
    for (const auto& r : runs) {
      std::cout << fmt::format("# {} ({}): saturation step {}, ESS {} -> {} ({})\n", r["file"].get<std::string>(),
                               r["estimator"].get<std::string>(), r["saturation_step"].dump(),
                               fmt_num(r["ess_first_quarter"].get<double>()),
                               fmt_num(r["ess_last_quarter"].get<double>()), r["ess_trend"].get<std::string>());
    }
    std::cout << fmt::format("# precision probe K={} margin={}: median rel. err naive32 {:.3e}, cancelled32 {:.3e}\n", K,
                             margin, probe["median_rel_err_naive32"].get<double>(),
                             probe["median_rel_err_cancelled32"].get<double>());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive mutual-information estimation: FlatNCE, InfoNCE and friends"};
  app.require_subcommand(1);

  CommonFlags f;
  std::size_t batches = 50;
  std::string checkpoint, dual_path;
  auto* estimate = app.add_subcommand("estimate", "Estimate MI with a frozen or oracle critic");
  add_common(estimate, f);
  estimate->add_option("--batches", batches, "Number of batches")->check(CLI::PositiveNumber);
  estimate->add_option("--checkpoint", checkpoint, "Critic checkpoint (default: exact density-ratio critic)");
  estimate->add_option("--dual", dual_path, "Dual critic checkpoint for flo (default: optimal u)");

  auto* train_cmd = app.add_subcommand("train", "Train a critic and write the run record");
  add_common(train_cmd, f);

  std::string k_list, estimators, seeds;
  auto* sweep_cmd = app.add_subcommand("sweep", "Train a grid of configs");
  add_common(sweep_cmd, f, true);
  sweep_cmd->add_option("--k-list", k_list, "Comma-separated batch sizes");
  sweep_cmd->add_option("--estimators", estimators, "Comma-separated estimator tags");
  sweep_cmd->add_option("--seeds", seeds, "Comma-separated seeds");

  std::vector<std::string> files;
  std::size_t window = 5, probe_matrices = 50;
  double margin = 12.0;
  auto* diagnose = app.add_subcommand("diagnose", "ESS curves, saturation and precision probe from records");
  add_common(diagnose, f);
  diagnose->add_option("records", files, "Run record JSONL files");
  diagnose->add_option("--window", window, "Saturation window (logged rows)");
  diagnose->add_option("--probe-matrices", probe_matrices, "Saturated matrices for the precision probe");
  diagnose->add_option("--margin", margin, "Diagonal dominance of probe matrices")->check(CLI::Range(8.0, 1e3));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*estimate) return cmd_estimate(f, batches, checkpoint, dual_path);
    if (*train_cmd) return cmd_train(f);
    if (*sweep_cmd) return cmd_sweep(f, k_list, estimators, seeds);
    if (*diagnose) return cmd_diagnose(f, files, window, probe_matrices, margin);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const BadInput& e) {
    std::cerr << "bad input: " << e.what() << '\n';
    return kExitBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitUsage;
}
