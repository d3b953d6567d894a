#pragma once

// Importance-weight diagnostics: effective sample size, the ESS-targeting temperature
// controller, saturation detection and the low-precision gradient probe.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "flatnce/autodiff.hpp"
#include "flatnce/estimators.hpp"
#include "flatnce/matrix.hpp"

namespace flatnce {

/// 1 / (K Σ w_j²) for a simplex vector of length K.
inline double ess(std::span<const double> weights) {
  if (weights.empty()) throw std::invalid_argument("ess: empty weight vector");
  double total = 0.0, ss = 0.0;
  for (double w : weights) {
    if (w < 0.0 || !std::isfinite(w)) {
      throw std::invalid_argument(fmt::format("ess: invalid weight {}", w));
    }
    total += w;
    ss += w * w;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument(fmt::format("ess: weights sum to {}, not 1", total));
  }
  const double K = static_cast<double>(weights.size());
  const double e = 1.0 / (K * ss);
  // clamp only absorbs roundoff
  return std::clamp(e, 1.0 / K, 1.0);
}

struct EssReport {
  Matrix<double> weights;
  std::vector<double> row_ess;
  double mean_ess = 0.0;
  double beta = 1.0;
};

/// Negative-only softmax weights of the contrasts (the FlatNCE gradient weights) and
/// their ESS. `scores` already include the inverse temperature `beta`.
inline EssReport ess_report(const Matrix<double>& scores, double beta) {
  EssReport r;
  r.weights = negative_weights(scores);
  r.row_ess.reserve(r.weights.rows());
  for (std::size_t i = 0; i < r.weights.rows(); ++i) r.row_ess.push_back(ess(r.weights.row(i)));
  double s = 0.0;
  for (double e : r.row_ess) s += e;
  r.mean_ess = s / static_cast<double>(r.row_ess.size());
  r.beta = beta;
  return r;
}

// ---------------------------------------------------------------------------
// ESS scheduling.

enum class SchedulerMode {
  alg_s1_verbatim,    // ESS > target ⇒ β ← (1−γ)β, else β ← (1+γ)β
  negative_feedback,  // ESS > target ⇒ β ← (1+γ)β, else β ← (1−γ)β
};

inline std::string_view to_string(SchedulerMode m) {
  return m == SchedulerMode::alg_s1_verbatim ? "alg-s1-verbatim" : "negative-feedback";
}

inline std::optional<SchedulerMode> parse_scheduler_mode(std::string_view s) {
  if (s == "alg-s1-verbatim" || s == "alg_s1_verbatim") return SchedulerMode::alg_s1_verbatim;
  if (s == "negative-feedback" || s == "negative_feedback") return SchedulerMode::negative_feedback;
  return std::nullopt;
}

inline constexpr double kBetaFloor = 1e-3;
inline constexpr double kBetaCeiling = 1e3;

struct SchedulerState {
  double beta = 1.0;
  // ESS target ρ_t, linear from target_start (t = 1) to target_end (t = horizon).
  double target_start = 0.25;
  double target_end = 0.25;
  long horizon = 1;
  double rate = 0.01;
  SchedulerMode mode = SchedulerMode::alg_s1_verbatim;

  double target(long t) const {
    if (horizon <= 1) return target_end;
    const double f = std::clamp(static_cast<double>(t - 1) / static_cast<double>(horizon - 1), 0.0, 1.0);
    return target_start + f * (target_end - target_start);
  }

  void validate() const {
    if (!(beta > 0.0)) throw std::invalid_argument("SchedulerState: beta must be positive");
    if (!(rate > 0.0 && rate < 1.0)) {
      throw std::invalid_argument("SchedulerState: adaptation rate must lie in (0, 1)");
    }
    for (double r : {target_start, target_end}) {
      if (!(r > 0.0 && r <= 1.0)) throw std::invalid_argument("SchedulerState: target must be in (0, 1]");
    }
  }

  friend bool operator==(const SchedulerState&, const SchedulerState&) = default;
};

/// One controller update after observing the batch ESS at step t.
inline SchedulerState step_scheduler(SchedulerState s, double observed_ess, long t) {
  const bool above = observed_ess > s.target(t);
  const bool raise = s.mode == SchedulerMode::alg_s1_verbatim ? !above : above;
  s.beta *= raise ? (1.0 + s.rate) : (1.0 - s.rate);
  s.beta = std::clamp(s.beta, kBetaFloor, kBetaCeiling);
  return s;
}

// ---------------------------------------------------------------------------
// Saturation.

inline constexpr double kSaturationSlack = 0.05;

/// Mean of the last `window` entries exceeds log K − slack.
inline bool detect_saturation(std::span<const double> history, std::size_t K, std::size_t window,
                              double slack = kSaturationSlack) {
  if (window < 2) throw std::invalid_argument("detect_saturation: window must be >= 2");
  if (history.size() < window) return false;
  double s = 0.0;
  for (double v : history.subspan(history.size() - window)) s += v;
  return s / static_cast<double>(window) > std::log(static_cast<double>(K)) - slack;
}

/// First index i at which detect_saturation(history[0..i]) becomes true.
inline std::optional<std::size_t> saturation_index(std::span<const double> history, std::size_t K,
                                                   std::size_t window,
                                                   double slack = kSaturationSlack) {
  for (std::size_t i = window; i <= history.size(); ++i) {
    if (detect_saturation(history.first(i), K, window, slack)) return i - 1;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Precision probe.

inline constexpr double kProbeMinMargin = 8.0;

struct PrecisionProbeReport {
  Matrix<double> grad_naive32;
  Matrix<double> grad_cancelled32;
  Matrix<double> grad_reference64;
  Matrix<double> grad_naive64;
  Matrix<double> rel_err_naive32;
  Matrix<double> rel_err_cancelled32;
  double median_rel_err_naive32 = 0.0;
  double median_rel_err_cancelled32 = 0.0;
  double max_abs_diff64 = 0.0;  // naive vs cancelled, both 64-bit
};

/// Smallest g_ii − max_{j≠i} g_ij over the rows.
inline double dominance_margin(const Matrix<double>& s) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < s.rows(); ++i) m = std::min(m, s(i, i) - detail::row_max(s.row(i), i));
  return m;
}

namespace detail {

template <class T>
Matrix<double> infonce_score_grad(const Matrix<double>& scores, bool cancel) {
  Tape<T> tape;
  auto s = tape.leaf(scores.cast<T>());
  auto est = estimate<T>({cancel ? EstimatorTag::infonce : EstimatorTag::infonce_naive}, s);
  tape.backward(est.loss);
  return tape.grad(s).template cast<double>();
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

inline Matrix<double> relative_error(const Matrix<double>& a, const Matrix<double>& ref) {
  Matrix<double> e(a.rows(), a.cols());
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double denom = std::max(std::abs(ref[k]), std::numeric_limits<double>::min());
    e[k] = std::abs(a[k] - ref[k]) / denom;
  }
  return e;
}

}  // namespace detail

/// InfoNCE score-gradient three ways on a saturated batch: naive 32-bit cross-entropy,
/// cancelled-form 32-bit, and a 64-bit reference. All three start from the same
/// 32-bit-rounded scores, so the differences come from arithmetic alone.
inline PrecisionProbeReport precision_probe(const Matrix<double>& scores) {
  detail::check_scores(scores);
  const double margin = dominance_margin(scores);
  if (!(margin >= kProbeMinMargin)) {
    throw std::invalid_argument(fmt::format(
        "precision_probe: diagonal dominance {} is below the required {}", margin, kProbeMinMargin));
  }
  const Matrix<double> rounded = scores.cast<float>().cast<double>();
  PrecisionProbeReport r;
  r.grad_naive32 = detail::infonce_score_grad<float>(rounded, false);
  r.grad_cancelled32 = detail::infonce_score_grad<float>(rounded, true);
  r.grad_reference64 = detail::infonce_score_grad<double>(rounded, true);
  r.grad_naive64 = detail::infonce_score_grad<double>(rounded, false);
  r.rel_err_naive32 = detail::relative_error(r.grad_naive32, r.grad_reference64);
  r.rel_err_cancelled32 = detail::relative_error(r.grad_cancelled32, r.grad_reference64);
  r.median_rel_err_naive32 = detail::median(r.rel_err_naive32.storage());
  r.median_rel_err_cancelled32 = detail::median(r.rel_err_cancelled32.storage());
  r.max_abs_diff64 = max_abs(sub(r.grad_naive64, r.grad_reference64));
  return r;
}

/// A saturated score matrix: per-row baseline in [base_lo, base_hi], negatives spread
/// below it, positive at least `margin` above every negative.
inline Matrix<double> saturated_scores(std::size_t K, double margin, Rng& rng,
                                       double base_lo = 20.0, double base_hi = 60.0) {
  Matrix<double> s(K, K);
  for (std::size_t i = 0; i < K; ++i) {
    const double base = rng.uniform(base_lo, base_hi);
    for (std::size_t j = 0; j < K; ++j) s(i, j) = base - rng.uniform(0.0, 3.0);
    s(i, i) = base + margin + rng.uniform(0.0, 1.0);
  }
  return s;
}

}  // namespace flatnce
