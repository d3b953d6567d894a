#pragma once

// Contrastive and variational MI objectives as functions of a K×K score matrix whose
// diagonal holds the positive pairs. Each objective is written once as a generic graph
// over S = Matrix<T> (values only) or S = Var<T> (on a tape, differentiable).
//
// All losses are row means over the K anchors; MI is reported in nats.

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "flatnce/autodiff.hpp"
#include "flatnce/critics.hpp"
#include "flatnce/data.hpp"
#include "flatnce/matrix.hpp"
#include "flatnce/rng.hpp"

namespace flatnce {

enum class EstimatorTag { infonce, infonce_naive, flatnce, flatnce_plus, holder_flatnce, dv, nwj, flo };

struct EstimatorKind {
  EstimatorTag tag = EstimatorTag::flatnce;
  double gamma = 1.0;  // holder_flatnce only

  void validate() const {
    if (tag == EstimatorTag::holder_flatnce && (gamma == 0.0 || !std::isfinite(gamma))) {
      throw std::invalid_argument("holder_flatnce: gamma must be finite and nonzero");
    }
  }

  friend bool operator==(const EstimatorKind&, const EstimatorKind&) = default;
};

inline constexpr std::string_view kEstimatorTags =
    "infonce, infonce_naive, flatnce, flatnce_plus, holder_flatnce[:gamma], dv, nwj, flo";

inline std::string_view to_string(EstimatorTag t) {
  switch (t) {
    case EstimatorTag::infonce: return "infonce";
    case EstimatorTag::infonce_naive: return "infonce_naive";
    case EstimatorTag::flatnce: return "flatnce";
    case EstimatorTag::flatnce_plus: return "flatnce_plus";
    case EstimatorTag::holder_flatnce: return "holder_flatnce";
    case EstimatorTag::dv: return "dv";
    case EstimatorTag::nwj: return "nwj";
    case EstimatorTag::flo: return "flo";
  }
  return "?";
}

/// Parses "infonce", "holder_flatnce", "holder_flatnce:2.5", ... The holder exponent
/// defaults to `default_gamma` when not given inline.
inline std::optional<EstimatorKind> parse_estimator(std::string_view s, double default_gamma = 1.0) {
  std::string_view head = s;
  std::optional<double> gamma;
  if (auto colon = s.find(':'); colon != std::string_view::npos) {
    head = s.substr(0, colon);
    try {
      std::size_t used = 0;
      const std::string tail(s.substr(colon + 1));
      gamma = std::stod(tail, &used);
      if (used != tail.size()) return std::nullopt;
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }
  for (auto t : {EstimatorTag::infonce, EstimatorTag::infonce_naive, EstimatorTag::flatnce,
                 EstimatorTag::flatnce_plus, EstimatorTag::holder_flatnce, EstimatorTag::dv,
                 EstimatorTag::nwj, EstimatorTag::flo}) {
    if (head == to_string(t)) {
      if (gamma && t != EstimatorTag::holder_flatnce) return std::nullopt;
      EstimatorKind k{t, gamma.value_or(t == EstimatorTag::holder_flatnce ? default_gamma : 1.0)};
      if (t == EstimatorTag::holder_flatnce && k.gamma == 0.0) return std::nullopt;
      return k;
    }
  }
  return std::nullopt;
}

inline std::string to_string(const EstimatorKind& k) {
  if (k.tag == EstimatorTag::holder_flatnce) return fmt::format("holder_flatnce:{}", k.gamma);
  return std::string(to_string(k.tag));
}

template <class T>
struct EstimatorOutput {
  T loss = 0;
  T mi_estimate = 0;
  Matrix<T> row_weights;  // K×K (pool includes the positive) or K×(K−1) (negatives only)
  std::vector<T> row_ess;

  T mean_ess() const {
    if (row_ess.empty()) return T(0);
    return std::accumulate(row_ess.begin(), row_ess.end(), T(0)) / static_cast<T>(row_ess.size());
  }
};

/// An objective built on a tape: the differentiable loss node plus its values.
template <class T>
struct TapeEstimate {
  Var<T> loss;
  EstimatorOutput<T> out;
};

// ---------------------------------------------------------------------------
// Importance weights. Softmax over row i of the contrasts Δ_ij = g_ij − g_ii, either
// over the full pool (positive included, the InfoNCE classifier) or over the
// negatives j != i only (the FlatNCE gradient weights), after scaling by `gamma`.

template <class T>
Matrix<T> pool_weights(const Matrix<T>& scores) {
  const std::size_t K = scores.rows();
  Matrix<T> w(K, K);
  for (std::size_t i = 0; i < K; ++i) {
    const auto r = scores.row(i);
    const T m = detail::row_max(r, K);
    T z = 0;
    for (std::size_t j = 0; j < K; ++j) z += (w(i, j) = std::exp(r[j] - m));
    for (std::size_t j = 0; j < K; ++j) w(i, j) /= z;
  }
  return w;
}

template <class T>
Matrix<T> negative_weights(const Matrix<T>& scores, T gamma = T(1)) {
  const std::size_t K = scores.rows();
  Matrix<T> w(K, K - 1);
  std::vector<T> a(K - 1);
  for (std::size_t i = 0; i < K; ++i) {
    const auto r = scores.row(i);
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0, c = 0; j < K; ++j) {
      if (j == i) continue;
      a[c] = gamma * (r[j] - r[i]);
      m = std::max(m, a[c++]);
    }
    T z = 0;
    for (std::size_t c = 0; c < K - 1; ++c) z += (w(i, c) = std::exp(a[c] - m));
    for (std::size_t c = 0; c < K - 1; ++c) w(i, c) /= z;
  }
  return w;
}

/// Normalized effective sample size of each weight row, 1 / (n Σ w²).
template <class T>
std::vector<T> row_ess_of(const Matrix<T>& w) {
  std::vector<T> out(w.rows());
  const T n = static_cast<T>(w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    T ss = 0;
    for (T v : w.row(i)) ss += v * v;
    out[i] = std::clamp(T(1) / (n * ss), T(1) / n, T(1));
  }
  return out;
}

namespace detail {

template <class T>
const Matrix<T>& value_of(const Matrix<T>& m) {
  return m;
}
template <class T>
const Matrix<T>& value_of(const Var<T>& v) {
  return v.value();
}

template <class T>
Matrix<T> lift(const Matrix<T>&, Matrix<T> c) {
  return c;
}
template <class T>
Var<T> lift(const Var<T>& like, Matrix<T> c) {
  return like.tape->constant(std::move(c));
}

template <class T>
std::size_t check_scores(const Matrix<T>& s) {
  if (s.rows() != s.cols()) throw ShapeError("score matrix must be square, got " + shape_str(s));
  if (s.rows() < 2) throw std::invalid_argument("score matrix needs K >= 2 (no negatives)");
  return s.rows();
}

template <class S>
struct Objective {
  S loss;
  S mi;
};

// exp(c − detach(c)): value 1, gradient that of c.
template <class S>
S self_normalized(const S& c) {
  return exp(sub(c, detach(c)));
}

template <class S>
Objective<S> infonce_graph(const S& s, bool cancel) {
  using T = typename std::remove_cvref_t<decltype(value_of(s))>::value_type;
  const std::size_t K = check_scores(value_of(s));
  // Cancelled form contrasts against g_ii before the logsumexp; the naive form is the
  // platform cross-entropy, logsumexp over raw scores minus the positive score.
  S ce = cancel ? logsumexp_row(subtract_diagonal(s)) : sub(logsumexp_row(s), diag(s));
  S loss = mean(ce);
  return {loss, add_scalar(scale(loss, T(-1)), std::log(static_cast<T>(K)))};
}

template <class S>
Objective<S> flatnce_graph(const S& s) {
  using T = typename std::remove_cvref_t<decltype(value_of(s))>::value_type;
  const std::size_t K = check_scores(value_of(s));
  S c = logsumexp_row_offdiag(subtract_diagonal(s));
  return {mean(self_normalized(c)),
          add_scalar(scale(mean(c), T(-1)), std::log(static_cast<T>(K - 1)))};
}

template <class S>
Objective<S> flatnce_plus_graph(const S& s) {
  using T = typename std::remove_cvref_t<decltype(value_of(s))>::value_type;
  const std::size_t K = check_scores(value_of(s));
  S c = logsumexp_row(subtract_diagonal(s));  // the zero contrast of the positive is in the pool
  return {mean(self_normalized(c)),
          add_scalar(scale(mean(c), T(-1)), std::log(static_cast<T>(K)))};
}

template <class S>
Objective<S> holder_graph(const S& s, double gamma) {
  using T = typename std::remove_cvref_t<decltype(value_of(s))>::value_type;
  const std::size_t K = check_scores(value_of(s));
  if (gamma == 0.0) throw std::invalid_argument("holder_flatnce: gamma must be nonzero");
  const T g = static_cast<T>(gamma);
  // log m_γ = (1/γ)·logsumexp_{j≠i}(γΔ_ij) − (1/γ)·log(K−1)
  S log_m = add_scalar(scale(logsumexp_row_offdiag(scale(subtract_diagonal(s), g)), T(1) / g),
                       -std::log(static_cast<T>(K - 1)) / g);
  return {mean(self_normalized(log_m)), scale(mean(log_m), T(-1))};
}

template <class S>
Objective<S> dv_graph(const S& s) {
  using T = typename std::remove_cvref_t<decltype(value_of(s))>::value_type;
  const std::size_t K = check_scores(value_of(s));
  // log of the mean of exp(g_ij) over all K(K−1) off-diagonal pairs.
  S log_mean = add_scalar(logsumexp_row(transpose(logsumexp_row_offdiag(s))),
                          -std::log(static_cast<T>(K * (K - 1))));
  S mi = sub(mean(diag(s)), log_mean);
  return {scale(mi, T(-1)), mi};
}

template <class S>
Objective<S> nwj_graph(const S& s) {
  using T = typename std::remove_cvref_t<decltype(value_of(s))>::value_type;
  const std::size_t K = check_scores(value_of(s));
  Matrix<T> mask(K, K, T(1));
  for (std::size_t i = 0; i < K; ++i) mask(i, i) = T(0);
  S off = scale(sum(mul(exp(add_scalar(s, T(-1))), lift(s, std::move(mask)))),
                T(1) / static_cast<T>(K * (K - 1)));
  S mi = sub(mean(diag(s)), off);
  return {scale(mi, T(-1)), mi};
}

// Per-row log of the mean of exp(Δ_ij) over the K−1 negatives; the optimal dual value.
template <class S>
S flo_optimal_u(const S& s) {
  using T = typename std::remove_cvref_t<decltype(value_of(s))>::value_type;
  const std::size_t K = check_scores(value_of(s));
  return add_scalar(logsumexp_row_offdiag(subtract_diagonal(s)),
                    -std::log(static_cast<T>(K - 1)));
}

template <class S>
Objective<S> flo_graph(const S& s, const S& u) {
  using T = typename std::remove_cvref_t<decltype(value_of(s))>::value_type;
  const std::size_t K = check_scores(value_of(s));
  const auto& uv = value_of(u);
  if (uv.rows() != K || uv.cols() != 1) {
    throw ShapeError(fmt::format("flo: u must be {}x1, got {}", K, shape_str(uv)));
  }
  if (!uv.all_finite()) throw std::invalid_argument("flo: u must be finite");
  // u_i + e^{−u_i}·mean_{j≠i} e^{Δ_ij}, with the product formed in log space.
  S term = add(u, exp(sub(flo_optimal_u(s), u)));
  S mi = add_scalar(scale(mean(term), T(-1)), T(1));
  return {scale(mi, T(-1)), mi};
}

template <class T>
EstimatorOutput<T> finish(const Objective<Matrix<T>>& o, Matrix<T> weights, bool with_weights) {
  EstimatorOutput<T> out;
  out.loss = o.loss.item();
  out.mi_estimate = o.mi.item();
  if (with_weights) {
    out.row_ess = row_ess_of(weights);
    out.row_weights = std::move(weights);
  }
  return out;
}

template <class T>
TapeEstimate<T> finish(const Objective<Var<T>>& o, Matrix<T> weights) {
  TapeEstimate<T> r{o.loss, {}};
  r.out.loss = o.loss.value().item();
  r.out.mi_estimate = o.mi.value().item();
  r.out.row_ess = row_ess_of(weights);
  r.out.row_weights = std::move(weights);
  return r;
}

template <class T>
Matrix<T> weights_for(const EstimatorKind& k, const Matrix<T>& s) {
  switch (k.tag) {
    case EstimatorTag::infonce:
    case EstimatorTag::infonce_naive:
    case EstimatorTag::flatnce_plus:
      return pool_weights(s);
    case EstimatorTag::holder_flatnce:
      return negative_weights(s, static_cast<T>(k.gamma));
    default:
      return negative_weights(s);
  }
}

template <class S>
Objective<S> objective(const EstimatorKind& k, const S& s, const S* u) {
  k.validate();
  switch (k.tag) {
    case EstimatorTag::infonce: return infonce_graph(s, true);
    case EstimatorTag::infonce_naive: return infonce_graph(s, false);
    case EstimatorTag::flatnce: return flatnce_graph(s);
    case EstimatorTag::flatnce_plus: return flatnce_plus_graph(s);
    case EstimatorTag::holder_flatnce: return holder_graph(s, k.gamma);
    case EstimatorTag::dv: return dv_graph(s);
    case EstimatorTag::nwj: return nwj_graph(s);
    case EstimatorTag::flo:
      if (u == nullptr) throw std::invalid_argument("flo: requires dual scores u");
      return flo_graph(s, *u);
  }
  throw std::invalid_argument("unknown estimator");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dispatch.

template <class T>
EstimatorOutput<T> estimate(const EstimatorKind& kind, const Matrix<T>& scores,
                            const Matrix<T>* u = nullptr, bool with_weights = true) {
  auto o = detail::objective(kind, scores, u);
  return detail::finish(o, with_weights ? detail::weights_for(kind, scores) : Matrix<T>(),
                        with_weights);
}

template <class T>
TapeEstimate<T> estimate(const EstimatorKind& kind, Var<T> scores,
                         std::optional<Var<T>> u = std::nullopt) {
  auto o = detail::objective(kind, scores, u ? &*u : nullptr);
  return detail::finish(o, detail::weights_for(kind, scores.value()));
}

// Named entry points.

template <class T>
EstimatorOutput<T> infonce(const Matrix<T>& s) { return estimate({EstimatorTag::infonce}, s); }
template <class T>
TapeEstimate<T> infonce(Var<T> s) { return estimate<T>({EstimatorTag::infonce}, s); }

/// Same formula as infonce without the explicit cancellation of g_ii.
template <class T>
EstimatorOutput<T> infonce_naive(const Matrix<T>& s) {
  return estimate({EstimatorTag::infonce_naive}, s);
}
template <class T>
TapeEstimate<T> infonce_naive(Var<T> s) { return estimate<T>({EstimatorTag::infonce_naive}, s); }

template <class T>
EstimatorOutput<T> flatnce(const Matrix<T>& s) { return estimate({EstimatorTag::flatnce}, s); }
template <class T>
TapeEstimate<T> flatnce(Var<T> s) { return estimate<T>({EstimatorTag::flatnce}, s); }

template <class T>
EstimatorOutput<T> flatnce_plus(const Matrix<T>& s) {
  return estimate({EstimatorTag::flatnce_plus}, s);
}
template <class T>
TapeEstimate<T> flatnce_plus(Var<T> s) { return estimate<T>({EstimatorTag::flatnce_plus}, s); }

template <class T>
EstimatorOutput<T> holder_flatnce(const Matrix<T>& s, double gamma) {
  return estimate({EstimatorTag::holder_flatnce, gamma}, s);
}
template <class T>
TapeEstimate<T> holder_flatnce(Var<T> s, double gamma) {
  return estimate<T>({EstimatorTag::holder_flatnce, gamma}, s);
}

template <class T>
EstimatorOutput<T> dv(const Matrix<T>& s) { return estimate({EstimatorTag::dv}, s); }
template <class T>
TapeEstimate<T> dv(Var<T> s) { return estimate<T>({EstimatorTag::dv}, s); }

template <class T>
EstimatorOutput<T> nwj(const Matrix<T>& s) { return estimate({EstimatorTag::nwj}, s); }
template <class T>
TapeEstimate<T> nwj(Var<T> s) { return estimate<T>({EstimatorTag::nwj}, s); }

template <class T>
EstimatorOutput<T> flo(const Matrix<T>& s, const Matrix<T>& u) {
  return estimate({EstimatorTag::flo}, s, &u);
}
template <class T>
TapeEstimate<T> flo(Var<T> s, Var<T> u) { return estimate<T>({EstimatorTag::flo}, s, u); }

/// Closed-form optimal dual value u_i = log((1/(K−1)) Σ_{j≠i} exp(g_ij − g_ii)).
template <class T>
Matrix<T> flo_optimal_u(const Matrix<T>& s) {
  return detail::flo_optimal_u(s);
}

/// InfoNCE estimate only (no weights), for large evaluation batches.
template <class T>
T infonce_mi(const Matrix<T>& s) {
  return estimate({EstimatorTag::infonce}, s, static_cast<const Matrix<T>*>(nullptr), false)
      .mi_estimate;
}

// ---------------------------------------------------------------------------
// Batch-averaged estimation.

struct MiSummary {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::vector<double> per_batch;
};

inline MiSummary summarize(std::vector<double> values) {
  MiSummary s;
  const double n = static_cast<double>(values.size());
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stderr_ = std::sqrt(ss / (n - 1.0) / n);
  }
  s.per_batch = std::move(values);
  return s;
}

using ScoreFn = std::function<Matrix<double>(const Matrix<double>&, const Matrix<double>&)>;
using DualFn = std::function<Matrix<double>(const Matrix<double>&, const Matrix<double>&)>;

/// Mean ± standard error of an estimator over `batches` fresh batches of size K. For flo
/// without a dual critic the closed-form optimal u is used.
inline MiSummary estimate_batches(const ScoreFn& score, const EstimatorKind& kind,
                                  const DatasetSpec& spec, std::size_t K, std::size_t batches,
                                  Rng& rng, const DualFn& dual = {}) {
  std::vector<double> vals;
  vals.reserve(batches);
  for (std::size_t b = 0; b < batches; ++b) {
    const Batch batch = sample_batch(spec, K, rng);
    const Matrix<double> s = score(batch.xs, batch.ys);
    if (kind.tag == EstimatorTag::flo) {
      const Matrix<double> u = dual ? dual(batch.xs, batch.ys) : flo_optimal_u(s);
      vals.push_back(estimate(kind, s, &u, false).mi_estimate);
    } else {
      vals.push_back(estimate(kind, s, static_cast<const Matrix<double>*>(nullptr), false)
                         .mi_estimate);
    }
  }
  return summarize(std::move(vals));
}

/// InfoNCE with a large negative pool under a frozen critic, averaged over batches.
inline MiSummary evaluate_large_k(const ScoreFn& score, const DatasetSpec& spec,
                                  std::size_t k_eval, Rng& rng, std::size_t batches = 1) {
  if (k_eval < 2) throw std::invalid_argument("evaluate_large_k: K_eval must be >= 2");
  if (batches < 1) throw std::invalid_argument("evaluate_large_k: need at least one batch");
  return estimate_batches(score, {EstimatorTag::infonce}, spec, k_eval, batches, rng);
}

inline double evaluate_large_k(const CriticParams& critic, const DatasetSpec& spec,
                               std::size_t k_eval, Rng& rng, std::size_t batches = 1) {
  return evaluate_large_k(
             [&](const Matrix<double>& x, const Matrix<double>& y) {
               return score_batch(critic, x, y);
             },
             spec, k_eval, rng, batches)
      .mean;
}

}  // namespace flatnce
