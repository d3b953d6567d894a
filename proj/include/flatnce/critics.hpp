#pragma once

// Parametric critics g(x, y) producing K×K score matrices, and the dual critic u(x, y)
// evaluated on positive pairs for the Fenchel-Legendre bound.
//
// Every forward pass is written once against a generic value type V, so the same code
// runs on plain matrices (evaluation) and on tape variables (training).

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "flatnce/autodiff.hpp"
#include "flatnce/matrix.hpp"
#include "flatnce/rng.hpp"

namespace flatnce {

enum class CriticKind { bilinear, separable, joint, dual_u };

inline std::string_view to_string(CriticKind k) {
  switch (k) {
    case CriticKind::bilinear: return "bilinear";
    case CriticKind::separable: return "separable";
    case CriticKind::joint: return "joint";
    case CriticKind::dual_u: return "dual-u";
  }
  return "?";
}

inline std::optional<CriticKind> parse_critic_kind(std::string_view s) {
  if (s == "bilinear") return CriticKind::bilinear;
  if (s == "separable") return CriticKind::separable;
  if (s == "joint") return CriticKind::joint;
  if (s == "dual-u" || s == "dual_u") return CriticKind::dual_u;
  return std::nullopt;
}

struct Parameter {
  std::string name;
  Matrix<double> value;

  friend bool operator==(const Parameter&, const Parameter&) = default;
};

struct CriticParams {
  CriticKind kind = CriticKind::separable;
  std::size_t x_dim = 1;
  std::size_t y_dim = 1;
  std::size_t embed_dim = 16;
  std::size_t hidden = 64;
  double beta = 1.0;  // inverse temperature; set externally, never trained
  bool normalize = false;
  std::vector<Parameter> params;

  const Matrix<double>& at(std::string_view name) const {
    for (const auto& p : params)
      if (p.name == name) return p.value;
    throw std::out_of_range("critic has no parameter named " + std::string(name));
  }
  Matrix<double>& at(std::string_view name) {
    return const_cast<Matrix<double>&>(std::as_const(*this).at(name));
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
  }

  void validate() const {
    if (!(beta > 0.0) || !std::isfinite(beta)) {
      throw std::invalid_argument("CriticParams: beta must be positive and finite");
    }
    for (const auto& p : params) {
      if (!p.value.all_finite()) {
        throw std::invalid_argument("CriticParams: non-finite entries in " + p.name);
      }
    }
  }

  friend bool operator==(const CriticParams&, const CriticParams&) = default;
};

namespace detail {

inline Matrix<double> glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix<double> w(fan_in, fan_out);
  for (auto& v : w.data()) v = rng.uniform(-a, a);
  return w;
}

inline void add_mlp(std::vector<Parameter>& out, const std::string& prefix, std::size_t in,
                    std::size_t hidden, std::size_t outdim, Rng& rng) {
  out.push_back({prefix + ".w0", glorot(in, hidden, rng)});
  out.push_back({prefix + ".b0", Matrix<double>(1, hidden)});
  out.push_back({prefix + ".w1", glorot(hidden, hidden, rng)});
  out.push_back({prefix + ".b1", Matrix<double>(1, hidden)});
  out.push_back({prefix + ".w2", glorot(hidden, outdim, rng)});
  out.push_back({prefix + ".b2", Matrix<double>(1, outdim)});
}

// Two ReLU hidden layers, linear output.
template <class V, class P>
V mlp(const V& in, P&& param, const std::string& prefix) {
  V h = relu(add_row(matmul(in, param(prefix + ".w0")), param(prefix + ".b0")));
  h = relu(add_row(matmul(h, param(prefix + ".w1")), param(prefix + ".b1")));
  return add_row(matmul(h, param(prefix + ".w2")), param(prefix + ".b2"));
}

inline Matrix<double> pair_rows(const Matrix<double>& xs, const Matrix<double>& ys,
                                std::size_t first_anchor, std::size_t anchors) {
  const std::size_t K = ys.rows(), dx = xs.cols(), dy = ys.cols();
  Matrix<double> pairs(anchors * K, dx + dy);
  for (std::size_t a = 0; a < anchors; ++a) {
    const auto x = xs.row(first_anchor + a);
    for (std::size_t j = 0; j < K; ++j) {
      auto r = pairs.row(a * K + j);
      std::copy(x.begin(), x.end(), r.begin());
      const auto y = ys.row(j);
      std::copy(y.begin(), y.end(), r.begin() + static_cast<std::ptrdiff_t>(dx));
    }
  }
  return pairs;
}

inline Matrix<double> positive_pairs(const Matrix<double>& xs, const Matrix<double>& ys) {
  const std::size_t K = xs.rows(), dx = xs.cols(), dy = ys.cols();
  Matrix<double> pairs(K, dx + dy);
  for (std::size_t i = 0; i < K; ++i) {
    auto r = pairs.row(i);
    std::copy(xs.row(i).begin(), xs.row(i).end(), r.begin());
    std::copy(ys.row(i).begin(), ys.row(i).end(), r.begin() + static_cast<std::ptrdiff_t>(dx));
  }
  return pairs;
}

inline void check_inputs(const CriticParams& p, const Matrix<double>& xs,
                         const Matrix<double>& ys) {
  if (xs.rows() != ys.rows()) {
    throw ShapeError(fmt::format("critic: {} anchors but {} candidates", xs.rows(), ys.rows()));
  }
  if (xs.rows() < 2) throw std::invalid_argument("critic: K must be >= 2 (no negatives)");
  if (xs.cols() != p.x_dim || ys.cols() != p.y_dim) {
    throw ShapeError(fmt::format("critic: expects x dim {} and y dim {}, got {} and {}",
                                 p.x_dim, p.y_dim, xs.cols(), ys.cols()));
  }
}

// Score graph for the bilinear and separable kinds; V is Matrix<double> or Var<double>.
template <class V, class P>
V embed_scores(const CriticParams& p, const V& X, const V& Y, P&& param) {
  if (p.kind == CriticKind::bilinear) {
    V ex = p.normalize ? row_l2_normalize(X) : X;
    V ey = p.normalize ? row_l2_normalize(Y) : Y;
    return scale(matmul(matmul(ex, param(std::string("W"))), transpose(ey)), p.beta);
  }
  V f = mlp(X, param, "f");
  V h = mlp(Y, param, "h");
  if (p.normalize) {
    f = row_l2_normalize(f);
    h = row_l2_normalize(h);
  }
  return scale(matmul(f, transpose(h)), p.beta);
}

}  // namespace detail

/// Fresh critic with Glorot-uniform weights and zero biases.
inline CriticParams make_critic(CriticKind kind, std::size_t x_dim, std::size_t y_dim,
                                std::size_t embed_dim, Rng& rng, double beta = 1.0,
                                bool normalize = false, std::size_t hidden = 64) {
  CriticParams c;
  c.kind = kind;
  c.x_dim = x_dim;
  c.y_dim = y_dim;
  c.embed_dim = kind == CriticKind::bilinear ? y_dim : embed_dim;
  c.hidden = hidden;
  c.beta = beta;
  c.normalize = normalize;
  switch (kind) {
    case CriticKind::bilinear:
      c.params.push_back({"W", detail::glorot(x_dim, y_dim, rng)});
      break;
    case CriticKind::separable:
      detail::add_mlp(c.params, "f", x_dim, hidden, embed_dim, rng);
      detail::add_mlp(c.params, "h", y_dim, hidden, embed_dim, rng);
      break;
    case CriticKind::joint:
      detail::add_mlp(c.params, "j", x_dim + y_dim, hidden, 1, rng);
      break;
    case CriticKind::dual_u:
      detail::add_mlp(c.params, "u", x_dim + y_dim, hidden, 1, rng);
      break;
  }
  c.validate();
  return c;
}

/// K×K scores g(x_i, y_j), value mode. Joint critics are evaluated in anchor blocks so
/// large evaluation batches never materialize all K² pair rows at once.
inline Matrix<double> score_batch(const CriticParams& p, const Matrix<double>& xs,
                                  const Matrix<double>& ys) {
  detail::check_inputs(p, xs, ys);
  auto param = [&](const std::string& name) -> const Matrix<double>& { return p.at(name); };
  switch (p.kind) {
    case CriticKind::bilinear:
    case CriticKind::separable:
      return detail::embed_scores(p, xs, ys, param);
    case CriticKind::joint: {
      const std::size_t K = xs.rows();
      const std::size_t block = std::max<std::size_t>(1, 65536 / K);
      Matrix<double> out(K, K);
      for (std::size_t a0 = 0; a0 < K; a0 += block) {
        const std::size_t n = std::min(block, K - a0);
        const Matrix<double> s = detail::mlp(detail::pair_rows(xs, ys, a0, n), param, "j");
        for (std::size_t k = 0; k < n * K; ++k) out[a0 * K + k] = p.beta * s[k];
      }
      return out;
    }
    case CriticKind::dual_u:
      throw std::invalid_argument("score_batch: dual-u critics only score positive pairs");
  }
  return {};
}

/// Critic parameters registered as leaves of a tape.
struct BoundCritic {
  const CriticParams* params = nullptr;
  std::vector<Var<double>> vars;

  Var<double> operator()(const std::string& name) const {
    for (std::size_t k = 0; k < params->params.size(); ++k)
      if (params->params[k].name == name) return vars[k];
    throw std::out_of_range("critic has no parameter named " + name);
  }

  std::vector<Matrix<double>> grads(const Tape<double>& tape) const {
    std::vector<Matrix<double>> g;
    g.reserve(vars.size());
    for (auto v : vars) g.push_back(tape.grad(v));
    return g;
  }
};

inline BoundCritic bind(Tape<double>& tape, const CriticParams& p) {
  BoundCritic b{&p, {}};
  b.vars.reserve(p.params.size());
  for (const auto& q : p.params) b.vars.push_back(tape.leaf(q.value));
  return b;
}

/// K×K score node on the tape.
inline Var<double> score_batch(Tape<double>& tape, const BoundCritic& critic,
                               const Matrix<double>& xs, const Matrix<double>& ys) {
  const CriticParams& p = *critic.params;
  detail::check_inputs(p, xs, ys);
  switch (p.kind) {
    case CriticKind::bilinear:
    case CriticKind::separable:
      return detail::embed_scores(p, tape.constant(xs), tape.constant(ys), critic);
    case CriticKind::joint: {
      const std::size_t K = xs.rows();
      Var<double> s = detail::mlp(tape.constant(detail::pair_rows(xs, ys, 0, K)), critic, "j");
      return scale(reshape(s, K, K), p.beta);
    }
    case CriticKind::dual_u:
      break;
  }
  throw std::invalid_argument("score_batch: dual-u critics only score positive pairs");
}

/// u(x_i, y_i) as a K×1 column, value mode.
inline Matrix<double> dual_score_batch(const CriticParams& p, const Matrix<double>& xs,
                                       const Matrix<double>& ys) {
  if (p.kind != CriticKind::dual_u) throw std::invalid_argument("dual_score_batch: not dual-u");
  detail::check_inputs(p, xs, ys);
  auto param = [&](const std::string& name) -> const Matrix<double>& { return p.at(name); };
  return detail::mlp(detail::positive_pairs(xs, ys), param, "u");
}

inline Var<double> dual_score_batch(Tape<double>& tape, const BoundCritic& critic,
                                    const Matrix<double>& xs, const Matrix<double>& ys) {
  const CriticParams& p = *critic.params;
  if (p.kind != CriticKind::dual_u) throw std::invalid_argument("dual_score_batch: not dual-u");
  detail::check_inputs(p, xs, ys);
  return detail::mlp(tape.constant(detail::positive_pairs(xs, ys)), critic, "u");
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON object with kind, dims, beta and a list of named arrays.

inline nlohmann::json to_json(const CriticParams& p) {
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& q : p.params) {
    arrays.push_back({{"name", q.name},
                      {"shape", {q.value.rows(), q.value.cols()}},
                      {"data", q.value.storage()}});
  }
  return {{"kind", to_string(p.kind)}, {"x_dim", p.x_dim},       {"y_dim", p.y_dim},
          {"embed_dim", p.embed_dim},  {"hidden", p.hidden},     {"beta", p.beta},
          {"normalize", p.normalize},  {"arrays", std::move(arrays)}};
}

inline CriticParams critic_from_json(const nlohmann::json& j) {
  CriticParams p;
  const auto kind = parse_critic_kind(j.at("kind").get<std::string>());
  if (!kind) throw std::invalid_argument("checkpoint: unknown critic kind");
  p.kind = *kind;
  p.x_dim = j.at("x_dim").get<std::size_t>();
  p.y_dim = j.at("y_dim").get<std::size_t>();
  p.embed_dim = j.at("embed_dim").get<std::size_t>();
  p.hidden = j.at("hidden").get<std::size_t>();
  p.beta = j.at("beta").get<double>();
  p.normalize = j.at("normalize").get<bool>();
  for (const auto& a : j.at("arrays")) {
    const auto shape = a.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw std::invalid_argument("checkpoint: arrays must be 2-d");
    p.params.push_back({a.at("name").get<std::string>(),
                        Matrix<double>(shape[0], shape[1], a.at("data").get<std::vector<double>>())});
  }
  p.validate();
  return p;
}

inline void save_checkpoint(const CriticParams& p, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << to_json(p).dump() << '\n';
}

inline CriticParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  return critic_from_json(nlohmann::json::parse(in));
}

}  // namespace flatnce
