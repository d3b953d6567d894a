#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "flatnce/critics.hpp"
#include "flatnce/matrix.hpp"

namespace flatnce {

enum class OptimizerKind { sgd, adam };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

inline std::optional<OptimizerKind> parse_optimizer_kind(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  return std::nullopt;
}

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 5e-4;
  double momentum = 0.0;  // sgd
  double beta1 = 0.9;     // adam
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("optimizer: lr must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("optimizer: momentum in [0, 1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw std::invalid_argument("optimizer: adam betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw std::invalid_argument("optimizer: eps must be positive");
  }

  friend bool operator==(const OptimizerSpec&, const OptimizerSpec&) = default;
};

/// Per-parameter moment buffers (velocity for sgd, m and v for adam) and the step count.
struct OptimizerState {
  std::vector<Matrix<double>> first;
  std::vector<Matrix<double>> second;
  long step = 0;
};

class NonFiniteGradient : public std::domain_error {
 public:
  NonFiniteGradient(const std::string& name)
      : std::domain_error("non-finite gradient for parameter " + name), parameter(name) {}
  std::string parameter;
};

/// θ ← update(θ, ∇). sgd: v ← μv + g, θ ← θ − lr·v. adam: bias-corrected moments.
inline void optimizer_step(std::vector<Parameter>& params, const std::vector<Matrix<double>>& grads,
                           OptimizerState& state, const OptimizerSpec& spec) {
  if (params.size() != grads.size()) {
    throw ShapeError(fmt::format("optimizer_step: {} parameters but {} gradients", params.size(),
                                 grads.size()));
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params[p].value.same_shape(grads[p])) {
      throw ShapeError(fmt::format("optimizer_step: {} has shape {} but gradient is {}",
                                   params[p].name, shape_str(params[p].value), shape_str(grads[p])));
    }
    if (!grads[p].all_finite()) throw NonFiniteGradient(params[p].name);
  }
  if (state.first.size() != params.size()) {
    state.first.clear();
    state.second.clear();
    for (const auto& p : params) {
      state.first.emplace_back(p.value.rows(), p.value.cols());
      state.second.emplace_back(p.value.rows(), p.value.cols());
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& theta = params[p].value;
    const auto& g = grads[p];
    auto& m = state.first[p];
    auto& v = state.second[p];
    if (spec.kind == OptimizerKind::sgd) {
      for (std::size_t k = 0; k < theta.size(); ++k) {
        m[k] = spec.momentum * m[k] + g[k];
        theta[k] -= spec.lr * m[k];
      }
    } else {
      const double c1 = 1.0 - std::pow(spec.beta1, t);
      const double c2 = 1.0 - std::pow(spec.beta2, t);
      for (std::size_t k = 0; k < theta.size(); ++k) {
        m[k] = spec.beta1 * m[k] + (1.0 - spec.beta1) * g[k];
        v[k] = spec.beta2 * v[k] + (1.0 - spec.beta2) * g[k] * g[k];
        theta[k] -= spec.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + spec.eps);
      }
    }
  }
}

}  // namespace flatnce
