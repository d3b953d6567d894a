#pragma once

// Synthetic joint distributions with closed-form mutual information.

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "flatnce/matrix.hpp"
#include "flatnce/rng.hpp"

namespace flatnce {

enum class DatasetKind { correlated_gaussian, cubic_gaussian, shared_latent_views };

inline std::string_view to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::correlated_gaussian: return "correlated_gaussian";
    case DatasetKind::cubic_gaussian: return "cubic_gaussian";
    case DatasetKind::shared_latent_views: return "shared_latent_views";
  }
  return "?";
}

inline std::optional<DatasetKind> parse_dataset_kind(std::string_view s) {
  if (s == "correlated_gaussian") return DatasetKind::correlated_gaussian;
  if (s == "cubic_gaussian") return DatasetKind::cubic_gaussian;
  if (s == "shared_latent_views") return DatasetKind::shared_latent_views;
  return std::nullopt;
}

struct DatasetSpec {
  DatasetKind kind = DatasetKind::correlated_gaussian;
  std::size_t dim = 1;
  double rho = 0.5;    // per-dimension correlation (gaussian kinds)
  double sigma = 1.0;  // view noise scale (shared_latent_views)
  std::uint64_t seed = 0;

  void validate() const {
    if (dim < 1) throw std::invalid_argument("DatasetSpec: dim must be >= 1");
    if (!(std::abs(rho) < 1.0)) throw std::invalid_argument("DatasetSpec: |rho| must be < 1");
    if (kind == DatasetKind::shared_latent_views && !(sigma > 0.0)) {
      throw std::invalid_argument("DatasetSpec: sigma must be positive");
    }
  }

  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

/// Per-dimension correlation that gives `mi` nats in total over `dim` dimensions.
inline double rho_for_mi(double mi, std::size_t dim) {
  if (mi < 0.0 || dim == 0) throw std::invalid_argument("rho_for_mi: need mi >= 0, dim >= 1");
  return std::sqrt(-std::expm1(-2.0 * mi / static_cast<double>(dim)));
}

/// MI of a bivariate Gaussian from its covariance: ½ ln(Vx Vy / det Σ).
inline double gaussian_pair_mi(double var_x, double var_y, double cov) {
  return 0.5 * std::log(var_x * var_y / (var_x * var_y - cov * cov));
}

inline double true_mi(const DatasetSpec& spec) {
  spec.validate();
  const double d = static_cast<double>(spec.dim);
  switch (spec.kind) {
    case DatasetKind::correlated_gaussian:
    case DatasetKind::cubic_gaussian:
      // y -> y^3 is invertible, so MI is unchanged.
      return -0.5 * d * std::log1p(-spec.rho * spec.rho);
    case DatasetKind::shared_latent_views: {
      const double v = 1.0 + spec.sigma * spec.sigma;
      return d * gaussian_pair_mi(v, v, 1.0);
    }
  }
  return 0.0;
}

struct Batch {
  Matrix<double> xs;
  Matrix<double> ys;
  std::size_t size() const noexcept { return xs.rows(); }
};

/// K i.i.d. joint draws; row i of xs and ys is a positive pair, every (i, j != i) a
/// draw from the product of marginals.
inline Batch sample_batch(const DatasetSpec& spec, std::size_t K, Rng& rng) {
  if (K < 2) throw std::invalid_argument("sample_batch: K must be >= 2");
  spec.validate();
  Batch b{Matrix<double>(K, spec.dim), Matrix<double>(K, spec.dim)};
  const double rho = spec.rho;
  const double tail = std::sqrt(1.0 - rho * rho);
  for (std::size_t i = 0; i < K; ++i) {
    for (std::size_t k = 0; k < spec.dim; ++k) {
      switch (spec.kind) {
        case DatasetKind::correlated_gaussian:
        case DatasetKind::cubic_gaussian: {
          const double e1 = rng.normal();
          const double e2 = rng.normal();
          const double y = rho * e1 + tail * e2;
          b.xs(i, k) = e1;
          b.ys(i, k) = spec.kind == DatasetKind::cubic_gaussian ? y * y * y : y;
          break;
        }
        case DatasetKind::shared_latent_views: {
          const double z = rng.normal();
          b.xs(i, k) = z + spec.sigma * rng.normal();
          b.ys(i, k) = z + spec.sigma * rng.normal();
          break;
        }
      }
    }
  }
  return b;
}

/// Draw `index` of the dataset's own seeded stream; identical inputs give identical bytes.
inline Batch sample_batch_at(const DatasetSpec& spec, std::size_t K, std::uint64_t index) {
  Rng rng(spec.seed, index);
  return sample_batch(spec, K, rng);
}

/// Exact log density ratio g*(x, y) = log p(y|x) − log p(y) for the Gaussian kinds.
/// shared_latent_views is standardized to unit variance first (the ratio is invariant).
class DensityRatioCritic {
 public:
  explicit DensityRatioCritic(const DatasetSpec& spec) {
    spec.validate();
    switch (spec.kind) {
      case DatasetKind::correlated_gaussian:
        rho_ = spec.rho;
        scale_ = 1.0;
        break;
      case DatasetKind::shared_latent_views: {
        const double v = 1.0 + spec.sigma * spec.sigma;
        rho_ = 1.0 / v;
        scale_ = 1.0 / std::sqrt(v);
        break;
      }
      case DatasetKind::cubic_gaussian:
        throw std::invalid_argument("density_ratio_critic: only Gaussian datasets are supported");
    }
    dim_ = spec.dim;
    const double c = 1.0 - rho_ * rho_;
    log_norm_ = -0.5 * std::log(c);
    inv_2c_ = 0.5 / c;
  }

  double rho() const noexcept { return rho_; }

  double operator()(std::span<const double> x, std::span<const double> y) const {
    double g = 0.0;
    for (std::size_t k = 0; k < dim_; ++k) g += term(x[k] * scale_, y[k] * scale_);
    return g;
  }

  /// K×K matrix of g*(x_i, y_j).
  Matrix<double> scores(const Matrix<double>& xs, const Matrix<double>& ys) const {
    if (xs.cols() != dim_ || ys.cols() != dim_) {
      throw ShapeError("density_ratio_critic: sample dimension mismatch");
    }
    const std::size_t n = xs.rows(), m = ys.rows();
    // g = Σ_k [log_norm − (y − ρx)²/(2c) + y²/2] expands into row/column terms plus a
    // bilinear cross term, which keeps K = 4096 evaluation cheap.
    const double c = 1.0 - rho_ * rho_;
    std::vector<double> a(n, 0.0), b(m, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < dim_; ++k) {
        const double x = xs(i, k) * scale_;
        a[i] += -rho_ * rho_ * x * x / (2.0 * c);
      }
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t k = 0; k < dim_; ++k) {
        const double y = ys(j, k) * scale_;
        b[j] += -y * y / (2.0 * c) + 0.5 * y * y;
      }
    Matrix<double> out(n, m);
    const double cross = rho_ / c * scale_ * scale_;
    const double base = static_cast<double>(dim_) * log_norm_;
    for (std::size_t i = 0; i < n; ++i) {
      const auto xi = xs.row(i);
      for (std::size_t j = 0; j < m; ++j) {
        const auto yj = ys.row(j);
        double dot = 0.0;
        for (std::size_t k = 0; k < dim_; ++k) dot += xi[k] * yj[k];
        out(i, j) = base + a[i] + b[j] + cross * dot;
      }
    }
    return out;
  }

 private:
  double term(double x, double y) const {
    const double r = y - rho_ * x;
    return log_norm_ - r * r * inv_2c_ + 0.5 * y * y;
  }

  double rho_ = 0.0;
  double scale_ = 1.0;
  double log_norm_ = 0.0;
  double inv_2c_ = 0.5;
  std::size_t dim_ = 1;
};

inline DensityRatioCritic density_ratio_critic(const DatasetSpec& spec) {
  return DensityRatioCritic(spec);
}

}  // namespace flatnce
