#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <vector>

#include "birdgp/basis.hpp"
#include "birdgp/matrix.hpp"
#include "birdgp/projection.hpp"
#include "birdgp/stats.hpp"
#include "birdgp/svgd.hpp"

namespace birdgp {

// Everything needed to map new predictor images to outcome images: per-channel
// predictor bases with plug-in noise variances, the outcome basis, and the
// trained particle ensemble. Covariates, when present, are appended to the
// concatenated projections at the network input.
struct FittedModel {
  std::vector<BasisSet> basis_x;
  std::vector<double> sigma2_x;  // per channel, training means
  BasisSet basis_y;
  double sigma2_y = 1e-6;
  ParticleEnsemble ensemble;
  std::size_t covariate_dim = 0;

  std::size_t input_dim() const {
    std::size_t d = covariate_dim;
    for (const auto& b : basis_x) d += b.num_components();
    return d;
  }
  void validate() const {
    if (basis_x.empty()) throw InvalidState("FittedModel: no predictor basis");
    if (basis_x.size() != sigma2_x.size())
      throw InvalidState("FittedModel: sigma2_x count mismatch");
    if (input_dim() != ensemble.layout.arch.input_dim())
      throw InvalidState("FittedModel: network input width mismatch");
    if (basis_y.num_components() != ensemble.layout.k_y)
      throw InvalidState("FittedModel: network output width mismatch");
  }
};

namespace detail {

inline void subtract_center(const BasisSet& basis, Matrix& images) {
  if (basis.center.empty()) return;
  for (std::size_t i = 0; i < images.rows(); ++i)
    for (std::size_t j = 0; j < images.cols(); ++j)
      images(i, j) -= basis.center[j];
}

inline void add_center(const BasisSet& basis, Matrix& images) {
  if (basis.center.empty()) return;
  for (std::size_t i = 0; i < images.rows(); ++i)
    for (std::size_t j = 0; j < images.cols(); ++j)
      images(i, j) += basis.center[j];
}

}  // namespace detail

// Projects each predictor channel with the closed-form conjugate posterior
// mean and appends covariates; rows are ready for the Stage-2 network.
inline Matrix project_inputs(const FittedModel& model,
                             const std::vector<Matrix>& channels,
                             const Matrix& covariates = Matrix(0, 0)) {
  model.validate();
  if (channels.size() != model.basis_x.size())
    throw ShapeError("project_inputs: channel count mismatch");
  const std::size_t n = channels.front().rows();
  for (const Matrix& c : channels)
    if (c.rows() != n) throw ShapeError("project_inputs: channel row mismatch");
  if (model.covariate_dim > 0 &&
      (covariates.rows() != n || covariates.cols() != model.covariate_dim))
    throw ShapeError("project_inputs: covariate shape mismatch");

  Matrix z(n, model.input_dim());
  std::size_t offset = 0;
  for (std::size_t ch = 0; ch < channels.size(); ++ch) {
    Matrix imgs = channels[ch];
    detail::subtract_center(model.basis_x[ch], imgs);
    const Matrix proj =
        project_new_batch(imgs, model.basis_x[ch], model.sigma2_x[ch]);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < proj.cols(); ++c) z(i, offset + c) = proj(i, c);
    offset += proj.cols();
  }
  for (std::size_t c = 0; c < model.covariate_dim; ++c)
    for (std::size_t i = 0; i < n; ++i) z(i, offset + c) = covariates(i, c);
  return z;
}

// Posterior-predictive point estimate: ensemble-averaged coefficient
// prediction reconstructed through the outcome basis. Deterministic.
inline Matrix predict_mean(const FittedModel& model,
                           const std::vector<Matrix>& channels,
                           const Matrix& covariates = Matrix(0, 0)) {
  const Matrix z = project_inputs(model, channels, covariates);
  const EnsemblePrediction pred = ensemble_predict(model.ensemble, z);
  Matrix ybar(z.rows(), model.ensemble.layout.k_y);
  for (const Matrix& m : pred.means)
    for (std::size_t i = 0; i < ybar.rows(); ++i)
      for (std::size_t k = 0; k < ybar.cols(); ++k) ybar(i, k) += m(i, k);
  const double inv_s = 1.0 / static_cast<double>(pred.means.size());
  for (double& v : ybar.storage()) v *= inv_s;
  Matrix out = matmul_nt(ybar, model.basis_y.psi);
  detail::add_center(model.basis_y, out);
  return out;
}

// Posterior-predictive draws in outcome-image space: per particle and
// replicate, y ~ N(net(x), diag(lambda)), reconstructed and voxel noise
// N(0, sigma2_y) added. Shared draws let interval levels nest exactly.
inline std::vector<Matrix> predict_draws(const FittedModel& model,
                                         const std::vector<Matrix>& channels,
                                         const Matrix& covariates, std::size_t
                                         replicates, Rng& rng) {
  if (replicates < 1) throw InvalidInput("predict_draws: need >= 1 replicate");
  const Matrix z = project_inputs(model, channels, covariates);
  const EnsemblePrediction pred = ensemble_predict(model.ensemble, z);
  const std::size_t s_count = pred.means.size();
  const std::size_t ky = model.ensemble.layout.k_y;
  const double noise_sd = std::sqrt(std::max(model.sigma2_y, 0.0));

  std::vector<Matrix> draws;
  draws.reserve(s_count * replicates);
  Matrix y(z.rows(), ky);
  for (std::size_t s = 0; s < s_count; ++s) {
    for (std::size_t r = 0; r < replicates; ++r) {
      for (std::size_t i = 0; i < z.rows(); ++i)
        for (std::size_t k = 0; k < ky; ++k)
          y(i, k) = pred.means[s](i, k) +
                    rng.normal() * std::sqrt(pred.lambdas(s, k));
      Matrix img = matmul_nt(y, model.basis_y.psi);
      detail::add_center(model.basis_y, img);
      if (noise_sd > 0.0)
        for (double& e : img.storage()) e += rng.normal() * noise_sd;
      draws.push_back(std::move(img));
    }
  }
  return draws;
}

struct IntervalPair {
  Matrix lo{0, 0};
  Matrix hi{0, 0};
};

inline IntervalPair interval_from_draws(const std::vector<Matrix>& draws,
                                        double level) {
  if (draws.empty()) throw InvalidInput("interval_from_draws: no draws");
  if (level <= 0.0 || level >= 1.0)
    throw InvalidInput("interval_from_draws: level must be in (0, 1)");
  const std::size_t n = draws.front().rows(), v = draws.front().cols();
  IntervalPair out{Matrix(n, v), Matrix(n, v)};
  std::vector<double> samples(draws.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < v; ++j) {
      for (std::size_t d = 0; d < draws.size(); ++d) samples[d] = draws[d](i, j);
      std::sort(samples.begin(), samples.end());
      out.lo(i, j) = quantile_sorted(samples, (1.0 - level) / 2.0);
      out.hi(i, j) = quantile_sorted(samples, 1.0 - (1.0 - level) / 2.0);
    }
  }
  return out;
}

inline IntervalPair predict_interval(const FittedModel& model,
                                     const std::vector<Matrix>& channels,
                                     const Matrix& covariates, double level,
                                     Rng& rng, std::size_t replicates = 20) {
  return interval_from_draws(
      predict_draws(model, channels, covariates, replicates, rng), level);
}

// Voxels whose absolute intensity is in the top q fraction of BOTH images
// (thresholds from the shared quantile convention).
inline std::vector<std::uint8_t> activated_region(std::span<const double> observed,
                                                  std::span<const double> predicted,
                                                  double q = 0.05) {
  if (observed.size() != predicted.size())
    throw ShapeError("activated_region: image length mismatch");
  if (q <= 0.0 || q >= 1.0) throw InvalidInput("activated_region: q in (0,1)");
  std::vector<double> abs_obs(observed.size()), abs_pred(predicted.size());
  for (std::size_t i = 0; i < observed.size(); ++i) {
    abs_obs[i] = std::abs(observed[i]);
    abs_pred[i] = std::abs(predicted[i]);
  }
  auto degenerate = [](const std::vector<double>& a) {
    const auto [lo, hi] = std::minmax_element(a.begin(), a.end());
    return *lo == *hi;
  };
  if (degenerate(abs_obs) || degenerate(abs_pred))
    throw DegenerateInput("activated_region: constant image");
  const double thr_obs = quantile(abs_obs, 1.0 - q);
  const double thr_pred = quantile(abs_pred, 1.0 - q);
  std::vector<std::uint8_t> mask(observed.size(), 0);
  for (std::size_t i = 0; i < observed.size(); ++i)
    mask[i] = (abs_obs[i] >= thr_obs && abs_pred[i] >= thr_pred) ? 1 : 0;
  return mask;
}

enum class MaskPolicy { row_subject, col_subject, union_masks, global };

struct CorrelationMatrix {
  Matrix c{0, 0};      // Pearson correlations; undefined entries hold NaN
  Matrix valid{0, 0};  // 1 where the correlation is well defined
  std::vector<std::size_t> mask_sizes;
};

// c_ij = corr over subject masks of predicted map i against observed map j.
// The default row_subject policy masks by subject i's activated region, per
// the subject-specific region definition; alternatives are exposed because
// the convention is ambiguous. Degenerate correlations (constant slices,
// undersized masks) are flagged rather than poisoning downstream counts.
inline CorrelationMatrix correlation_matrix(const Matrix& predictions,
                                            const Matrix& observations,
                                            double q = 0.05,
                                            MaskPolicy policy = MaskPolicy::row_subject) {
  if (predictions.rows() != observations.rows() ||
      predictions.cols() != observations.cols())
    throw ShapeError("correlation_matrix: shape mismatch");
  const std::size_t n = predictions.rows(), v = predictions.cols();

  std::vector<std::vector<std::uint8_t>> masks(n);
  if (policy != MaskPolicy::global) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        masks[i] = activated_region(observations.row(i), predictions.row(i), q);
      } catch (const DegenerateInput&) {
        masks[i].assign(v, 0);  // no usable region; row flagged below
      }
    }
  }

  CorrelationMatrix out;
  out.c = Matrix(n, n, std::numeric_limits<double>::quiet_NaN());
  out.valid = Matrix(n, n);
  out.mask_sizes.resize(n, v);
  if (policy != MaskPolicy::global)
    for (std::size_t i = 0; i < n; ++i)
      out.mask_sizes[i] = static_cast<std::size_t>(
          std::count(masks[i].begin(), masks[i].end(), std::uint8_t{1}));

  std::vector<double> a, b;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      a.clear();
      b.clear();
      for (std::size_t t = 0; t < v; ++t) {
        bool in = true;
        switch (policy) {
          case MaskPolicy::row_subject: in = masks[i][t] != 0; break;
          case MaskPolicy::col_subject: in = masks[j][t] != 0; break;
          case MaskPolicy::union_masks: in = masks[i][t] != 0 || masks[j][t] != 0; break;
          case MaskPolicy::global: in = true; break;
        }
        if (in) {
          a.push_back(predictions(i, t));
          b.push_back(observations(j, t));
        }
      }
      if (a.size() < 2) continue;
      try {
        out.c(i, j) = pearson(a, b);
        out.valid(i, j) = 1.0;
      } catch (const DegenerateCorrelation&) {
        // leave flagged
      }
    }
  }
  return out;
}

struct AccuracyResult {
  std::vector<double> a;       // per-subject accuracy; NaN when undefined
  std::vector<double> p;       // proportion curve over the alpha grid
  std::size_t subjects_used = 0;
};

// a_i = #{ j != i : c_ii > c_ij } / #(valid j != i);  p(alpha) = share of
// subjects with a_i > alpha. Flagged entries shrink the denominators; a
// subject with no valid diagonal (or no valid competitors) is dropped.
inline AccuracyResult accuracy_and_proportion(const CorrelationMatrix& cm,
                                              const std::vector<double>& alphas) {
  const std::size_t n = cm.c.rows();
  if (n < 2) throw InvalidInput("accuracy_and_proportion: need n >= 2");
  AccuracyResult out;
  out.a.assign(n, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < n; ++i) {
    if (cm.valid(i, i) == 0.0) continue;
    std::size_t wins = 0, comparable = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || cm.valid(i, j) == 0.0) continue;
      ++comparable;
      if (cm.c(i, i) > cm.c(i, j)) ++wins;
    }
    if (comparable == 0) continue;
    out.a[i] = static_cast<double>(wins) / static_cast<double>(comparable);
    ++out.subjects_used;
  }
  out.p.reserve(alphas.size());
  for (double alpha : alphas) {
    std::size_t count = 0;
    for (double ai : out.a)
      if (!std::isnan(ai) && ai > alpha) ++count;
    out.p.push_back(out.subjects_used == 0
                        ? 0.0
                        : static_cast<double>(count) /
                              static_cast<double>(out.subjects_used));
  }
  return out;
}

struct MseResult {
  double overall = 0.0;
  std::map<int, double> per_label;
};

inline MseResult mse(const Matrix& predictions, const Matrix& observations,
                     const std::vector<int>& labels = {}) {
  if (predictions.rows() != observations.rows() ||
      predictions.cols() != observations.cols())
    throw ShapeError("mse: shape mismatch");
  if (!labels.empty() && labels.size() != predictions.rows())
    throw ShapeError("mse: label count mismatch");
  const std::size_t n = predictions.rows(), v = predictions.cols();
  std::map<int, std::pair<double, std::size_t>> acc;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double d = predictions(i, j) - observations(i, j);
      row += d * d;
    }
    total += row;
    if (!labels.empty()) {
      auto& [s, cnt] = acc[labels[i]];
      s += row;
      cnt += 1;
    }
  }
  MseResult out;
  out.overall = total / static_cast<double>(n * v);
  for (const auto& [label, sc] : acc)
    out.per_label[label] = sc.first / static_cast<double>(sc.second * v);
  return out;
}

struct CoverageResult {
  std::vector<double> per_subject;
  double mean_coverage = 0.0;
};

// Fraction of voxels whose observed value falls inside [lo, hi], per subject
// and averaged (the mean coverage rate of the predictive intervals).
inline CoverageResult coverage(const IntervalPair& iv, const Matrix& observations) {
  if (iv.lo.rows() != observations.rows() || iv.lo.cols() != observations.cols())
    throw ShapeError("coverage: shape mismatch");
  CoverageResult out;
  const std::size_t n = observations.rows(), v = observations.cols();
  out.per_subject.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t inside = 0;
    for (std::size_t j = 0; j < v; ++j)
      if (observations(i, j) >= iv.lo(i, j) && observations(i, j) <= iv.hi(i, j))
        ++inside;
    out.per_subject[i] = static_cast<double>(inside) / static_cast<double>(v);
  }
  out.mean_coverage = mean(out.per_subject);
  return out;
}

}  // namespace birdgp
