#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "birdgp/basis.hpp"
#include "birdgp/matrix.hpp"
#include "birdgp/parallel.hpp"
#include "birdgp/rng.hpp"

namespace birdgp {

struct ProjectionPriors {
  double a_sigma = 1.0;
  double b_sigma = 1.0;
  double a_lambda = 1.0;
  double b_lambda = 1.0;

  void validate() const {
    if (a_sigma <= 0 || b_sigma <= 0 || a_lambda <= 0 || b_lambda <= 0)
      throw InvalidConfig("ProjectionPriors: all hyperparameters must be > 0");
  }
};

struct ProjectionPosterior {
  Matrix coef_mean{0, 0};           // n x K posterior means of x_i
  Matrix coef_sd{0, 0};             // n x K posterior standard deviations
  std::vector<double> sigma2_mean;  // per-image noise variance means
  std::vector<double> lambda_mean;  // shared eigenvalue means
  std::size_t retained = 0;
  std::size_t burn_in = 0;
  bool noise_floored = false;  // some sigma^2 draw hit the numerical floor
};

struct GibbsOptions {
  std::size_t iters = 1000;
  std::size_t burn_in = 200;
  int threads = 1;
  // Oracle hooks: hold sigma^2 and/or lambda fixed instead of sampling them.
  std::optional<double> fixed_sigma2;
  std::optional<std::vector<double>> fixed_lambda;
  // Stream keys for the per-image chains; defaults to 0..n-1 by position.
  // Supplying ids makes posteriors follow images under reordering.
  std::optional<std::vector<std::uint64_t>> image_ids;
  bool sort_eigenvalues = true;
};

inline constexpr double kSigma2Floor = 1e-12;

// Blocked Gibbs sampler for the per-image projection model
//   X_i = Psi x_i + eps,  eps ~ N(0, sigma_i^2 I),  x_ik ~ N(0, lambda_k),
//   sigma_i^2 ~ IG(a_sigma, b_sigma),  lambda_k ~ IG(a_lambda, b_lambda).
// Full conditionals (Psi^T Psi = I makes every precision diagonal):
//   x_i  | .  ~ N(m_i, D_i),  D_i^{-1} = diag(1/lambda + 1/sigma_i^2),
//                m_i = D_i (Psi^T X_i) / sigma_i^2
//   sigma_i^2 | . ~ IG(a_sigma + V/2, b_sigma + ||X_i - Psi x_i||^2 / 2)
//   lambda_k  | . ~ IG(a_lambda + n/2, b_lambda + sum_i x_ik^2 / 2)
// Each sweep updates all x_i, then all sigma_i^2, then lambda. Posterior
// means of lambda are written back into basis.eigenvalues (sorted
// non-increasing, with psi/mix/coefficient columns permuted to match).
inline ProjectionPosterior gibbs_project(const Matrix& images, BasisSet& basis,
                                         const ProjectionPriors& priors, Rng& rng,
                                         const GibbsOptions& opt = {}) {
  priors.validate();
  const std::size_t n = images.rows();
  const std::size_t v = images.cols();
  const std::size_t k = basis.num_components();
  if (v != basis.num_voxels())
    throw ShapeError("gibbs_project: image width does not match basis");
  if (n == 0) throw InvalidInput("gibbs_project: no images");
  if (!images.all_finite()) throw InvalidInput("gibbs_project: non-finite images");
  if (opt.iters <= opt.burn_in)
    throw InvalidConfig("gibbs_project: iters must exceed burn_in");
  if (opt.fixed_lambda && opt.fixed_lambda->size() != k)
    throw InvalidConfig("gibbs_project: fixed lambda length mismatch");
  if (opt.image_ids && opt.image_ids->size() != n)
    throw InvalidConfig("gibbs_project: image id count mismatch");

  // Sufficient statistics that never change across sweeps.
  Matrix proj = matmul(images, basis.psi);  // n x k, rows Psi^T X_i
  std::vector<double> img_sq(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += images(i, j) * images(i, j);
    img_sq[i] = s;
  }

  // Independent streams: one per image (keyed by id, order-invariant) and one
  // for the shared lambda chain.
  const std::uint64_t master_seed = rng.next_u64();
  const std::uint64_t stream_base = rng.next_u64();
  auto image_rng = [&](std::size_t i) {
    const std::uint64_t id = opt.image_ids ? (*opt.image_ids)[i]
                                           : static_cast<std::uint64_t>(i);
    return Rng(master_seed, Rng::mix64(stream_base ^ Rng::mix64(id + 1)));
  };
  Rng lambda_rng(master_seed, Rng::mix64(stream_base ^ 0xA11CE5EEDB16ull));

  // Accumulation order for the pooled lambda statistic follows image ids, not
  // storage order, so a permuted dataset reproduces the same chain bitwise.
  std::vector<std::size_t> sum_order(n);
  std::iota(sum_order.begin(), sum_order.end(), 0u);
  if (opt.image_ids) {
    std::stable_sort(sum_order.begin(), sum_order.end(),
                     [&](std::size_t a, std::size_t b) {
                       return (*opt.image_ids)[a] < (*opt.image_ids)[b];
                     });
  }

  // Deterministic initialization from the least-squares projection.
  Matrix x = proj;
  std::vector<double> sigma2(n);
  for (std::size_t i = 0; i < n; ++i) {
    double fit = 0.0;
    for (std::size_t c = 0; c < k; ++c) fit += proj(i, c) * proj(i, c);
    const double resid = std::max(img_sq[i] - fit, 0.0);
    sigma2[i] = std::max(resid / static_cast<double>(v), 1e-6);
  }
  std::vector<double> lambda(k);
  for (std::size_t c = 0; c < k; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += proj(i, c) * proj(i, c);
    lambda[c] = std::max(s / static_cast<double>(n), 1e-6);
  }
  if (opt.fixed_sigma2) {
    if (*opt.fixed_sigma2 <= 0.0)
      throw InvalidConfig("gibbs_project: fixed sigma^2 must be > 0");
    std::fill(sigma2.begin(), sigma2.end(), *opt.fixed_sigma2);
  }
  if (opt.fixed_lambda) {
    for (double l : *opt.fixed_lambda)
      if (l <= 0.0) throw InvalidConfig("gibbs_project: fixed lambda must be > 0");
    lambda = *opt.fixed_lambda;
  }

  ProjectionPosterior post;
  post.burn_in = opt.burn_in;
  Matrix sum_x(n, k), sum_x2(n, k);
  std::vector<double> sum_sigma2(n, 0.0), sum_lambda(k, 0.0);
  std::vector<double> resid_store(n, 0.0);
  std::vector<std::uint8_t> floored(n, 0);

  std::vector<Rng> chains;
  chains.reserve(n);
  for (std::size_t i = 0; i < n; ++i) chains.push_back(image_rng(i));

  const double a_sig_post = priors.a_sigma + static_cast<double>(v) / 2.0;
  const double a_lam_post = priors.a_lambda + static_cast<double>(n) / 2.0;

  for (std::size_t it = 0; it < opt.iters; ++it) {
    parallel_for(n, opt.threads, [&](std::size_t i) {
      Rng& ch = chains[i];
      double fit = 0.0, quad = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double prec = 1.0 / lambda[c] + 1.0 / sigma2[i];
        const double mean = proj(i, c) / sigma2[i] / prec;
        const double draw = mean + ch.normal() / std::sqrt(prec);
        x(i, c) = draw;
        fit += draw * proj(i, c);
        quad += draw * draw;
      }
      const double resid = std::max(img_sq[i] - 2.0 * fit + quad, 0.0);
      resid_store[i] = resid;
      if (!opt.fixed_sigma2) {
        double s2 = ch.inverse_gamma(a_sig_post, priors.b_sigma + resid / 2.0);
        if (s2 < kSigma2Floor) {
          s2 = kSigma2Floor;
          floored[i] = 1;
        }
        sigma2[i] = s2;
      } else {
        // Keep the per-image stream advancing identically either way so
        // fixed/unfixed runs stay comparable draw-for-draw.
        (void)ch.inverse_gamma(a_sig_post, priors.b_sigma + resid / 2.0);
      }
    });
    if (!opt.fixed_lambda) {
      for (std::size_t c = 0; c < k; ++c) {
        double s = 0.0;
        for (std::size_t i : sum_order) s += x(i, c) * x(i, c);
        lambda[c] = lambda_rng.inverse_gamma(a_lam_post, priors.b_lambda + s / 2.0);
      }
    }
    if (it >= opt.burn_in) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < k; ++c) {
          sum_x(i, c) += x(i, c);
          sum_x2(i, c) += x(i, c) * x(i, c);
        }
        sum_sigma2[i] += sigma2[i];
      }
      for (std::size_t c = 0; c < k; ++c) sum_lambda[c] += lambda[c];
    }
  }

  const double r = static_cast<double>(opt.iters - opt.burn_in);
  post.retained = opt.iters - opt.burn_in;
  post.coef_mean = Matrix(n, k);
  post.coef_sd = Matrix(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      const double m = sum_x(i, c) / r;
      post.coef_mean(i, c) = m;
      const double var =
          r > 1.0 ? std::max(sum_x2(i, c) - r * m * m, 0.0) / (r - 1.0) : 0.0;
      post.coef_sd(i, c) = std::sqrt(var);
    }
  }
  post.sigma2_mean.resize(n);
  for (std::size_t i = 0; i < n; ++i) post.sigma2_mean[i] = sum_sigma2[i] / r;
  post.lambda_mean.resize(k);
  for (std::size_t c = 0; c < k; ++c) post.lambda_mean[c] = sum_lambda[c] / r;
  post.noise_floored =
      std::any_of(floored.begin(), floored.end(), [](std::uint8_t f) { return f != 0; });

  // Order eigenvalues non-increasing and permute every column-indexed
  // artifact the same way so downstream consumers agree on component order.
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0u);
  if (opt.sort_eigenvalues && !opt.fixed_lambda) {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return post.lambda_mean[a] > post.lambda_mean[b];
    });
  }
  const bool identity =
      std::is_sorted(order.begin(), order.end());
  if (!identity) {
    auto permute_cols = [&](Matrix& m) {
      Matrix out(m.rows(), k);
      for (std::size_t c = 0; c < k; ++c)
        for (std::size_t i = 0; i < m.rows(); ++i) out(i, c) = m(i, order[c]);
      m = std::move(out);
    };
    permute_cols(post.coef_mean);
    permute_cols(post.coef_sd);
    permute_cols(basis.psi);
    if (basis.mix.rows() > 0) permute_cols(basis.mix);
    std::vector<double> lam(k);
    for (std::size_t c = 0; c < k; ++c) lam[c] = post.lambda_mean[order[c]];
    post.lambda_mean = std::move(lam);
  }
  basis.eigenvalues = post.lambda_mean;
  return post;
}

// Closed-form conjugate projection of a single new image using the training
// eigenvalue estimates and a supplied noise variance.
inline void project_new(std::span<const double> image, const BasisSet& basis,
                        double sigma2, std::vector<double>& mean_out,
                        std::vector<double>& sd_out) {
  if (basis.eigenvalues.empty())
    throw InvalidState("project_new: basis eigenvalues are unset");
  if (image.size() != basis.num_voxels())
    throw ShapeError("project_new: image length does not match basis");
  if (sigma2 <= 0.0) throw InvalidInput("project_new: sigma^2 must be > 0");
  const std::size_t k = basis.num_components();
  mean_out.resize(k);
  sd_out.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    double p = 0.0;
    for (std::size_t j = 0; j < image.size(); ++j) p += image[j] * basis.psi(j, c);
    const double prec = 1.0 / basis.eigenvalues[c] + 1.0 / sigma2;
    mean_out[c] = p / sigma2 / prec;
    sd_out[c] = std::sqrt(1.0 / prec);
  }
}

// Rows of projected posterior means for a batch of new images.
inline Matrix project_new_batch(const Matrix& images, const BasisSet& basis,
                                double sigma2) {
  Matrix out(images.rows(), basis.num_components());
  std::vector<double> mean, sd;
  for (std::size_t i = 0; i < images.rows(); ++i) {
    project_new(images.row(i), basis, sigma2, mean, sd);
    for (std::size_t c = 0; c < mean.size(); ++c) out(i, c) = mean[c];
  }
  return out;
}

// Draws images from the basis-expansion model: x_i ~ N(0, diag(lambda)),
// image_i = Psi x_i + N(0, sigma^2 I).
inline Matrix simulate_images(const BasisSet& basis, std::size_t n, double sigma2,
                              Rng& rng, Matrix* coefs_out = nullptr) {
  if (basis.eigenvalues.empty())
    throw InvalidState("simulate_images: basis eigenvalues are unset");
  if (sigma2 < 0.0) throw InvalidInput("simulate_images: sigma^2 must be >= 0");
  const std::size_t v = basis.num_voxels();
  const std::size_t k = basis.num_components();
  Matrix coefs(n, k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c)
      coefs(i, c) = rng.normal() * std::sqrt(std::max(basis.eigenvalues[c], 0.0));
  Matrix images = matmul_nt(coefs, basis.psi);
  if (sigma2 > 0.0) {
    const double sd = std::sqrt(sigma2);
    for (double& e : images.storage()) e += rng.normal() * sd;
  }
  (void)v;
  if (coefs_out) *coefs_out = std::move(coefs);
  return images;
}

}  // namespace birdgp
