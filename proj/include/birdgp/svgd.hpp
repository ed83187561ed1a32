#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "birdgp/matrix.hpp"
#include "birdgp/mlp.hpp"
#include "birdgp/parallel.hpp"
#include "birdgp/rng.hpp"
#include "birdgp/stats.hpp"

namespace birdgp {

// Flat particle layout: [network weights+biases | log sigma_w^2 | log lambda_1..K].
struct ThetaLayout {
  MlpArch arch;
  std::size_t k_y = 0;

  ThetaLayout() = default;
  ThetaLayout(MlpArch a, std::size_t ky) : arch(std::move(a)), k_y(ky) {
    if (arch.output_dim() != k_y)
      throw InvalidConfig("ThetaLayout: network output width must equal K_y");
  }
  std::size_t net_params() const { return arch.num_params(); }
  std::size_t sigma_index() const { return net_params(); }
  std::size_t lambda_index(std::size_t k) const { return net_params() + 1 + k; }
  std::size_t dim() const { return net_params() + 1 + k_y; }
};

struct BnnPriors {
  double a_w = 1.0;
  double b_w = 10.0;
  double a_lambda = 1.0;
  double b_lambda = 1.0;

  void validate() const {
    if (a_w <= 0 || b_w <= 0 || a_lambda <= 0 || b_lambda <= 0)
      throw InvalidConfig("BnnPriors: all hyperparameters must be > 0");
  }
};

enum class BandwidthRule { median_sq, median };

inline BandwidthRule bandwidth_rule_from_string(const std::string& s) {
  if (s == "median_sq") return BandwidthRule::median_sq;
  if (s == "median") return BandwidthRule::median;
  throw InvalidConfig("unknown bandwidth rule: " + s);
}

struct SvgdConfig {
  std::size_t particles = 20;
  std::size_t epochs = 30;
  std::size_t batch = 64;
  double lr = 1e-3;
  // Epochs between optimizer-moment resets (warm restarts); 0 never resets.
  // The initial transient's large gradients park Adam's second-moment scale
  // far above the converged regime, throttling later steps; periodic resets
  // let the step size track the shrinking gradient scale.
  std::size_t adam_restart = 100;
  BnnPriors priors;
  BandwidthRule bandwidth_rule = BandwidthRule::median_sq;
  int threads = 1;

  void validate() const {
    priors.validate();
    if (particles < 1 || epochs < 1 || batch < 1 || lr <= 0.0)
      throw InvalidConfig("SvgdConfig: particles, epochs, batch, lr must be positive");
  }
};

struct ParticleEnsemble {
  ThetaLayout layout;
  Matrix particles{0, 0};  // S x dim

  std::size_t size() const { return particles.rows(); }
  MlpParams particle_net(std::size_t s) const {
    std::vector<double> flat(particles.row(s).begin(),
                             particles.row(s).begin() +
                                 static_cast<std::ptrdiff_t>(layout.net_params()));
    return unflatten(layout.arch, flat);
  }
  std::vector<double> particle_lambda(std::size_t s) const {
    std::vector<double> lam(layout.k_y);
    for (std::size_t k = 0; k < layout.k_y; ++k)
      lam[k] = std::exp(particles(s, layout.lambda_index(k)));
    return lam;
  }
};

// Prior draw per particle: sigma_w^2 ~ IG(a_w, b_w); all weights and biases
// N(0, sigma_w^2); lambda_k ~ IG(a_lambda, b_lambda). Stage-1 eigenvalue
// estimates may seed the lambda coordinates instead of prior draws.
inline ParticleEnsemble init_ensemble(
    const ThetaLayout& layout, const SvgdConfig& cfg, Rng& rng,
    const std::optional<std::vector<double>>& lambda_init = std::nullopt) {
  cfg.validate();
  if (lambda_init && lambda_init->size() != layout.k_y)
    throw InvalidConfig("init_ensemble: lambda seed length mismatch");
  ParticleEnsemble ens;
  ens.layout = layout;
  ens.particles = Matrix(cfg.particles, layout.dim());
  for (std::size_t s = 0; s < cfg.particles; ++s) {
    const double sigma_w2 = rng.inverse_gamma(cfg.priors.a_w, cfg.priors.b_w);
    const double sd = std::sqrt(sigma_w2);
    for (std::size_t j = 0; j < layout.net_params(); ++j)
      ens.particles(s, j) = rng.normal() * sd;
    ens.particles(s, layout.sigma_index()) = std::log(sigma_w2);
    for (std::size_t k = 0; k < layout.k_y; ++k) {
      const double lam = lambda_init
                             ? (*lambda_init)[k]
                             : rng.inverse_gamma(cfg.priors.a_lambda, cfg.priors.b_lambda);
      if (lam <= 0.0) throw InvalidConfig("init_ensemble: lambda seed must be > 0");
      ens.particles(s, layout.lambda_index(k)) = std::log(lam);
    }
  }
  return ens;
}

// Log posterior (up to additive constants in theta-independent terms only for
// the Gaussian 2*pi factors, which are included) and its gradient for one
// particle on a minibatch, with the likelihood rescaled by n_total / |batch|:
//   L = (n_total/B) sum_i log N(y_i | net(x_i), diag(lambda))
//     - ||w||^2 / (2 sigma_w^2) - (P/2) log sigma_w^2
//     - a_w s - b_w exp(-s)                      [s = log sigma_w^2]
//     + sum_k ( -a_l t_k - b_l exp(-t_k) )       [t_k = log lambda_k]
// The log-variance terms fold the IG densities together with the change of
// variables Jacobian.
inline double bnn_log_post_grad(const ThetaLayout& layout, const BnnPriors& priors,
                                std::span<const double> theta, const Matrix& x,
                                const Matrix& y, double n_total,
                                std::span<double> grad_out) {
  if (theta.size() != layout.dim() || grad_out.size() != layout.dim())
    throw ShapeError("bnn_log_post_grad: theta length mismatch");
  const std::size_t b = x.rows();
  if (b == 0) throw InvalidInput("bnn_log_post_grad: empty batch");
  if (y.rows() != b || y.cols() != layout.k_y ||
      x.cols() != layout.arch.input_dim())
    throw ShapeError("bnn_log_post_grad: batch shape mismatch");

  const std::size_t p = layout.net_params();
  const double scale = n_total / static_cast<double>(b);
  const double s = theta[layout.sigma_index()];
  const double inv_sigma_w2 = std::exp(-s);

  std::vector<double> net_flat(theta.begin(),
                               theta.begin() + static_cast<std::ptrdiff_t>(p));
  const MlpParams net = unflatten(layout.arch, net_flat);
  ForwardCache cache;
  const Matrix m = forward(net, x, &cache);

  std::vector<double> lambda(layout.k_y), inv_lambda(layout.k_y);
  for (std::size_t k = 0; k < layout.k_y; ++k) {
    lambda[k] = std::exp(theta[layout.lambda_index(k)]);
    inv_lambda[k] = 1.0 / lambda[k];
  }

  constexpr double log_2pi = 1.8378770664093453;
  double loglik = 0.0;
  Matrix g(b, layout.k_y);
  std::vector<double> lambda_grad(layout.k_y, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < layout.k_y; ++k) {
      const double r = y(i, k) - m(i, k);
      loglik += -0.5 * (r * r * inv_lambda[k] +
                        theta[layout.lambda_index(k)] + log_2pi);
      g(i, k) = scale * r * inv_lambda[k];
      lambda_grad[k] += -0.5 + 0.5 * r * r * inv_lambda[k];
    }
  }

  const std::vector<double> net_grad = grad_params(cache, g);
  double wsq = 0.0;
  for (std::size_t j = 0; j < p; ++j) {
    wsq += theta[j] * theta[j];
    grad_out[j] = net_grad[j] - theta[j] * inv_sigma_w2;
  }
  grad_out[layout.sigma_index()] = 0.5 * wsq * inv_sigma_w2 -
                                   0.5 * static_cast<double>(p) - priors.a_w +
                                   priors.b_w * inv_sigma_w2;
  double value = scale * loglik - 0.5 * wsq * inv_sigma_w2 -
                 0.5 * static_cast<double>(p) * s - priors.a_w * s -
                 priors.b_w * inv_sigma_w2;
  for (std::size_t k = 0; k < layout.k_y; ++k) {
    const double t = theta[layout.lambda_index(k)];
    const double inv_lam = inv_lambda[k];
    grad_out[layout.lambda_index(k)] =
        scale * lambda_grad[k] - priors.a_lambda + priors.b_lambda * inv_lam;
    value += -priors.a_lambda * t - priors.b_lambda * inv_lam;
  }
  return value;
}

// k(a, b) = exp(-||a - b||^2 / h). median_sq: h = med^2 / log(S+1) (med = the
// median pairwise distance); median: the literal h = med / log(S+1). A floor
// of 1e-8 keeps coincident particles (h = 0) at the documented all-ones
// kernel instead of 0/0.
inline Matrix rbf_kernel(const Matrix& particles, BandwidthRule rule,
                         double* h_out = nullptr) {
  const std::size_t s = particles.rows();
  if (s == 0) throw InvalidInput("rbf_kernel: no particles");
  Matrix dist_sq(s, s);
  std::vector<double> pair_dists;
  pair_dists.reserve(s * (s - 1) / 2);
  for (std::size_t a = 0; a < s; ++a) {
    for (std::size_t b = a + 1; b < s; ++b) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < particles.cols(); ++j) {
        const double diff = particles(a, j) - particles(b, j);
        d2 += diff * diff;
      }
      dist_sq(a, b) = d2;
      dist_sq(b, a) = d2;
      pair_dists.push_back(std::sqrt(d2));
    }
  }
  const double med = pair_dists.empty() ? 0.0 : median(pair_dists);
  const double denom = std::log(static_cast<double>(s) + 1.0);
  double h = (rule == BandwidthRule::median_sq ? med * med : med) / denom;
  h = std::max(h, 1e-8);
  if (h_out) *h_out = h;

  Matrix kmat(s, s);
  for (std::size_t a = 0; a < s; ++a) {
    kmat(a, a) = 1.0;
    for (std::size_t b = a + 1; b < s; ++b) {
      const double v = std::exp(-dist_sq(a, b) / h);
      kmat(a, b) = v;
      kmat(b, a) = v;
    }
  }
  return kmat;
}

// One Stein variational step over all particles. grad_fn(s, theta, grad_out)
// must return the log target value for particle s and fill its gradient.
// Returns the mean log target across particles; writes the bandwidth used.
//   phi_s = (1/S) sum_{s'} [ k(T_{s'}, T_s) grad_{s'} + (2/h)(T_s - T_{s'}) k ]
// Adam is applied to -phi (ascent direction).
template <typename GradFn>
double svgd_step(Matrix& particles, GradFn&& grad_fn, AdamState& adam,
                 BandwidthRule rule, int threads, double* h_out = nullptr) {
  const std::size_t s = particles.rows();
  const std::size_t dim = particles.cols();
  Matrix grads(s, dim);
  std::vector<double> values(s, 0.0);
  parallel_for(s, threads, [&](std::size_t idx) {
    values[idx] = grad_fn(idx, std::span<const double>(particles.row(idx)),
                          std::span<double>(grads.row(idx).data(), dim));
  });

  double h = 0.0;
  const Matrix kmat = rbf_kernel(particles, rule, &h);
  Matrix drive = matmul(kmat, grads);  // drive(s, :) = sum_{s'} k(s', s) grad_{s'}
  for (std::size_t a = 0; a < s; ++a) {
    double ksum = 0.0;
    for (std::size_t b = 0; b < s; ++b) ksum += kmat(a, b);
    for (std::size_t j = 0; j < dim; ++j) {
      double repulse = ksum * particles(a, j);
      for (std::size_t b = 0; b < s; ++b) repulse -= kmat(a, b) * particles(b, j);
      drive(a, j) = (drive(a, j) + (2.0 / h) * repulse) / static_cast<double>(s);
    }
  }
  for (double& d : drive.storage()) d = -d;
  adam_step(adam, particles.storage(), drive.storage());
  if (h_out) *h_out = h;
  return mean(values);
}

struct SvgdTrace {
  std::vector<double> mean_log_post;  // per epoch
  std::vector<double> bandwidth;      // per epoch (last step's h)
};

// Trains the Stage-2 network ensemble on projected pairs (x: n x K_x_total,
// y: n x K_y) by minibatch SVGD.
inline SvgdTrace svgd_fit(const Matrix& x, const Matrix& y, ParticleEnsemble& ens,
                          const SvgdConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t n = x.rows();
  if (n == 0) throw InvalidInput("svgd_fit: empty dataset");
  if (y.rows() != n) throw ShapeError("svgd_fit: x/y row mismatch");
  if (ens.size() != cfg.particles)
    throw InvalidConfig("svgd_fit: ensemble size does not match config");
  if (x.cols() != ens.layout.arch.input_dim() || y.cols() != ens.layout.k_y)
    throw ShapeError("svgd_fit: data width does not match layout");

  const std::size_t batch = std::min(cfg.batch, n);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0u);

  AdamState adam(ens.particles.storage().size(), cfg.lr);
  SvgdTrace trace;
  trace.mean_log_post.reserve(cfg.epochs);
  trace.bandwidth.reserve(cfg.epochs);

  Matrix xb(batch, x.cols()), yb(batch, y.cols());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.adam_restart > 0 && epoch > 0 && epoch % cfg.adam_restart == 0)
      adam = AdamState(ens.particles.storage().size(), cfg.lr);
    for (std::size_t i = n; i-- > 1;) {
      const std::size_t j = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(i)));
      std::swap(perm[i], perm[j]);
    }
    double epoch_value = 0.0;
    std::size_t steps = 0;
    double h = 0.0;
    for (std::size_t start = 0; start + batch <= n; start += batch, ++steps) {
      for (std::size_t r = 0; r < batch; ++r) {
        const std::size_t src = perm[start + r];
        for (std::size_t c = 0; c < x.cols(); ++c) xb(r, c) = x(src, c);
        for (std::size_t c = 0; c < y.cols(); ++c) yb(r, c) = y(src, c);
      }
      try {
        epoch_value += svgd_step(
            ens.particles,
            [&](std::size_t, std::span<const double> theta, std::span<double> grad) {
              return bnn_log_post_grad(ens.layout, cfg.priors, theta, xb, yb,
                                       static_cast<double>(n), grad);
            },
            adam, cfg.bandwidth_rule, cfg.threads, &h);
      } catch (const NumericalFailure& e) {
        throw NumericalFailure("svgd_fit: " + std::string(e.what()) + " at epoch " +
                                   std::to_string(epoch),
                               e.offending_index);
      }
    }
    if (steps == 0) throw InvalidConfig("svgd_fit: batch larger than dataset");
    trace.mean_log_post.push_back(epoch_value / static_cast<double>(steps));
    trace.bandwidth.push_back(h);
  }
  return trace;
}

struct EnsemblePrediction {
  std::vector<Matrix> means;  // one B x K_y matrix per particle
  Matrix lambdas{0, 0};       // S x K_y conditional noise eigenvalues
};

// Per-particle forward passes; callers do any averaging or sampling.
inline EnsemblePrediction ensemble_predict(const ParticleEnsemble& ens,
                                           const Matrix& x) {
  if (x.cols() != ens.layout.arch.input_dim())
    throw ShapeError("ensemble_predict: input width mismatch");
  EnsemblePrediction out;
  out.means.reserve(ens.size());
  out.lambdas = Matrix(ens.size(), ens.layout.k_y);
  for (std::size_t s = 0; s < ens.size(); ++s) {
    out.means.push_back(forward(ens.particle_net(s), x));
    const std::vector<double> lam = ens.particle_lambda(s);
    for (std::size_t k = 0; k < lam.size(); ++k) out.lambdas(s, k) = lam[k];
  }
  return out;
}

}  // namespace birdgp
