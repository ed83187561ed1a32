#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "birdgp/matrix.hpp"
#include "birdgp/svgd.hpp"

namespace birdgp {

struct ImportanceReport {
  std::vector<double> im;        // elementwise importance, >= 0
  std::vector<std::size_t> rank; // 1 = largest importance, stable on ties
  std::size_t n_eval = 0;
  std::size_t particles_used = 0;
  // Contiguous labeled blocks of the input dimensions (projected channels
  // first, then covariates).
  std::vector<std::pair<std::string, std::size_t>> blocks;
};

// q(x, y) = (1/S) sum_s d/dx log N(y | net_s(x), diag(lambda_s)) for a batch
// of evaluation pairs; per particle this is the network input gradient with
// upstream weights (y - m) / lambda.
inline Matrix importance_fn_batch(const ParticleEnsemble& ens, const Matrix& x,
                                  const Matrix& y) {
  if (x.cols() != ens.layout.arch.input_dim())
    throw ShapeError("importance_fn: x width does not match network input");
  if (y.cols() != ens.layout.k_y || y.rows() != x.rows())
    throw ShapeError("importance_fn: y shape does not match");
  const std::size_t s_count = ens.size();
  Matrix acc(x.rows(), x.cols());
  for (std::size_t s = 0; s < s_count; ++s) {
    const MlpParams net = ens.particle_net(s);
    const std::vector<double> lambda = ens.particle_lambda(s);
    ForwardCache cache;
    const Matrix m = forward(net, x, &cache);
    Matrix g(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.rows(); ++i)
      for (std::size_t k = 0; k < y.cols(); ++k)
        g(i, k) = (y(i, k) - m(i, k)) / lambda[k];
    const Matrix gx = grad_input(cache, g);
    for (std::size_t i = 0; i < acc.rows(); ++i)
      for (std::size_t j = 0; j < acc.cols(); ++j) acc(i, j) += gx(i, j);
  }
  return acc * (1.0 / static_cast<double>(s_count));
}

inline std::vector<double> importance_fn(const ParticleEnsemble& ens,
                                         std::span<const double> x,
                                         std::span<const double> y) {
  Matrix xm(1, x.size(), std::vector<double>(x.begin(), x.end()));
  Matrix ym(1, y.size(), std::vector<double>(y.begin(), y.end()));
  const Matrix q = importance_fn_batch(ens, xm, ym);
  return std::vector<double>(q.row(0).begin(), q.row(0).end());
}

// Monte-Carlo importance measure: mean of |q(x*, y*)| over evaluation pairs.
inline ImportanceReport importance_measure(
    const ParticleEnsemble& ens, const Matrix& x_pairs, const Matrix& y_pairs,
    std::vector<std::pair<std::string, std::size_t>> blocks = {}) {
  if (x_pairs.rows() == 0) throw InvalidInput("importance_measure: no pairs");
  const Matrix q = importance_fn_batch(ens, x_pairs, y_pairs);

  ImportanceReport report;
  report.n_eval = x_pairs.rows();
  report.particles_used = ens.size();
  report.im.assign(x_pairs.cols(), 0.0);
  for (std::size_t i = 0; i < q.rows(); ++i)
    for (std::size_t j = 0; j < q.cols(); ++j) report.im[j] += std::abs(q(i, j));
  for (double& v : report.im) v /= static_cast<double>(report.n_eval);

  std::vector<std::size_t> order(report.im.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return report.im[a] > report.im[b];
  });
  report.rank.resize(report.im.size());
  for (std::size_t pos = 0; pos < order.size(); ++pos)
    report.rank[order[pos]] = pos + 1;

  if (blocks.empty()) blocks.emplace_back("x", x_pairs.cols());
  std::size_t covered = 0;
  for (const auto& [label, len] : blocks) covered += len;
  if (covered != x_pairs.cols())
    throw InvalidInput("importance_measure: block sizes do not cover dimensions");
  report.blocks = std::move(blocks);
  return report;
}

// Exact importance for the linear-Gaussian model y = B x + e, e ~ N(0,
// diag(lambda)): the score coordinate k is sum_j B_jk e_j / lambda_j, a
// zero-mean Gaussian with variance sum_j B_jk^2 / lambda_j independent of x,
// so IM_k = sqrt(2/pi) * sqrt(sum_j B_jk^2 / lambda_j). The scalar case
// reduces to sqrt(2/pi) |beta| / sqrt(lambda).
inline std::vector<double> linear_oracle_im(const Matrix& b,
                                            const std::vector<double>& lambda) {
  if (lambda.size() != b.rows())
    throw ShapeError("linear_oracle_im: lambda length must match outcome rows");
  for (double l : lambda)
    if (l <= 0.0) throw InvalidInput("linear_oracle_im: lambda must be > 0");
  std::vector<double> im(b.cols(), 0.0);
  for (std::size_t k = 0; k < b.cols(); ++k) {
    double v = 0.0;
    for (std::size_t j = 0; j < b.rows(); ++j) v += b(j, k) * b(j, k) / lambda[j];
    im[k] = std::sqrt(2.0 / 3.14159265358979323846) * std::sqrt(v);
  }
  return im;
}

}  // namespace birdgp
