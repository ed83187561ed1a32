#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <vector>

#include "birdgp/importance.hpp"
#include "oracles.hpp"

using birdgp::Matrix;
using birdgp::MlpArch;
using birdgp::MlpParams;
using birdgp::ParticleEnsemble;
using birdgp::Rng;
using birdgp::ThetaLayout;

namespace {

constexpr double kSqrt2OverPi = 0.7978845608028654;

// Single-particle ensemble realizing the linear-Gaussian model y = B x + e,
// e ~ N(0, diag(lambda)), as a one-layer network with weight matrix B.
ParticleEnsemble linear_ensemble(const Matrix& b, const std::vector<double>& lambda) {
  ParticleEnsemble ens;
  ens.layout = ThetaLayout(MlpArch({b.cols(), b.rows()}, birdgp::Activation::relu),
                           b.rows());
  ens.particles = Matrix(1, ens.layout.dim());
  MlpParams p(ens.layout.arch);
  p.weights[0] = b;
  const std::vector<double> flat = birdgp::flatten(p);
  for (std::size_t j = 0; j < flat.size(); ++j) ens.particles(0, j) = flat[j];
  ens.particles(0, ens.layout.sigma_index()) = 0.0;
  for (std::size_t k = 0; k < lambda.size(); ++k)
    ens.particles(0, ens.layout.lambda_index(k)) = std::log(lambda[k]);
  return ens;
}

// Pairs drawn from the linear model itself.
void simulate_linear_pairs(const Matrix& b, const std::vector<double>& lambda,
                           std::size_t n, Rng& rng, Matrix& x_out, Matrix& y_out) {
  x_out = Matrix::random_normal(n, b.cols(), rng);
  y_out = Matrix(n, b.rows());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double m = 0.0;
      for (std::size_t k = 0; k < b.cols(); ++k) m += b(j, k) * x_out(i, k);
      y_out(i, j) = m + std::sqrt(lambda[j]) * rng.normal();
    }
}

// Mean over particles of the Gaussian log density log N(y | net_s(x),
// diag(lambda_s)) for a single pair; finite-difference target for q.
double mean_log_density(const ParticleEnsemble& ens, const std::vector<double>& x,
                        const std::vector<double>& y) {
  constexpr double kLog2Pi = 1.8378770664093453;
  double total = 0.0;
  for (std::size_t s = 0; s < ens.size(); ++s) {
    const MlpParams net = ens.particle_net(s);
    const std::vector<double> lam = ens.particle_lambda(s);
    const Matrix m = birdgp::forward(net, Matrix(1, x.size(), x));
    for (std::size_t k = 0; k < y.size(); ++k) {
      const double r = y[k] - m(0, k);
      total += -0.5 * (r * r / lam[k] + std::log(lam[k]) + kLog2Pi);
    }
  }
  return total / static_cast<double>(ens.size());
}

}  // namespace

TEST_CASE("importance function matches hand algebra in the scalar linear case") {
  const double beta = 1.3, lambda = 0.49;
  Matrix b(1, 1);
  b(0, 0) = beta;
  const ParticleEnsemble ens = linear_ensemble(b, {lambda});

  Rng rng(101);
  for (int rep = 0; rep < 20; ++rep) {
    const double x = rng.normal(), y = rng.normal();
    const std::vector<double> q =
        birdgp::importance_fn(ens, std::vector<double>{x}, std::vector<double>{y});
    REQUIRE(q.size() == 1);
    REQUIRE(q[0] == Catch::Approx(beta * (y - beta * x) / lambda).margin(1e-12));
  }
}

TEST_CASE("constant networks carry zero importance") {
  // Zero first-layer weights make the network constant in x.
  ThetaLayout layout(MlpArch({3, 4, 2}, birdgp::Activation::tanh), 2);
  ParticleEnsemble ens;
  ens.layout = layout;
  ens.particles = Matrix(2, layout.dim());
  Rng rng(102);
  // Nonzero second layer and biases; first-layer weights stay zero.
  MlpParams p(layout.arch);
  p.weights[1] = Matrix::random_normal(2, 4, rng);
  p.biases[0].assign(4, 0.3);
  p.biases[1].assign(2, -0.2);
  const std::vector<double> flat = birdgp::flatten(p);
  for (std::size_t s = 0; s < 2; ++s) {
    for (std::size_t j = 0; j < flat.size(); ++j) ens.particles(s, j) = flat[j];
    for (std::size_t k = 0; k < 2; ++k)
      ens.particles(s, layout.lambda_index(k)) = std::log(0.5 + 0.5 * k);
  }

  const std::vector<double> q = birdgp::importance_fn(
      ens, std::vector<double>{0.4, -1.0, 2.0}, std::vector<double>{1.0, -0.5});
  for (double v : q) REQUIRE(v == 0.0);

  Rng pr(103);
  const Matrix xs = Matrix::random_normal(30, 3, pr);
  const Matrix ys = Matrix::random_normal(30, 2, pr);
  const birdgp::ImportanceReport rep = birdgp::importance_measure(ens, xs, ys);
  for (double v : rep.im) REQUIRE(v == 0.0);
  // Ranks remain a permutation of 1..K under total ties.
  std::vector<std::size_t> sorted_ranks = rep.rank;
  std::sort(sorted_ranks.begin(), sorted_ranks.end());
  for (std::size_t i = 0; i < sorted_ranks.size(); ++i)
    REQUIRE(sorted_ranks[i] == i + 1);
}

TEST_CASE("importance function matches finite differences of the log density") {
  const ThetaLayout layout(MlpArch({4, 6, 2}, birdgp::Activation::tanh), 2);
  birdgp::SvgdConfig cfg;
  cfg.particles = 3;
  cfg.priors.a_w = 3.0;
  cfg.priors.b_w = 2.0;
  Rng rng(104);
  const ParticleEnsemble ens = birdgp::init_ensemble(layout, cfg, rng);

  const std::vector<double> x{0.3, -0.8, 1.1, 0.2};
  const std::vector<double> y{0.5, -0.4};
  const std::vector<double> q = birdgp::importance_fn(ens, x, y);

  double worst = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double fd = oracles::central_diff(
        [&](const std::vector<double>& xp) { return mean_log_density(ens, xp, y); },
        x, j, 1e-5);
    worst = std::max(worst, oracles::rel_err(q[j], fd));
  }
  REQUIRE(worst < 1e-4);

  REQUIRE_THROWS_AS(
      birdgp::importance_fn(ens, std::vector<double>{1.0}, y), birdgp::ShapeError);
  REQUIRE_THROWS_AS(
      birdgp::importance_fn(ens, x, std::vector<double>{1.0}), birdgp::ShapeError);
}

TEST_CASE("scalar monte-carlo importance converges to the closed form") {
  const double beta = 1.7;
  Matrix b(1, 1);
  b(0, 0) = beta;
  const ParticleEnsemble ens = linear_ensemble(b, {1.0});

  Rng rng(105);
  Matrix xs, ys;
  simulate_linear_pairs(b, {1.0}, 100000, rng, xs, ys);
  const birdgp::ImportanceReport rep = birdgp::importance_measure(ens, xs, ys);
  REQUIRE(rep.n_eval == 100000);
  REQUIRE(rep.particles_used == 1);
  REQUIRE(rep.im[0] == Catch::Approx(kSqrt2OverPi * beta).epsilon(0.02));
}

TEST_CASE("importance report structure and invariances") {
  Rng rng(106);
  Matrix b(2, 5);
  for (double& e : b.storage()) e = rng.normal();
  const std::vector<double> lambda{0.8, 1.4};
  const ParticleEnsemble ens = linear_ensemble(b, lambda);

  Matrix xs, ys;
  simulate_linear_pairs(b, lambda, 400, rng, xs, ys);
  const birdgp::ImportanceReport rep = birdgp::importance_measure(ens, xs, ys);

  for (double v : rep.im) REQUIRE(v >= 0.0);
  std::vector<std::size_t> sorted_ranks = rep.rank;
  std::sort(sorted_ranks.begin(), sorted_ranks.end());
  for (std::size_t i = 0; i < sorted_ranks.size(); ++i)
    REQUIRE(sorted_ranks[i] == i + 1);
  REQUIRE(rep.blocks.size() == 1);
  REQUIRE(rep.blocks[0].first == "x");
  REQUIRE(rep.blocks[0].second == 5);

  // Permuting the evaluation pairs leaves the estimate unchanged.
  Matrix xs_rev(xs.rows(), xs.cols()), ys_rev(ys.rows(), ys.cols());
  for (std::size_t i = 0; i < xs.rows(); ++i) {
    const std::size_t r = xs.rows() - 1 - i;
    for (std::size_t j = 0; j < xs.cols(); ++j) xs_rev(i, j) = xs(r, j);
    for (std::size_t j = 0; j < ys.cols(); ++j) ys_rev(i, j) = ys(r, j);
  }
  const birdgp::ImportanceReport rev = birdgp::importance_measure(ens, xs_rev, ys_rev);
  for (std::size_t j = 0; j < rep.im.size(); ++j)
    REQUIRE(rev.im[j] == Catch::Approx(rep.im[j]).epsilon(1e-12));
  REQUIRE(rev.rank == rep.rank);

  // Labeled blocks must cover the input dimensions exactly.
  const birdgp::ImportanceReport labeled = birdgp::importance_measure(
      ens, xs, ys, {{"channels", 3}, {"covariates", 2}});
  REQUIRE(labeled.blocks.size() == 2);
  REQUIRE(labeled.blocks[1].first == "covariates");
  REQUIRE_THROWS_AS(
      birdgp::importance_measure(ens, xs, ys, {{"channels", 4}}),
      birdgp::InvalidInput);
  REQUIRE_THROWS_AS(birdgp::importance_measure(ens, Matrix(0, 5), Matrix(0, 2)),
                    birdgp::InvalidInput);
}

TEST_CASE("monte-carlo error halves when pairs quadruple") {
  Matrix b(1, 1);
  b(0, 0) = 1.3;
  const ParticleEnsemble ens = linear_ensemble(b, {1.0});

  const std::vector<std::size_t> sizes{500, 2000, 8000, 32000};
  const std::size_t reps = 60;
  Rng rng(107);
  std::vector<double> log_n, log_sd;
  for (std::size_t n : sizes) {
    std::vector<double> estimates;
    for (std::size_t r = 0; r < reps; ++r) {
      Matrix xs, ys;
      simulate_linear_pairs(b, {1.0}, n, rng, xs, ys);
      estimates.push_back(birdgp::importance_measure(ens, xs, ys).im[0]);
    }
    const double m =
        std::accumulate(estimates.begin(), estimates.end(), 0.0) / reps;
    double var = 0.0;
    for (double e : estimates) var += (e - m) * (e - m);
    var /= static_cast<double>(reps - 1);
    log_n.push_back(std::log(static_cast<double>(n)));
    log_sd.push_back(0.5 * std::log(var));
  }
  const double mean_x = std::accumulate(log_n.begin(), log_n.end(), 0.0) / 4.0;
  const double mean_y = std::accumulate(log_sd.begin(), log_sd.end(), 0.0) / 4.0;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    sxy += (log_n[i] - mean_x) * (log_sd[i] - mean_y);
    sxx += (log_n[i] - mean_x) * (log_n[i] - mean_x);
  }
  REQUIRE(sxy / sxx == Catch::Approx(-0.5).margin(0.1));
}

TEST_CASE("linear oracle importance closed form") {
  // Scalar case.
  Matrix b1(1, 1);
  b1(0, 0) = -2.5;
  const std::vector<double> im1 = birdgp::linear_oracle_im(b1, {1.0});
  REQUIRE(im1[0] == Catch::Approx(kSqrt2OverPi * 2.5).margin(1e-12));

  // Zero map.
  const std::vector<double> im0 = birdgp::linear_oracle_im(Matrix(3, 4), {1, 1, 1});
  for (double v : im0) REQUIRE(v == 0.0);

  // Diagonal B with unit noise decouples per coordinate.
  Matrix bd(3, 3);
  bd(0, 0) = 0.5;
  bd(1, 1) = -1.5;
  bd(2, 2) = 3.0;
  const std::vector<double> imd = birdgp::linear_oracle_im(bd, {1, 1, 1});
  REQUIRE(imd[0] == Catch::Approx(kSqrt2OverPi * 0.5).margin(1e-12));
  REQUIRE(imd[1] == Catch::Approx(kSqrt2OverPi * 1.5).margin(1e-12));
  REQUIRE(imd[2] == Catch::Approx(kSqrt2OverPi * 3.0).margin(1e-12));

  // General case against Monte Carlo over the score distribution with
  // independently drawn residuals.
  Rng rng(108);
  Matrix b(3, 4);
  for (double& e : b.storage()) e = rng.normal();
  const std::vector<double> lambda{0.5, 1.0, 2.0};
  const std::vector<double> want = birdgp::linear_oracle_im(b, lambda);
  const std::size_t draws = 200000;
  std::vector<double> mc(4, 0.0), mc_sq(4, 0.0);
  for (std::size_t d = 0; d < draws; ++d) {
    double e0 = std::sqrt(lambda[0]) * rng.normal();
    double e1 = std::sqrt(lambda[1]) * rng.normal();
    double e2 = std::sqrt(lambda[2]) * rng.normal();
    for (std::size_t k = 0; k < 4; ++k) {
      const double q = b(0, k) * e0 / lambda[0] + b(1, k) * e1 / lambda[1] +
                       b(2, k) * e2 / lambda[2];
      mc[k] += std::abs(q);
      mc_sq[k] += q * q;
    }
  }
  for (std::size_t k = 0; k < 4; ++k) {
    const double mean_abs = mc[k] / draws;
    const double var_abs = mc_sq[k] / draws - mean_abs * mean_abs;
    const double se = std::sqrt(var_abs / draws);
    REQUIRE(std::abs(mean_abs - want[k]) < 3.0 * se + 1e-12);
  }

  REQUIRE_THROWS_AS(birdgp::linear_oracle_im(b, {1.0, 1.0}), birdgp::ShapeError);
  REQUIRE_THROWS_AS(birdgp::linear_oracle_im(b, {1.0, -1.0, 1.0}),
                    birdgp::InvalidInput);
}

TEST_CASE("estimated importance tracks the oracle for a multivariate map") {
  Rng rng(109);
  Matrix b(3, 12);
  for (double& e : b.storage()) e = rng.normal();
  // Scale columns unevenly so the oracle has a wide dynamic range.
  for (std::size_t k = 0; k < 12; ++k) {
    const double scale = std::pow(0.75, static_cast<double>(k));
    for (std::size_t j = 0; j < 3; ++j) b(j, k) *= scale;
  }
  const std::vector<double> lambda{1.0, 1.0, 1.0};
  const ParticleEnsemble ens = linear_ensemble(b, lambda);
  const std::vector<double> oracle = birdgp::linear_oracle_im(b, lambda);

  Matrix xs, ys;
  simulate_linear_pairs(b, lambda, 20000, rng, xs, ys);
  const birdgp::ImportanceReport rep = birdgp::importance_measure(ens, xs, ys);

  for (std::size_t k = 0; k < 12; ++k)
    REQUIRE(rep.im[k] == Catch::Approx(oracle[k]).epsilon(0.05));
  REQUIRE(oracles::pearson_ref(rep.im, oracle) > 0.95);
}
