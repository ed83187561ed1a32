#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>

#include "birdgp/pipeline.hpp"

using namespace birdgp;
namespace fs = std::filesystem;

namespace {

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.storage().data(), b.storage().data(),
                     a.storage().size() * sizeof(double)) == 0;
}

BasisSet random_basis(const VoxelGrid& grid, std::size_t k, unsigned seed) {
  Rng rng(seed);
  const Matrix raw = Matrix::random_normal(grid.num_voxels(), k, rng);
  BasisSet basis = orthonormalize(grid, raw, OrthoStrategy::svd);
  basis.eigenvalues.assign(k, 1.0);
  return basis;
}

PairedDataset scenario1_dataset(std::size_t n, std::size_t k, unsigned seed) {
  const VoxelGrid grid = VoxelGrid::lattice_2d(5, 5);
  ScenarioSpec spec;
  spec.scenario = 1;
  spec.n = n;
  spec.k_x = k;
  spec.k_y = k;
  Rng rng(seed);
  return simulate_scenario(spec, random_basis(grid, k, 11),
                           random_basis(grid, k, 12), rng);
}

ExperimentConfig smoke_config() {
  ExperimentConfig cfg;
  cfg.basis_method = "pca";
  cfg.k_x = 5;
  cfg.k_y = 5;
  cfg.gibbs_iters = 60;
  cfg.gibbs_burn_in = 20;
  cfg.svgd_particles = 4;
  cfg.svgd_epochs = 3;
  cfg.svgd_batch = 10;
  cfg.svgd_hidden = {8};
  cfg.svgd_activation = "tanh";
  cfg.seed = 9001;
  return cfg;
}

}  // namespace

TEST_CASE("stage timings use the fit command's five labels in order") {
  StageTimings t;
  t.kernel_learning_predictors = 1.0;
  t.kernel_learning_outcomes = 2.0;
  t.refit_predictor_coefficients = 3.0;
  t.refit_outcome_coefficients = 4.0;
  t.svgd = 5.0;
  const auto rows = t.rows();
  REQUIRE(rows.size() == 5);
  REQUIRE(rows[0].first == "kernel learning for predictors");
  REQUIRE(rows[1].first == "kernel learning for outcomes");
  REQUIRE(rows[2].first == "refitting predictor basis coefficients");
  REQUIRE(rows[3].first == "refitting outcome basis coefficients");
  REQUIRE(rows[4].first == "SVGD");
  for (std::size_t i = 0; i < 5; ++i)
    REQUIRE(rows[i].second == static_cast<double>(i + 1));
}

TEST_CASE("tiny smoke fit yields a coherent model, posterior, and trace") {
  const PairedDataset train = scenario1_dataset(20, 5, 41);
  const ExperimentConfig cfg = smoke_config();
  Rng rng(cfg.seed);
  const PipelineResult result = fit_bird_gp(train, cfg, rng);

  // Basis stage: one predictor channel, K = 5 orthonormal columns.
  REQUIRE(result.model.basis_x.size() == 1);
  REQUIRE(result.model.basis_x[0].num_components() == 5);
  REQUIRE(result.model.basis_y.num_components() == 5);
  const Matrix& psi = result.model.basis_x[0].psi;
  const Matrix gram = matmul_tn(psi, psi);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      REQUIRE(gram(i, j) == Catch::Approx(i == j ? 1.0 : 0.0).margin(1e-8));
  // pca basis skips the coordinate-network loss traces.
  REQUIRE(result.basis_loss_x[0].empty());
  REQUIRE(result.basis_loss_y.empty());

  // Stage 1 posteriors.
  REQUIRE(result.posterior_x.size() == 1);
  REQUIRE(result.posterior_x[0].coef_mean.rows() == 20);
  REQUIRE(result.posterior_x[0].coef_mean.cols() == 5);
  REQUIRE(result.posterior_x[0].retained == 40);
  REQUIRE(result.posterior_y.coef_mean.rows() == 20);
  REQUIRE(result.model.sigma2_x.size() == 1);
  REQUIRE(result.model.sigma2_x[0] > 0.0);
  REQUIRE(result.model.sigma2_y > 0.0);

  // Stage 2 ensemble and trace.
  REQUIRE(result.model.ensemble.size() == 4);
  REQUIRE(result.model.ensemble.layout.arch.input_dim() == 5);
  REQUIRE(result.model.ensemble.layout.k_y == 5);
  REQUIRE(result.svgd_trace.mean_log_post.size() == 3);
  REQUIRE(result.svgd_trace.bandwidth.size() == 3);
  for (double h : result.svgd_trace.bandwidth) REQUIRE(h > 0.0);

  // All five stages were timed.
  for (const auto& [name, seconds] : result.timings.rows()) {
    INFO(name);
    REQUIRE(seconds >= 0.0);
    REQUIRE(std::isfinite(seconds));
  }

  // Predictions reconstruct full images on the outcome grid.
  const Matrix pred = predict_mean(result.model, {train.channels[0]});
  REQUIRE(pred.rows() == 20);
  REQUIRE(pred.cols() == 25);
  for (double v : pred.storage()) REQUIRE(std::isfinite(v));
}

TEST_CASE("rerunning from the resolved config reproduces the fit bitwise") {
  const PairedDataset train = scenario1_dataset(20, 5, 42);
  const ExperimentConfig cfg = smoke_config();

  const fs::path dir = fs::temp_directory_path() / "birdgp_pipeline_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_resolved_config(dir / "resolved.config", cfg);
  const ExperimentConfig replay = load_config(dir / "resolved.config");

  Rng rng_a(cfg.seed);
  const PipelineResult a = fit_bird_gp(train, cfg, rng_a);
  Rng rng_b(replay.seed);
  const PipelineResult b = fit_bird_gp(train, replay, rng_b);

  REQUIRE(bitwise_equal(a.model.basis_x[0].psi, b.model.basis_x[0].psi));
  REQUIRE(bitwise_equal(a.posterior_x[0].coef_mean, b.posterior_x[0].coef_mean));
  REQUIRE(bitwise_equal(a.posterior_y.coef_mean, b.posterior_y.coef_mean));
  REQUIRE(bitwise_equal(a.model.ensemble.particles, b.model.ensemble.particles));
  REQUIRE(a.svgd_trace.mean_log_post == b.svgd_trace.mean_log_post);
  REQUIRE(bitwise_equal(predict_mean(a.model, {train.channels[0]}),
                        predict_mean(b.model, {train.channels[0]})));

  // A different seed must change the trained ensemble.
  ExperimentConfig other = cfg;
  other.seed = cfg.seed + 1;
  Rng rng_c(other.seed);
  const PipelineResult c = fit_bird_gp(train, other, rng_c);
  REQUIRE_FALSE(bitwise_equal(a.model.ensemble.particles,
                              c.model.ensemble.particles));
}

TEST_CASE("coordinate-network basis path records loss traces and the net") {
  PairedDataset train = scenario1_dataset(12, 3, 43);
  ExperimentConfig cfg = smoke_config();
  cfg.basis_method = "dnn";
  cfg.basis_hidden = {8};
  cfg.basis_activation = "tanh";
  cfg.basis_epochs = 4;
  cfg.basis_batch_voxels = 16;
  cfg.k_x = 3;
  cfg.k_y = 3;
  Rng rng(cfg.seed);
  const PipelineResult result = fit_bird_gp(train, cfg, rng);

  REQUIRE(result.basis_loss_x[0].size() == 4);
  REQUIRE(result.basis_loss_y.size() == 4);
  for (double l : result.basis_loss_x[0]) REQUIRE(std::isfinite(l));
  REQUIRE(result.model.basis_x[0].net.has_value());
  REQUIRE(result.model.basis_y.net.has_value());
  REQUIRE(result.model.basis_x[0].num_components() == 3);
}

TEST_CASE("extra channels and covariates widen the stage-2 input") {
  const std::size_t n = 18;
  Rng rng(77);
  const VoxelGrid grid_a = VoxelGrid::lattice_2d(5, 5);
  const VoxelGrid grid_b = VoxelGrid::lattice_2d(4, 4);
  const BasisSet ba = random_basis(grid_a, 3, 21);
  const BasisSet bb = random_basis(grid_b, 3, 22);
  const BasisSet by = random_basis(grid_a, 3, 23);

  PairedDataset train;
  train.channels = {matmul_nt(Matrix::random_normal(n, 3, rng), ba.psi),
                    matmul_nt(Matrix::random_normal(n, 3, rng), bb.psi)};
  train.channel_grids = {grid_a, grid_b};
  train.outcomes = matmul_nt(Matrix::random_normal(n, 3, rng), by.psi);
  train.outcome_grid = grid_a;
  train.covariates = Matrix::random_normal(n, 2, rng);

  ExperimentConfig cfg = smoke_config();
  cfg.k_x = 3;
  cfg.k_y = 3;
  Rng fit_rng(cfg.seed);
  const PipelineResult result = fit_bird_gp(train, cfg, fit_rng);

  REQUIRE(result.model.basis_x.size() == 2);
  REQUIRE(result.model.covariate_dim == 2);
  REQUIRE(result.model.ensemble.layout.arch.input_dim() == 3 + 3 + 2);
  REQUIRE(result.posterior_x.size() == 2);

  const Matrix pred = predict_mean(result.model, train.channels, train.covariates);
  REQUIRE(pred.rows() == n);
  REQUIRE(pred.cols() == grid_a.num_voxels());
  // Without the covariates the projection must refuse the width.
  REQUIRE_THROWS_AS(predict_mean(result.model, train.channels), ShapeError);
}

TEST_CASE("empty datasets are rejected before any stage runs") {
  const VoxelGrid grid = VoxelGrid::lattice_2d(5, 5);
  PairedDataset empty;
  empty.channels = {Matrix(0, 25)};
  empty.channel_grids = {grid};
  empty.outcomes = Matrix(0, 25);
  empty.outcome_grid = grid;
  ExperimentConfig cfg = smoke_config();
  Rng rng(1);
  REQUIRE_THROWS_AS(fit_bird_gp(empty, cfg, rng), InvalidInput);
}
