#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "birdgp/basis.hpp"
#include "birdgp/config.hpp"
#include "birdgp/data.hpp"
#include "birdgp/eval.hpp"
#include "birdgp/projection.hpp"
#include "birdgp/svgd.hpp"

namespace birdgp {

// Wall-clock seconds per training stage, named after the timing breakdown the
// fit command reports.
struct StageTimings {
  double kernel_learning_predictors = 0.0;
  double kernel_learning_outcomes = 0.0;
  double refit_predictor_coefficients = 0.0;
  double refit_outcome_coefficients = 0.0;
  double svgd = 0.0;

  std::vector<std::pair<std::string, double>> rows() const {
    return {{"kernel learning for predictors", kernel_learning_predictors},
            {"kernel learning for outcomes", kernel_learning_outcomes},
            {"refitting predictor basis coefficients", refit_predictor_coefficients},
            {"refitting outcome basis coefficients", refit_outcome_coefficients},
            {"SVGD", svgd}};
  }
};

struct PipelineResult {
  FittedModel model;
  std::vector<ProjectionPosterior> posterior_x;  // one per channel
  ProjectionPosterior posterior_y;
  StageTimings timings;
  std::vector<std::vector<double>> basis_loss_x;  // dnn method only
  std::vector<double> basis_loss_y;
  SvgdTrace svgd_trace;
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

inline BasisSet build_basis(const Matrix& images, const VoxelGrid& grid,
                            std::size_t k, const ExperimentConfig& cfg, Rng& rng,
                            std::vector<double>* loss_out) {
  const BasisMethod method = basis_method_from_string(cfg.basis_method);
  switch (method) {
    case BasisMethod::dnn: {
      BasisFitConfig fit_cfg;
      fit_cfg.hidden_sizes = cfg.basis_hidden;
      fit_cfg.activation = activation_from_string(cfg.basis_activation);
      fit_cfg.epochs = cfg.basis_epochs;
      fit_cfg.batch_voxels = cfg.basis_batch_voxels;
      fit_cfg.lr = cfg.basis_lr;
      fit_cfg.weight_decay = cfg.basis_weight_decay;
      fit_cfg.adam_restart = cfg.basis_adam_restart;
      const OrthoStrategy strategy = cfg.ortho == "svd" ? OrthoStrategy::svd
                                                        : OrthoStrategy::gram_schmidt;
      BasisFitResult fit;
      BasisSet basis = dnn_basis(images, grid, k, fit_cfg, rng, &fit, strategy);
      if (loss_out) *loss_out = fit.loss_trace;
      return basis;
    }
    case BasisMethod::pca:
      return pca_basis(images, grid, k);
    case BasisMethod::se:
    case BasisMethod::matern: {
      KernelConfig kc;
      kc.kind = method;
      kc.length = cfg.kernel_length;
      return fixed_kernel_basis(grid, kc, k);
    }
  }
  throw InvalidState("build_basis: unreachable");
}

}  // namespace detail

// Full two-stage fit: per-channel basis learning, Stage-1 Gibbs projection of
// predictors and outcomes, then Stage-2 SVGD on the projected pairs.
inline PipelineResult fit_bird_gp(const PairedDataset& train,
                                  const ExperimentConfig& cfg, Rng& rng) {
  train.validate();
  if (train.size() == 0) throw InvalidInput("fit_bird_gp: empty dataset");

  PipelineResult result;
  FittedModel& model = result.model;
  model.covariate_dim = train.covariates.cols();

  ProjectionPriors priors;
  priors.a_sigma = cfg.a_sigma;
  priors.b_sigma = cfg.b_sigma;
  priors.a_lambda = cfg.a_lambda;
  priors.b_lambda = cfg.b_lambda;
  GibbsOptions gibbs;
  gibbs.iters = cfg.gibbs_iters;
  gibbs.burn_in = cfg.gibbs_burn_in;
  gibbs.threads = cfg.threads;

  // Kernel learning (basis construction) per predictor channel.
  auto t0 = std::chrono::steady_clock::now();
  result.basis_loss_x.resize(train.channels.size());
  for (std::size_t ch = 0; ch < train.channels.size(); ++ch) {
    Rng basis_rng = rng.child(0x100 + ch);
    model.basis_x.push_back(detail::build_basis(train.channels[ch],
                                                train.channel_grids[ch], cfg.k_x,
                                                cfg, basis_rng,
                                                &result.basis_loss_x[ch]));
  }
  result.timings.kernel_learning_predictors = detail::seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  {
    Rng basis_rng = rng.child(0x200);
    model.basis_y = detail::build_basis(train.outcomes, train.outcome_grid,
                                        cfg.k_y, cfg, basis_rng,
                                        &result.basis_loss_y);
  }
  result.timings.kernel_learning_outcomes = detail::seconds_since(t0);

  // Stage 1: Gibbs refit of basis coefficients after orthogonalization.
  t0 = std::chrono::steady_clock::now();
  std::vector<Matrix> proj_x;
  for (std::size_t ch = 0; ch < model.basis_x.size(); ++ch) {
    // pca bases model centered images; other methods are uncentered.
    Matrix centered = train.channels[ch];
    if (!model.basis_x[ch].center.empty()) {
      for (std::size_t i = 0; i < centered.rows(); ++i)
        for (std::size_t j = 0; j < centered.cols(); ++j)
          centered(i, j) -= model.basis_x[ch].center[j];
    }
    Rng gibbs_rng = rng.child(0x300 + ch);
    result.posterior_x.push_back(
        gibbs_project(centered, model.basis_x[ch], priors, gibbs_rng, gibbs));
    model.sigma2_x.push_back(mean(result.posterior_x.back().sigma2_mean));
    proj_x.push_back(result.posterior_x.back().coef_mean);
  }
  result.timings.refit_predictor_coefficients = detail::seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  {
    Matrix centered = train.outcomes;
    if (!model.basis_y.center.empty()) {
      for (std::size_t i = 0; i < centered.rows(); ++i)
        for (std::size_t j = 0; j < centered.cols(); ++j)
          centered(i, j) -= model.basis_y.center[j];
    }
    Rng gibbs_rng = rng.child(0x400);
    result.posterior_y =
        gibbs_project(centered, model.basis_y, priors, gibbs_rng, gibbs);
    model.sigma2_y = mean(result.posterior_y.sigma2_mean);
  }
  result.timings.refit_outcome_coefficients = detail::seconds_since(t0);

  // Stage 2: SVGD over the Bayesian network on projected pairs.
  t0 = std::chrono::steady_clock::now();
  {
    std::size_t input_dim = model.covariate_dim;
    for (const auto& b : model.basis_x) input_dim += b.num_components();
    const std::size_t k_y = model.basis_y.num_components();

    Matrix z(train.size(), input_dim);
    std::size_t offset = 0;
    for (const Matrix& p : proj_x) {
      for (std::size_t i = 0; i < p.rows(); ++i)
        for (std::size_t c = 0; c < p.cols(); ++c) z(i, offset + c) = p(i, c);
      offset += p.cols();
    }
    for (std::size_t c = 0; c < model.covariate_dim; ++c)
      for (std::size_t i = 0; i < train.size(); ++i)
        z(i, offset + c) = train.covariates(i, c);

    std::vector<std::size_t> arch_sizes;
    arch_sizes.push_back(input_dim);
    for (std::size_t h : cfg.svgd_hidden) arch_sizes.push_back(h);
    arch_sizes.push_back(k_y);
    const ThetaLayout layout(
        MlpArch(arch_sizes, activation_from_string(cfg.svgd_activation)), k_y);

    SvgdConfig svgd_cfg;
    svgd_cfg.particles = cfg.svgd_particles;
    svgd_cfg.epochs = cfg.svgd_epochs;
    svgd_cfg.batch = cfg.svgd_batch;
    svgd_cfg.lr = cfg.svgd_lr;
    svgd_cfg.adam_restart = cfg.svgd_adam_restart;
    svgd_cfg.priors.a_w = cfg.a_w;
    svgd_cfg.priors.b_w = cfg.b_w;
    svgd_cfg.priors.a_lambda = cfg.a_lambda;
    svgd_cfg.priors.b_lambda = cfg.b_lambda;
    svgd_cfg.bandwidth_rule = bandwidth_rule_from_string(cfg.bandwidth_rule);
    svgd_cfg.threads = cfg.threads;

    Rng init_rng = rng.child(0x500);
    model.ensemble = init_ensemble(layout, svgd_cfg, init_rng,
                                   model.basis_y.eigenvalues);
    Rng fit_rng = rng.child(0x600);
    result.svgd_trace =
        svgd_fit(z, result.posterior_y.coef_mean, model.ensemble, svgd_cfg, fit_rng);
  }
  result.timings.svgd = detail::seconds_since(t0);

  model.validate();
  return result;
}

}  // namespace birdgp
