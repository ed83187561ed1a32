#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "birdgp/config.hpp"
#include "birdgp/data.hpp"
#include "birdgp/eval.hpp"
#include "birdgp/importance.hpp"
#include "birdgp/model_io.hpp"
#include "birdgp/pipeline.hpp"

namespace birdgp {

// Generating bases for the synthetic scenarios: smooth fixed-kernel bases on
// the configured lattice. The predictor basis carries geometrically decaying
// eigenvalues normalized so the average voxel variance is 1 (used when
// scenario 3 simulates predictor images); the outcome basis carries unit
// eigenvalues.
inline std::pair<BasisSet, BasisSet> make_scenario_bases(const ExperimentConfig& cfg) {
  const VoxelGrid grid = VoxelGrid::lattice_2d(cfg.grid_rows, cfg.grid_cols);
  const std::size_t k = std::max(cfg.truth_k_x, cfg.truth_k_y);
  if (k > grid.num_voxels())
    throw InvalidConfig("make_scenario_bases: K exceeds grid size");
  KernelConfig kx;
  kx.kind = BasisMethod::se;
  kx.length = 0.35;
  BasisSet basis_x = fixed_kernel_basis(grid, kx, k);
  KernelConfig ky;
  ky.kind = BasisMethod::se;
  ky.length = 0.55;
  BasisSet basis_y = fixed_kernel_basis(grid, ky, k);

  const double ratio = 0.9;
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) total += std::pow(ratio, static_cast<double>(i));
  const double scale = static_cast<double>(grid.num_voxels()) / total;
  basis_x.eigenvalues.resize(k);
  for (std::size_t i = 0; i < k; ++i)
    basis_x.eigenvalues[i] = scale * std::pow(ratio, static_cast<double>(i));
  basis_y.eigenvalues.assign(k, 1.0);
  return {std::move(basis_x), std::move(basis_y)};
}

namespace detail {

inline void save_scenario_truth(const fs::path& dir, const ScenarioTruth& truth) {
  fs::create_directories(dir);
  Manifest kv;
  kv["has_b"] = truth.b.rows() > 0 ? "1" : "0";
  kv["has_net"] = truth.net ? "1" : "0";
  kv["has_beta"] = truth.beta0.empty() ? "0" : "1";
  kv["has_lambda_y"] = truth.lambda_y.empty() ? "0" : "1";
  write_manifest(dir / "truth.manifest", kv);
  if (truth.b.rows() > 0) write_matrix(dir / "b.tensor", truth.b);
  if (!truth.lambda_y.empty()) write_vector(dir / "lambda_y.tensor", truth.lambda_y);
  if (truth.net) save_mlp(dir, "net", *truth.net);
  if (!truth.beta0.empty()) {
    write_vector(dir / "beta0.tensor", truth.beta0);
    write_vector(dir / "beta1.tensor", truth.beta1);
  }
  write_matrix(dir / "x_coefs.tensor", truth.x_coefs);
  if (truth.y_coefs.rows() > 0) write_matrix(dir / "y_coefs.tensor", truth.y_coefs);
}

inline PairedDataset simulate_one(const ExperimentConfig& cfg, std::size_t n,
                                  Rng& rng, ScenarioTruth* truth) {
  if (cfg.dataset == "scenario") {
    ScenarioSpec spec;
    spec.scenario = cfg.scenario;
    spec.n = n;
    spec.k_x = cfg.truth_k_x;
    spec.k_y = cfg.truth_k_y;
    spec.snr = cfg.snr;
    auto [bx, by] = make_scenario_bases(cfg);
    return simulate_scenario(spec, bx, by, rng, truth);
  }
  if (cfg.dataset == "mnist-arithmetic") {
    if (cfg.idx_images.empty() || cfg.idx_labels.empty())
      throw InvalidConfig("mnist-arithmetic needs idx_images and idx_labels");
    const IdxData source = load_idx(cfg.idx_images, cfg.idx_labels);
    return make_mnist_arithmetic(source, n, rng);
  }
  if (cfg.dataset == "quartile-split") {
    if (cfg.idx_images.empty())
      throw InvalidConfig("quartile-split needs idx_images");
    const IdxData source = load_idx(cfg.idx_images);
    if (source.images.rows() < n)
      throw InsufficientData("quartile-split: not enough source images");
    // Seed-shuffled subset of the source.
    std::vector<std::size_t> idx(source.images.rows());
    std::iota(idx.begin(), idx.end(), 0u);
    for (std::size_t i = idx.size(); i-- > 1;) {
      const std::size_t j = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(i)));
      std::swap(idx[i], idx[j]);
    }
    Matrix subset(n, source.images.cols());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < source.images.cols(); ++j)
        subset(i, j) = source.images(idx[i], j);
    return make_quartile_split(subset);
  }
  throw InvalidConfig("unknown dataset kind: " + cfg.dataset);
}

inline std::vector<int> load_labels_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open labels csv: " + path.string());
  std::vector<int> labels;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos) continue;
    labels.push_back(std::stoi(line.substr(comma + 1)));
  }
  return labels;
}

}  // namespace detail

// simulate: emit train/test datasets (and generator ground truth) under the
// output directory; replicates > 1 adds rep<k> levels with distinct streams.
inline int cmd_simulate(const ExperimentConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  write_resolved_config(out_dir / "resolved_config.manifest", cfg);
  Rng root(cfg.seed);
  for (std::size_t rep = 0; rep < cfg.replicates; ++rep) {
    const fs::path base =
        cfg.replicates == 1 ? out_dir : out_dir / ("rep" + std::to_string(rep));
    Rng rep_rng = root.child(2 * rep);
    ScenarioTruth truth;
    const bool want_truth = cfg.dataset == "scenario";
    // One cohort per replicate: train and test rows must share the same
    // generating truth (same map, same noise law) and, for subset-backed
    // datasets, come from disjoint source subjects.
    PairedDataset all = detail::simulate_one(cfg, cfg.n + cfg.n_test, rep_rng,
                                             want_truth ? &truth : nullptr);
    save_dataset(base / "train", take_rows(all, 0, cfg.n));
    if (cfg.n_test > 0)
      save_dataset(base / "test", take_rows(all, cfg.n, cfg.n + cfg.n_test));
    if (want_truth) detail::save_scenario_truth(base / "truth", truth);
  }
  return 0;
}

// fit: run the full two-stage pipeline on a dataset directory and persist the
// model, Stage-1 posteriors, traces, and the stage timing report.
inline int cmd_fit(const ExperimentConfig& cfg, const fs::path& data_dir,
                   const fs::path& out_dir) {
  const PairedDataset train = load_dataset(data_dir);
  fs::create_directories(out_dir);
  write_resolved_config(out_dir / "resolved_config.manifest", cfg);

  Rng rng(cfg.seed);
  const PipelineResult result = fit_bird_gp(train, cfg, rng);
  save_fitted_model(out_dir, result.model);
  for (std::size_t ch = 0; ch < result.posterior_x.size(); ++ch) {
    ProjectionPriors priors{cfg.a_sigma, cfg.b_sigma, cfg.a_lambda, cfg.b_lambda};
    save_posterior(out_dir, "posterior_x" + std::to_string(ch),
                   result.posterior_x[ch], priors);
  }
  {
    ProjectionPriors priors{cfg.a_sigma, cfg.b_sigma, cfg.a_lambda, cfg.b_lambda};
    save_posterior(out_dir, "posterior_y", result.posterior_y, priors);
  }

  {
    std::ofstream out(out_dir / "timing.csv");
    out << "stage,seconds\n" << std::setprecision(17);
    for (const auto& [stage, secs] : result.timings.rows())
      out << stage << ',' << secs << '\n';
    if (!out) throw IoError("cmd_fit: timing write failed");
  }
  for (const auto& [stage, secs] : result.timings.rows())
    std::cout << "timing: " << stage << ": " << std::setprecision(4) << secs
              << " s\n";
  for (std::size_t ch = 0; ch < result.basis_loss_x.size(); ++ch) {
    if (result.basis_loss_x[ch].empty()) continue;
    std::vector<std::vector<double>> rows;
    for (std::size_t e = 0; e < result.basis_loss_x[ch].size(); ++e)
      rows.push_back({static_cast<double>(e), result.basis_loss_x[ch][e]});
    write_csv(out_dir / ("basis_loss_x" + std::to_string(ch) + ".csv"),
              {"epoch", "mean_squared_residual"}, rows);
  }
  if (!result.basis_loss_y.empty()) {
    std::vector<std::vector<double>> rows;
    for (std::size_t e = 0; e < result.basis_loss_y.size(); ++e)
      rows.push_back({static_cast<double>(e), result.basis_loss_y[e]});
    write_csv(out_dir / "basis_loss_y.csv", {"epoch", "mean_squared_residual"}, rows);
  }
  if (!result.svgd_trace.mean_log_post.empty()) {
    std::vector<std::vector<double>> rows;
    for (std::size_t e = 0; e < result.svgd_trace.mean_log_post.size(); ++e)
      rows.push_back({static_cast<double>(e), result.svgd_trace.mean_log_post[e],
                      result.svgd_trace.bandwidth[e]});
    write_csv(out_dir / "svgd_trace.csv", {"epoch", "mean_log_posterior", "bandwidth"},
              rows);
  }
  return 0;
}

// predict: point predictions (always) plus credible intervals when a level is
// given; outputs land as tensors next to a manifest.
inline int cmd_predict(const fs::path& model_dir, const fs::path& data_dir,
                       const fs::path& out_dir, double interval_level,
                       std::size_t interval_replicates, std::uint64_t seed) {
  const FittedModel model = load_fitted_model(model_dir);
  const PairedDataset data = load_dataset(data_dir);
  fs::create_directories(out_dir);

  const Matrix pred = predict_mean(model, data.channels, data.covariates);
  write_matrix(out_dir / "predictions.tensor", pred);
  Manifest kv;
  kv["n"] = std::to_string(pred.rows());
  kv["voxels"] = std::to_string(pred.cols());
  kv["interval_level"] =
      interval_level > 0.0 ? detail::fmt_double(interval_level) : "none";
  write_manifest(out_dir / "predictions.manifest", kv);

  if (interval_level > 0.0) {
    Rng rng(seed);
    const IntervalPair iv =
        predict_interval(model, data.channels, data.covariates, interval_level,
                         rng, interval_replicates);
    write_matrix(out_dir / "interval_lo.tensor", iv.lo);
    write_matrix(out_dir / "interval_hi.tensor", iv.hi);
  }
  return 0;
}

// importance: evaluation pairs default to the projected training data; emits
// the per-dimension importance CSV with channel/covariate block labels.
inline int cmd_importance(const fs::path& model_dir, const fs::path& data_dir,
                          const fs::path& out_csv) {
  const FittedModel model = load_fitted_model(model_dir);
  const PairedDataset data = load_dataset(data_dir);

  const Matrix x_pairs = project_inputs(model, data.channels, data.covariates);
  Matrix y_images = data.outcomes;
  detail::subtract_center(model.basis_y, y_images);
  const Matrix y_pairs = project_new_batch(y_images, model.basis_y, model.sigma2_y);

  std::vector<std::pair<std::string, std::size_t>> blocks;
  for (std::size_t ch = 0; ch < model.basis_x.size(); ++ch)
    blocks.emplace_back("channel" + std::to_string(ch),
                        model.basis_x[ch].num_components());
  if (model.covariate_dim > 0) blocks.emplace_back("covariates", model.covariate_dim);

  const ImportanceReport report =
      importance_measure(model.ensemble, x_pairs, y_pairs, blocks);
  if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
  write_importance_csv(out_csv, report);
  return 0;
}

// evaluate: metric CSVs (MSE overall/per-label, a_i, p(alpha)) and the
// correlation heatmap; optional interval tensors add coverage.
inline int cmd_evaluate(const fs::path& pred_path, const fs::path& obs_path,
                        const fs::path& out_dir, const fs::path& labels_csv = {},
                        const fs::path& lo_path = {}, const fs::path& hi_path = {}) {
  const Matrix pred = read_matrix(pred_path);
  const Matrix obs = read_matrix(obs_path);
  fs::create_directories(out_dir);

  std::vector<int> labels;
  if (!labels_csv.empty()) labels = detail::load_labels_csv(labels_csv);

  const MseResult m = mse(pred, obs, labels);
  {
    std::vector<std::vector<double>> rows{{-1.0, m.overall}};
    for (const auto& [label, value] : m.per_label)
      rows.push_back({static_cast<double>(label), value});
    write_csv(out_dir / "mse.csv", {"label", "mse"}, rows);
  }

  const CorrelationMatrix cm = correlation_matrix(pred, obs);
  {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < cm.c.rows(); ++i) {
      std::vector<double> row(cm.c.row(i).begin(), cm.c.row(i).end());
      rows.push_back(std::move(row));
    }
    std::vector<std::string> header(cm.c.cols());
    for (std::size_t j = 0; j < cm.c.cols(); ++j)
      header[j] = "subject" + std::to_string(j);
    write_csv(out_dir / "correlation_matrix.csv", header, rows);
    Matrix heat = cm.c;
    for (std::size_t i = 0; i < heat.rows(); ++i)
      for (std::size_t j = 0; j < heat.cols(); ++j)
        if (cm.valid(i, j) == 0.0) heat(i, j) = 0.0;
    write_pgm(out_dir / "correlation_heatmap.pgm", heat);
  }

  std::vector<double> alphas;
  for (int a = 0; a < 20; ++a) alphas.push_back(0.05 * a);
  const AccuracyResult acc = accuracy_and_proportion(cm, alphas);
  {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < acc.a.size(); ++i)
      rows.push_back({static_cast<double>(i), acc.a[i]});
    write_csv(out_dir / "accuracy.csv", {"subject", "a"}, rows);
    rows.clear();
    for (std::size_t i = 0; i < alphas.size(); ++i)
      rows.push_back({alphas[i], acc.p[i]});
    write_csv(out_dir / "proportion_curve.csv", {"alpha", "p"}, rows);
  }

  if (!lo_path.empty() && !hi_path.empty()) {
    IntervalPair iv{read_matrix(lo_path), read_matrix(hi_path)};
    const CoverageResult cov = coverage(iv, obs);
    std::vector<std::vector<double>> rows{{-1.0, cov.mean_coverage}};
    for (std::size_t i = 0; i < cov.per_subject.size(); ++i)
      rows.push_back({static_cast<double>(i), cov.per_subject[i]});
    write_csv(out_dir / "coverage.csv", {"subject", "coverage"}, rows);
  }
  return 0;
}

// export-basis: one PGM per component, sized to the grid, in eigenvalue order
// (the stored column order) or reordered by an importance CSV.
inline int cmd_export_basis(const fs::path& model_dir, const std::string& which,
                            const fs::path& out_dir,
                            const fs::path& importance_csv = {}) {
  const FittedModel model = load_fitted_model(model_dir);
  const BasisSet* basis = nullptr;
  if (which == "outcome") {
    basis = &model.basis_y;
  } else if (which.rfind("channel", 0) == 0) {
    const std::size_t ch = std::stoul(which.substr(7));
    if (ch >= model.basis_x.size())
      throw InvalidConfig("export-basis: no such channel: " + which);
    basis = &model.basis_x[ch];
  } else {
    throw InvalidConfig("export-basis: target must be 'outcome' or 'channel<k>'");
  }

  std::vector<std::size_t> order(basis->num_components());
  std::iota(order.begin(), order.end(), 0u);
  if (!importance_csv.empty()) {
    std::ifstream in(importance_csv);
    if (!in) throw IoError("export-basis: cannot open " + importance_csv.string());
    std::string line;
    std::getline(in, line);  // header
    std::vector<std::pair<std::size_t, std::size_t>> dim_rank;
    while (std::getline(in, line)) {
      std::istringstream ss(line);
      std::string dim_s, im_s, rank_s;
      std::getline(ss, dim_s, ',');
      std::getline(ss, im_s, ',');
      std::getline(ss, rank_s, ',');
      dim_rank.emplace_back(std::stoul(dim_s), std::stoul(rank_s));
    }
    std::sort(dim_rank.begin(), dim_rank.end(),
              [](const auto& a, const auto& b) { return a.second < b.second; });
    order.clear();
    for (const auto& [dim, rank] : dim_rank)
      if (dim < basis->num_components()) order.push_back(dim);
  }

  fs::create_directories(out_dir);
  // Lattice grids render at their natural shape; 1-D grids as a single row.
  std::size_t rows = 1, cols = basis->num_voxels();
  if (basis->grid.dim == 2) {
    rows = static_cast<std::size_t>(basis->grid.axis_max[0] -
                                    basis->grid.axis_min[0]) + 1;
    cols = static_cast<std::size_t>(basis->grid.axis_max[1] -
                                    basis->grid.axis_min[1]) + 1;
    if (rows * cols != basis->num_voxels())
      throw InvalidState("export-basis: grid is not a full 2-D lattice");
  }
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const std::size_t c = order[pos];
    Matrix img(rows, cols);
    for (std::size_t v = 0; v < basis->num_voxels(); ++v)
      img.storage()[v] = basis->psi(v, c);
    write_pgm(out_dir / ("basis" + std::to_string(pos) + "_component" +
                         std::to_string(c) + ".pgm"),
              img);
  }
  return 0;
}

}  // namespace birdgp
