#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "birdgp/basis.hpp"
#include "birdgp/data.hpp"
#include "birdgp/eval.hpp"
#include "birdgp/importance.hpp"
#include "birdgp/projection.hpp"
#include "birdgp/svgd.hpp"
#include "birdgp/tensor_io.hpp"

namespace birdgp {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Network parameters: one tensor per layer, S_l x (S_{l-1} + 1) with the bias
// in the last column, plus an architecture manifest.

inline void save_mlp(const fs::path& dir, const std::string& name,
                     const MlpParams& params) {
  Manifest arch;
  std::ostringstream sizes;
  for (std::size_t i = 0; i < params.arch.layer_sizes.size(); ++i) {
    if (i) sizes << ',';
    sizes << params.arch.layer_sizes[i];
  }
  arch["layer_sizes"] = sizes.str();
  arch["activation"] = to_string(params.arch.activation);
  write_manifest(dir / (name + "_arch.manifest"), arch);
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    const Matrix& w = params.weights[l];
    Matrix aug(w.rows(), w.cols() + 1);
    for (std::size_t i = 0; i < w.rows(); ++i) {
      for (std::size_t j = 0; j < w.cols(); ++j) aug(i, j) = w(i, j);
      aug(i, w.cols()) = params.biases[l][i];
    }
    write_matrix(dir / (name + "_layer" + std::to_string(l) + ".tensor"), aug);
  }
}

inline MlpParams load_mlp(const fs::path& dir, const std::string& name) {
  const Manifest arch_kv = read_manifest(dir / (name + "_arch.manifest"));
  std::vector<std::size_t> sizes;
  std::istringstream ss(manifest_get(arch_kv, "layer_sizes"));
  std::string tok;
  while (std::getline(ss, tok, ','))
    sizes.push_back(static_cast<std::size_t>(std::stoull(tok)));
  MlpArch arch(sizes, activation_from_string(manifest_get(arch_kv, "activation")));
  MlpParams params(arch);
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    const Matrix aug =
        read_matrix(dir / (name + "_layer" + std::to_string(l) + ".tensor"));
    Matrix& w = params.weights[l];
    if (aug.rows() != w.rows() || aug.cols() != w.cols() + 1)
      throw FormatError("load_mlp: layer shape does not match architecture", 0);
    for (std::size_t i = 0; i < w.rows(); ++i) {
      for (std::size_t j = 0; j < w.cols(); ++j) w(i, j) = aug(i, j);
      params.biases[l][i] = aug(i, w.cols());
    }
  }
  return params;
}

// ---------------------------------------------------------------------------
// Basis sets.

inline void save_basis(const fs::path& dir, const std::string& prefix,
                       const BasisSet& basis) {
  write_matrix(dir / (prefix + "_grid.tensor"), basis.grid.coords);
  write_matrix(dir / (prefix + "_psi.tensor"), basis.psi);
  Manifest kv;
  kv["method"] = to_string(basis.method);
  kv["dim"] = std::to_string(basis.grid.dim);
  kv["voxels"] = std::to_string(basis.num_voxels());
  kv["components"] = std::to_string(basis.num_components());
  kv["has_eigenvalues"] = basis.eigenvalues.empty() ? "0" : "1";
  kv["has_net"] = basis.net ? "1" : "0";
  kv["has_center"] = basis.center.empty() ? "0" : "1";
  write_manifest(dir / (prefix + "_basis.manifest"), kv);
  if (!basis.eigenvalues.empty())
    write_vector(dir / (prefix + "_eigenvalues.tensor"), basis.eigenvalues);
  if (basis.net) {
    save_mlp(dir, prefix + "_net", *basis.net);
    write_matrix(dir / (prefix + "_mix.tensor"), basis.mix);
  }
  if (!basis.center.empty())
    write_vector(dir / (prefix + "_center.tensor"), basis.center);
}

inline BasisSet load_basis(const fs::path& dir, const std::string& prefix) {
  const Manifest kv = read_manifest(dir / (prefix + "_basis.manifest"));
  BasisSet basis;
  basis.grid = VoxelGrid(read_matrix(dir / (prefix + "_grid.tensor")));
  basis.psi = read_matrix(dir / (prefix + "_psi.tensor"));
  basis.method = basis_method_from_string(manifest_get(kv, "method"));
  if (manifest_get(kv, "has_eigenvalues") == "1")
    basis.eigenvalues = read_vector(dir / (prefix + "_eigenvalues.tensor"));
  if (manifest_get(kv, "has_net") == "1") {
    basis.net = load_mlp(dir, prefix + "_net");
    basis.mix = read_matrix(dir / (prefix + "_mix.tensor"));
  }
  if (manifest_get(kv, "has_center") == "1")
    basis.center = read_vector(dir / (prefix + "_center.tensor"));
  return basis;
}

// ---------------------------------------------------------------------------
// Stage-1 posteriors.

inline void save_posterior(const fs::path& dir, const std::string& prefix,
                           const ProjectionPosterior& post,
                           const ProjectionPriors& priors) {
  write_matrix(dir / (prefix + "_coef_mean.tensor"), post.coef_mean);
  write_matrix(dir / (prefix + "_coef_sd.tensor"), post.coef_sd);
  write_vector(dir / (prefix + "_sigma2.tensor"), post.sigma2_mean);
  write_vector(dir / (prefix + "_lambda.tensor"), post.lambda_mean);
  Manifest kv;
  kv["retained"] = std::to_string(post.retained);
  kv["burn_in"] = std::to_string(post.burn_in);
  kv["noise_floored"] = post.noise_floored ? "1" : "0";
  std::ostringstream a;
  a << std::setprecision(17) << priors.a_sigma;
  kv["a_sigma"] = a.str();
  auto fmt = [](double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
  };
  kv["b_sigma"] = fmt(priors.b_sigma);
  kv["a_lambda"] = fmt(priors.a_lambda);
  kv["b_lambda"] = fmt(priors.b_lambda);
  write_manifest(dir / (prefix + "_posterior.manifest"), kv);
}

inline ProjectionPosterior load_posterior(const fs::path& dir,
                                          const std::string& prefix) {
  ProjectionPosterior post;
  post.coef_mean = read_matrix(dir / (prefix + "_coef_mean.tensor"));
  post.coef_sd = read_matrix(dir / (prefix + "_coef_sd.tensor"));
  post.sigma2_mean = read_vector(dir / (prefix + "_sigma2.tensor"));
  post.lambda_mean = read_vector(dir / (prefix + "_lambda.tensor"));
  const Manifest kv = read_manifest(dir / (prefix + "_posterior.manifest"));
  post.retained = static_cast<std::size_t>(manifest_get_int(kv, "retained"));
  post.burn_in = static_cast<std::size_t>(manifest_get_int(kv, "burn_in"));
  post.noise_floored = manifest_get(kv, "noise_floored") == "1";
  return post;
}

// ---------------------------------------------------------------------------
// Particle ensembles.

inline void save_ensemble(const fs::path& dir, const std::string& prefix,
                          const ParticleEnsemble& ens) {
  write_matrix(dir / (prefix + "_particles.tensor"), ens.particles);
  Manifest kv;
  std::ostringstream sizes;
  for (std::size_t i = 0; i < ens.layout.arch.layer_sizes.size(); ++i) {
    if (i) sizes << ',';
    sizes << ens.layout.arch.layer_sizes[i];
  }
  kv["layer_sizes"] = sizes.str();
  kv["activation"] = to_string(ens.layout.arch.activation);
  kv["k_y"] = std::to_string(ens.layout.k_y);
  write_manifest(dir / (prefix + "_ensemble.manifest"), kv);
}

inline ParticleEnsemble load_ensemble(const fs::path& dir,
                                      const std::string& prefix) {
  const Manifest kv = read_manifest(dir / (prefix + "_ensemble.manifest"));
  std::vector<std::size_t> sizes;
  std::istringstream ss(manifest_get(kv, "layer_sizes"));
  std::string tok;
  while (std::getline(ss, tok, ','))
    sizes.push_back(static_cast<std::size_t>(std::stoull(tok)));
  ParticleEnsemble ens;
  ens.layout = ThetaLayout(
      MlpArch(sizes, activation_from_string(manifest_get(kv, "activation"))),
      static_cast<std::size_t>(manifest_get_int(kv, "k_y")));
  ens.particles = read_matrix(dir / (prefix + "_particles.tensor"));
  if (ens.particles.cols() != ens.layout.dim())
    throw FormatError("load_ensemble: particle width does not match layout", 0);
  return ens;
}

// ---------------------------------------------------------------------------
// Datasets.

inline void save_dataset(const fs::path& dir, const PairedDataset& ds) {
  ds.validate();
  fs::create_directories(dir);
  Manifest kv;
  kv["channels"] = std::to_string(ds.channels.size());
  kv["n"] = std::to_string(ds.size());
  kv["has_labels"] = ds.labels.empty() ? "0" : "1";
  kv["covariate_dim"] = std::to_string(ds.covariates.cols());
  write_manifest(dir / "dataset.manifest", kv);
  for (std::size_t c = 0; c < ds.channels.size(); ++c) {
    const std::string p = "channel" + std::to_string(c);
    write_matrix(dir / (p + ".tensor"), ds.channels[c]);
    write_matrix(dir / (p + "_grid.tensor"), ds.channel_grids[c].coords);
  }
  write_matrix(dir / "outcomes.tensor", ds.outcomes);
  write_matrix(dir / "outcomes_grid.tensor", ds.outcome_grid.coords);
  if (!ds.labels.empty()) {
    std::ofstream out(dir / "labels.csv");
    out << "index,label\n";
    for (std::size_t i = 0; i < ds.labels.size(); ++i)
      out << i << ',' << ds.labels[i] << '\n';
    if (!out) throw IoError("save_dataset: label write failed");
  }
  if (ds.covariates.cols() > 0)
    write_matrix(dir / "covariates.tensor", ds.covariates);
}

inline PairedDataset load_dataset(const fs::path& dir) {
  const Manifest kv = read_manifest(dir / "dataset.manifest");
  PairedDataset ds;
  const std::size_t channels =
      static_cast<std::size_t>(manifest_get_int(kv, "channels"));
  for (std::size_t c = 0; c < channels; ++c) {
    const std::string p = "channel" + std::to_string(c);
    ds.channels.push_back(read_matrix(dir / (p + ".tensor")));
    ds.channel_grids.emplace_back(read_matrix(dir / (p + "_grid.tensor")));
  }
  ds.outcomes = read_matrix(dir / "outcomes.tensor");
  ds.outcome_grid = VoxelGrid(read_matrix(dir / "outcomes_grid.tensor"));
  if (manifest_get(kv, "has_labels") == "1") {
    std::ifstream in(dir / "labels.csv");
    if (!in) throw IoError("load_dataset: cannot open labels.csv");
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      const std::size_t comma = line.find(',');
      if (comma == std::string::npos) continue;
      ds.labels.push_back(std::stoi(line.substr(comma + 1)));
    }
  }
  if (manifest_get_int(kv, "covariate_dim") > 0)
    ds.covariates = read_matrix(dir / "covariates.tensor");
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Fitted models.

inline void save_fitted_model(const fs::path& dir, const FittedModel& model) {
  model.validate();
  fs::create_directories(dir);
  Manifest kv;
  kv["predictor_channels"] = std::to_string(model.basis_x.size());
  kv["covariate_dim"] = std::to_string(model.covariate_dim);
  auto fmt = [](double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
  };
  kv["sigma2_y"] = fmt(model.sigma2_y);
  for (std::size_t c = 0; c < model.sigma2_x.size(); ++c)
    kv["sigma2_x" + std::to_string(c)] = fmt(model.sigma2_x[c]);
  write_manifest(dir / "model.manifest", kv);
  for (std::size_t c = 0; c < model.basis_x.size(); ++c)
    save_basis(dir, "basis_x" + std::to_string(c), model.basis_x[c]);
  save_basis(dir, "basis_y", model.basis_y);
  save_ensemble(dir, "stage2", model.ensemble);
}

inline FittedModel load_fitted_model(const fs::path& dir) {
  const Manifest kv = read_manifest(dir / "model.manifest");
  FittedModel model;
  const std::size_t channels =
      static_cast<std::size_t>(manifest_get_int(kv, "predictor_channels"));
  for (std::size_t c = 0; c < channels; ++c) {
    model.basis_x.push_back(load_basis(dir, "basis_x" + std::to_string(c)));
    model.sigma2_x.push_back(manifest_get_double(kv, "sigma2_x" + std::to_string(c)));
  }
  model.basis_y = load_basis(dir, "basis_y");
  model.sigma2_y = manifest_get_double(kv, "sigma2_y");
  model.covariate_dim =
      static_cast<std::size_t>(manifest_get_int(kv, "covariate_dim"));
  model.ensemble = load_ensemble(dir, "stage2");
  model.validate();
  return model;
}

// ---------------------------------------------------------------------------
// Figure-data emitters: binary PGM with a linear-scaling sidecar, and CSV.

inline void write_pgm(const fs::path& path, const Matrix& image) {
  double lo = image(0, 0), hi = image(0, 0);
  for (double v : image.storage()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_pgm: cannot open " + path.string());
  out << "P5\n" << image.cols() << ' ' << image.rows() << "\n255\n";
  for (double v : image.storage()) {
    const unsigned char b = static_cast<unsigned char>(
        std::lround(255.0 * (v - lo) / span));
    out.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!out) throw IoError("write_pgm: write failed");
  Manifest side;
  std::ostringstream lo_s, hi_s;
  lo_s << std::setprecision(17) << lo;
  hi_s << std::setprecision(17) << hi;
  side["intensity_min"] = lo_s.str();
  side["intensity_max"] = hi_s.str();
  side["scaling"] = "linear";
  write_manifest(path.string() + ".manifest", side);
}

inline void write_csv(const fs::path& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<double>>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("write_csv: cannot open " + path.string());
  out << std::setprecision(17);
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) out << ',';
    out << header[i];
  }
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out << ',';
      out << row[i];
    }
    out << '\n';
  }
  if (!out) throw IoError("write_csv: write failed");
}

inline void write_importance_csv(const fs::path& path,
                                 const ImportanceReport& report) {
  std::ofstream out(path);
  if (!out) throw IoError("write_importance_csv: cannot open " + path.string());
  out << std::setprecision(17) << "dimension,importance,rank,block\n";
  std::size_t offset = 0;
  for (const auto& [label, len] : report.blocks) {
    for (std::size_t j = 0; j < len; ++j) {
      const std::size_t d = offset + j;
      out << d << ',' << report.im[d] << ',' << report.rank[d] << ',' << label
          << '\n';
    }
    offset += len;
  }
  if (!out) throw IoError("write_importance_csv: write failed");
}

}  // namespace birdgp
