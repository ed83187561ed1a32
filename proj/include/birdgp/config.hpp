#pragma once

#include <filesystem>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "birdgp/basis.hpp"
#include "birdgp/svgd.hpp"
#include "birdgp/tensor_io.hpp"

namespace birdgp {

// Flat key=value experiment configuration. Every field has a default; unknown
// keys are rejected; the fully resolved set is echoed as an artifact so a run
// can be replayed from it alone.
struct ExperimentConfig {
  // dataset
  std::string dataset = "scenario";  // scenario | mnist-arithmetic | quartile-split | dir
  int scenario = 1;
  std::size_t n = 714;
  std::size_t n_test = 200;
  std::size_t truth_k_x = 50;
  std::size_t truth_k_y = 50;
  double snr = 0.5;
  std::size_t grid_rows = 20;
  std::size_t grid_cols = 20;
  std::string idx_images;
  std::string idx_labels;
  std::string dataset_dir;
  std::size_t replicates = 1;

  // basis learning
  std::string basis_method = "dnn";
  std::size_t k_x = 50;
  std::size_t k_y = 50;
  std::vector<std::size_t> basis_hidden = {128, 128, 128, 128};
  std::string basis_activation = "relu";
  std::size_t basis_epochs = 200;
  std::size_t basis_batch_voxels = 256;
  double basis_lr = 1e-3;
  double basis_weight_decay = 1e-4;
  std::size_t basis_adam_restart = 100;
  double kernel_length = 0.5;
  std::string ortho = "svd";

  // projection
  double a_sigma = 1.0;
  double b_sigma = 1.0;
  double a_lambda = 1.0;
  double b_lambda = 1.0;
  std::size_t gibbs_iters = 1000;
  std::size_t gibbs_burn_in = 200;

  // stage 2
  std::size_t svgd_particles = 20;
  std::size_t svgd_epochs = 30;
  std::size_t svgd_batch = 64;
  double svgd_lr = 1e-3;
  std::size_t svgd_adam_restart = 100;  // warm-restart interval; 0 = never
  std::vector<std::size_t> svgd_hidden = {200};
  std::string svgd_activation = "relu";
  double a_w = 1.0;
  double b_w = 10.0;
  std::string bandwidth_rule = "median_sq";

  // run control
  std::uint64_t seed = 1;
  int threads = 1;
  std::string output_dir = "out";
};

namespace detail {

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::ostringstream out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out << ',';
    out << v[i];
  }
  return out.str();
}

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::istringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
      throw InvalidConfig("bad size list entry: '" + tok + "'");
    out.push_back(static_cast<std::size_t>(std::stoull(tok)));
  }
  if (out.empty()) throw InvalidConfig("empty size list");
  return out;
}

inline std::string fmt_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

}  // namespace detail

inline Manifest to_manifest(const ExperimentConfig& c) {
  Manifest kv;
  kv["dataset"] = c.dataset;
  kv["scenario"] = std::to_string(c.scenario);
  kv["n"] = std::to_string(c.n);
  kv["n_test"] = std::to_string(c.n_test);
  kv["truth_k_x"] = std::to_string(c.truth_k_x);
  kv["truth_k_y"] = std::to_string(c.truth_k_y);
  kv["snr"] = detail::fmt_double(c.snr);
  kv["grid_rows"] = std::to_string(c.grid_rows);
  kv["grid_cols"] = std::to_string(c.grid_cols);
  kv["idx_images"] = c.idx_images;
  kv["idx_labels"] = c.idx_labels;
  kv["dataset_dir"] = c.dataset_dir;
  kv["replicates"] = std::to_string(c.replicates);
  kv["basis_method"] = c.basis_method;
  kv["k_x"] = std::to_string(c.k_x);
  kv["k_y"] = std::to_string(c.k_y);
  kv["basis_hidden"] = detail::join_sizes(c.basis_hidden);
  kv["basis_activation"] = c.basis_activation;
  kv["basis_epochs"] = std::to_string(c.basis_epochs);
  kv["basis_batch_voxels"] = std::to_string(c.basis_batch_voxels);
  kv["basis_lr"] = detail::fmt_double(c.basis_lr);
  kv["basis_weight_decay"] = detail::fmt_double(c.basis_weight_decay);
  kv["basis_adam_restart"] = std::to_string(c.basis_adam_restart);
  kv["kernel_length"] = detail::fmt_double(c.kernel_length);
  kv["ortho"] = c.ortho;
  kv["a_sigma"] = detail::fmt_double(c.a_sigma);
  kv["b_sigma"] = detail::fmt_double(c.b_sigma);
  kv["a_lambda"] = detail::fmt_double(c.a_lambda);
  kv["b_lambda"] = detail::fmt_double(c.b_lambda);
  kv["gibbs_iters"] = std::to_string(c.gibbs_iters);
  kv["gibbs_burn_in"] = std::to_string(c.gibbs_burn_in);
  kv["svgd_particles"] = std::to_string(c.svgd_particles);
  kv["svgd_epochs"] = std::to_string(c.svgd_epochs);
  kv["svgd_batch"] = std::to_string(c.svgd_batch);
  kv["svgd_lr"] = detail::fmt_double(c.svgd_lr);
  kv["svgd_adam_restart"] = std::to_string(c.svgd_adam_restart);
  kv["svgd_hidden"] = detail::join_sizes(c.svgd_hidden);
  kv["svgd_activation"] = c.svgd_activation;
  kv["a_w"] = detail::fmt_double(c.a_w);
  kv["b_w"] = detail::fmt_double(c.b_w);
  kv["bandwidth_rule"] = c.bandwidth_rule;
  kv["seed"] = std::to_string(c.seed);
  kv["threads"] = std::to_string(c.threads);
  kv["output_dir"] = c.output_dir;
  return kv;
}

inline ExperimentConfig config_from_manifest(const Manifest& kv) {
  ExperimentConfig c;
  const Manifest defaults = to_manifest(c);
  for (const auto& [key, value] : kv) {
    if (!defaults.count(key)) throw InvalidConfig("unknown config key: " + key);
    (void)value;
  }
  auto get_str = [&](const std::string& key, std::string& field) {
    auto it = kv.find(key);
    if (it != kv.end()) field = it->second;
  };
  auto get_size = [&](const std::string& key, std::size_t& field) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    if (it->second.empty() ||
        it->second.find_first_not_of("0123456789") != std::string::npos)
      throw InvalidConfig("config key '" + key + "' must be a non-negative integer");
    field = static_cast<std::size_t>(std::stoull(it->second));
  };
  auto get_double = [&](const std::string& key, double& field) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    try {
      std::size_t used = 0;
      field = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(it->second);
    } catch (const std::exception&) {
      throw InvalidConfig("config key '" + key + "' must be a number");
    }
  };
  auto get_int = [&](const std::string& key, int& field) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    try {
      field = std::stoi(it->second);
    } catch (const std::exception&) {
      throw InvalidConfig("config key '" + key + "' must be an integer");
    }
  };
  auto get_sizes = [&](const std::string& key, std::vector<std::size_t>& field) {
    auto it = kv.find(key);
    if (it != kv.end()) field = detail::parse_sizes(it->second);
  };

  get_str("dataset", c.dataset);
  get_int("scenario", c.scenario);
  get_size("n", c.n);
  get_size("n_test", c.n_test);
  get_size("truth_k_x", c.truth_k_x);
  get_size("truth_k_y", c.truth_k_y);
  get_double("snr", c.snr);
  get_size("grid_rows", c.grid_rows);
  get_size("grid_cols", c.grid_cols);
  get_str("idx_images", c.idx_images);
  get_str("idx_labels", c.idx_labels);
  get_str("dataset_dir", c.dataset_dir);
  get_size("replicates", c.replicates);
  get_str("basis_method", c.basis_method);
  get_size("k_x", c.k_x);
  get_size("k_y", c.k_y);
  get_sizes("basis_hidden", c.basis_hidden);
  get_str("basis_activation", c.basis_activation);
  get_size("basis_epochs", c.basis_epochs);
  get_size("basis_batch_voxels", c.basis_batch_voxels);
  get_double("basis_lr", c.basis_lr);
  get_double("basis_weight_decay", c.basis_weight_decay);
  get_size("basis_adam_restart", c.basis_adam_restart);
  get_double("kernel_length", c.kernel_length);
  get_str("ortho", c.ortho);
  get_double("a_sigma", c.a_sigma);
  get_double("b_sigma", c.b_sigma);
  get_double("a_lambda", c.a_lambda);
  get_double("b_lambda", c.b_lambda);
  get_size("gibbs_iters", c.gibbs_iters);
  get_size("gibbs_burn_in", c.gibbs_burn_in);
  get_size("svgd_particles", c.svgd_particles);
  get_size("svgd_epochs", c.svgd_epochs);
  get_size("svgd_batch", c.svgd_batch);
  get_double("svgd_lr", c.svgd_lr);
  get_size("svgd_adam_restart", c.svgd_adam_restart);
  get_sizes("svgd_hidden", c.svgd_hidden);
  get_str("svgd_activation", c.svgd_activation);
  get_double("a_w", c.a_w);
  get_double("b_w", c.b_w);
  get_str("bandwidth_rule", c.bandwidth_rule);
  {
    auto it = kv.find("seed");
    if (it != kv.end()) {
      if (it->second.empty() ||
          it->second.find_first_not_of("0123456789") != std::string::npos)
        throw InvalidConfig("config key 'seed' must be a non-negative integer");
      c.seed = std::stoull(it->second);
    }
  }
  get_int("threads", c.threads);
  get_str("output_dir", c.output_dir);

  // Eager validation of enumerated fields so errors surface at load time.
  basis_method_from_string(c.basis_method);
  activation_from_string(c.basis_activation);
  activation_from_string(c.svgd_activation);
  bandwidth_rule_from_string(c.bandwidth_rule);
  if (c.ortho != "svd" && c.ortho != "gram_schmidt")
    throw InvalidConfig("config key 'ortho' must be svd or gram_schmidt");
  if (c.threads < 1) throw InvalidConfig("config key 'threads' must be >= 1");
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  return config_from_manifest(read_manifest(path));
}

inline void write_resolved_config(const std::filesystem::path& path,
                                  const ExperimentConfig& c) {
  write_manifest(path, to_manifest(c));
}

}  // namespace birdgp
