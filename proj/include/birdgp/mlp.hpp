#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "birdgp/matrix.hpp"
#include "birdgp/rng.hpp"

namespace birdgp {

enum class Activation { relu, tanh };

inline std::string to_string(Activation a) {
  return a == Activation::relu ? "relu" : "tanh";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw InvalidConfig("unknown activation: " + s);
}

// Layer sizes [S_0, ..., S_L]; hidden layers use `activation`, output linear.
struct MlpArch {
  std::vector<std::size_t> layer_sizes;
  Activation activation = Activation::relu;

  MlpArch() = default;
  MlpArch(std::vector<std::size_t> sizes, Activation act)
      : layer_sizes(std::move(sizes)), activation(act) {
    if (layer_sizes.size() < 2)
      throw InvalidInput("MlpArch: need at least input and output sizes");
    for (std::size_t s : layer_sizes)
      if (s == 0) throw InvalidInput("MlpArch: zero-width layer");
  }

  std::size_t num_layers() const { return layer_sizes.size() - 1; }
  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t output_dim() const { return layer_sizes.back(); }
  std::size_t num_params() const {
    std::size_t n = 0;
    for (std::size_t l = 1; l < layer_sizes.size(); ++l)
      n += layer_sizes[l] * (layer_sizes[l - 1] + 1);
    return n;
  }
  bool operator==(const MlpArch& o) const {
    return layer_sizes == o.layer_sizes && activation == o.activation;
  }
};

struct MlpParams {
  MlpArch arch;
  std::vector<Matrix> weights;  // W_l is [S_l x S_{l-1}]
  std::vector<std::vector<double>> biases;

  MlpParams() = default;
  explicit MlpParams(const MlpArch& a) : arch(a) {
    for (std::size_t l = 1; l < a.layer_sizes.size(); ++l) {
      weights.emplace_back(a.layer_sizes[l], a.layer_sizes[l - 1]);
      biases.emplace_back(a.layer_sizes[l], 0.0);
    }
  }
};

// He-normal for relu, Xavier for tanh; biases start at zero.
inline MlpParams init_params(const MlpArch& arch, Rng& rng) {
  MlpParams p(arch);
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    const double fan_in = static_cast<double>(arch.layer_sizes[l]);
    const double fan_out = static_cast<double>(arch.layer_sizes[l + 1]);
    const double sd = arch.activation == Activation::relu
                          ? std::sqrt(2.0 / fan_in)
                          : std::sqrt(2.0 / (fan_in + fan_out));
    for (double& w : p.weights[l].storage()) w = rng.normal() * sd;
  }
  return p;
}

// Layer-major, weights (row-major) then bias, per layer.
inline std::vector<double> flatten(const MlpParams& p) {
  std::vector<double> flat;
  flat.reserve(p.arch.num_params());
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    const auto& ws = p.weights[l].storage();
    flat.insert(flat.end(), ws.begin(), ws.end());
    flat.insert(flat.end(), p.biases[l].begin(), p.biases[l].end());
  }
  return flat;
}

inline MlpParams unflatten(const MlpArch& arch, const std::vector<double>& flat) {
  if (flat.size() != arch.num_params())
    throw ShapeError("unflatten: flat vector length does not match architecture");
  MlpParams p(arch);
  std::size_t pos = 0;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    auto& ws = p.weights[l].storage();
    std::copy(flat.begin() + pos, flat.begin() + pos + ws.size(), ws.begin());
    pos += ws.size();
    std::copy(flat.begin() + pos, flat.begin() + pos + p.biases[l].size(),
              p.biases[l].begin());
    pos += p.biases[l].size();
  }
  return p;
}

// Pre-activations and activations saved during forward for the backward pass.
struct ForwardCache {
  const MlpParams* params = nullptr;
  std::vector<Matrix> activations;  // activations[0] = X, last = output
  std::vector<Matrix> pre;          // pre[l] = Z_l before the nonlinearity
  bool valid() const { return params != nullptr; }
};

namespace detail {

inline double act_apply(Activation a, double z) {
  if (a == Activation::relu) return z > 0.0 ? z : 0.0;
  return std::tanh(z);
}

// relu'(0) is defined as 0.
inline double act_deriv(Activation a, double z) {
  if (a == Activation::relu) return z > 0.0 ? 1.0 : 0.0;
  const double t = std::tanh(z);
  return 1.0 - t * t;
}

}  // namespace detail

inline Matrix forward(const MlpParams& p, const Matrix& x,
                      ForwardCache* cache = nullptr) {
  if (x.cols() != p.arch.input_dim())
    throw ShapeError("forward: input width does not match architecture");
  if (!x.all_finite()) throw InvalidInput("forward: non-finite input");
  const std::size_t layers = p.weights.size();
  if (cache) {
    cache->params = &p;
    cache->activations.clear();
    cache->pre.clear();
    cache->activations.push_back(x);
  }
  Matrix a = x;
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix z = matmul_nt(a, p.weights[l]);
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += p.biases[l][j];
    if (cache) cache->pre.push_back(z);
    const bool last = (l + 1 == layers);
    if (!last)
      for (double& v : z.storage()) v = detail::act_apply(p.arch.activation, v);
    if (cache) cache->activations.push_back(z);
    a = std::move(z);
  }
  return a;
}

namespace detail {

// Shared reverse sweep. Fills delta for each layer; optionally accumulates
// parameter gradients (into grad_flat) and/or the input gradient.
inline void backward_sweep(const ForwardCache& cache, const Matrix& g,
                           std::vector<double>* grad_flat, Matrix* grad_x) {
  if (!cache.valid()) throw InvalidState("backward: forward cache not populated");
  const MlpParams& p = *cache.params;
  const std::size_t layers = p.weights.size();
  if (g.rows() != cache.activations.front().rows() ||
      g.cols() != p.arch.output_dim())
    throw ShapeError("backward: upstream gradient shape mismatch");

  if (grad_flat) grad_flat->assign(p.arch.num_params(), 0.0);
  std::size_t offsets_end = p.arch.num_params();

  Matrix delta = g;
  for (std::size_t l = layers; l-- > 0;) {
    if (l + 1 != layers) {
      const Matrix& z = cache.pre[l];
      for (std::size_t i = 0; i < delta.rows(); ++i)
        for (std::size_t j = 0; j < delta.cols(); ++j)
          delta(i, j) *= act_deriv(p.arch.activation, z(i, j));
    }
    if (grad_flat) {
      const std::size_t wsize = p.weights[l].storage().size();
      const std::size_t bsize = p.biases[l].size();
      offsets_end -= wsize + bsize;
      // dW_l = delta^T * A_{l-1}; db_l = column sums of delta.
      Matrix dw = matmul_tn(delta, cache.activations[l]);
      std::copy(dw.storage().begin(), dw.storage().end(),
                grad_flat->begin() + static_cast<std::ptrdiff_t>(offsets_end));
      for (std::size_t i = 0; i < delta.rows(); ++i)
        for (std::size_t j = 0; j < bsize; ++j)
          (*grad_flat)[offsets_end + wsize + j] += delta(i, j);
    }
    if (l > 0 || grad_x) delta = matmul(delta, p.weights[l]);
  }
  if (grad_x) *grad_x = std::move(delta);
}

}  // namespace detail

// Gradient of <G, forward(X)> with respect to the flat parameter vector,
// summed over the batch.
inline std::vector<double> grad_params(const ForwardCache& cache, const Matrix& g) {
  std::vector<double> out;
  detail::backward_sweep(cache, g, &out, nullptr);
  return out;
}

inline std::vector<double> grad_params(const MlpParams& p, const Matrix& x,
                                       const Matrix& g) {
  ForwardCache cache;
  forward(p, x, &cache);
  return grad_params(cache, g);
}

// Gradient of <G, forward(X)> with respect to X.
inline Matrix grad_input(const ForwardCache& cache, const Matrix& g) {
  Matrix out(0, 0);
  detail::backward_sweep(cache, g, nullptr, &out);
  return out;
}

inline Matrix grad_input(const MlpParams& p, const Matrix& x, const Matrix& g) {
  ForwardCache cache;
  forward(p, x, &cache);
  return grad_input(cache, g);
}

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double max_norm_clip = 0.0;  // 0 disables clipping
  std::int64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;

  AdamState() = default;
  AdamState(std::size_t dim, double learning_rate)
      : lr(learning_rate), m(dim, 0.0), v(dim, 0.0) {}
};

inline void adam_step(AdamState& state, std::vector<double>& params,
                      const std::vector<double>& grad) {
  if (params.size() != grad.size() || params.size() != state.m.size())
    throw ShapeError("adam_step: length mismatch");
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i]))
      throw NumericalFailure("adam_step: non-finite gradient",
                             static_cast<std::int64_t>(i));
  double scale = 1.0;
  if (state.max_norm_clip > 0.0) {
    const double nrm = norm2(grad);
    if (nrm > state.max_norm_clip) scale = state.max_norm_clip / nrm;
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double gi = grad[i] * scale;
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * gi;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * gi * gi;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

}  // namespace birdgp
