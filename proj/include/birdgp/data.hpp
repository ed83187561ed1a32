#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include "birdgp/basis.hpp"
#include "birdgp/matrix.hpp"
#include "birdgp/projection.hpp"
#include "birdgp/rng.hpp"
#include "birdgp/stats.hpp"

namespace birdgp {

struct PairedDataset {
  std::vector<Matrix> channels;         // predictor images, one matrix per channel
  std::vector<VoxelGrid> channel_grids;
  Matrix outcomes{0, 0};
  VoxelGrid outcome_grid;
  std::vector<int> labels;     // optional, empty when absent
  Matrix covariates{0, 0};     // optional, zero columns when absent

  std::size_t size() const { return outcomes.rows(); }
  void validate() const {
    if (channels.size() != channel_grids.size())
      throw InvalidState("PairedDataset: channel/grid count mismatch");
    for (std::size_t c = 0; c < channels.size(); ++c) {
      if (channels[c].rows() != size())
        throw InvalidState("PairedDataset: channel row count mismatch");
      if (channels[c].cols() != channel_grids[c].num_voxels())
        throw InvalidState("PairedDataset: channel width does not match grid");
    }
    if (outcomes.cols() != outcome_grid.num_voxels())
      throw InvalidState("PairedDataset: outcome width does not match grid");
    if (!labels.empty() && labels.size() != size())
      throw InvalidState("PairedDataset: label count mismatch");
    if (covariates.cols() > 0 && covariates.rows() != size())
      throw InvalidState("PairedDataset: covariate row count mismatch");
  }
};

// Copy of subject rows [begin, end); grids and channel structure carry over.
// Splitting one simulated cohort this way keeps train and test under the same
// generating truth (and, for subset-backed datasets, disjoint subjects).
inline PairedDataset take_rows(const PairedDataset& d, std::size_t begin,
                               std::size_t end) {
  if (begin > end || end > d.size())
    throw InvalidInput("take_rows: range exceeds dataset");
  const std::size_t n = end - begin;
  PairedDataset out;
  out.channel_grids = d.channel_grids;
  out.outcome_grid = d.outcome_grid;
  const auto slice = [&](const Matrix& m) {
    Matrix s(n, m.cols());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) s(i, j) = m(begin + i, j);
    return s;
  };
  for (const Matrix& ch : d.channels) out.channels.push_back(slice(ch));
  out.outcomes = slice(d.outcomes);
  if (d.covariates.cols() > 0) out.covariates = slice(d.covariates);
  if (!d.labels.empty())
    out.labels.assign(d.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                      d.labels.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

// ---------------------------------------------------------------------------
// IDX container parsing (big-endian magic + dims, unsigned-byte pixels).

struct IdxData {
  Matrix images{0, 0};  // n x (rows*cols), intensities scaled to [0, 1]
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<int> labels;  // empty unless a label file was supplied
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, std::int64_t offset) {
  unsigned char buf[4];
  if (!in.read(reinterpret_cast<char*>(buf), 4))
    throw FormatError("idx: truncated header", offset);
  return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
         (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  const unsigned char buf[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(buf), 4);
}

}  // namespace detail

inline IdxData load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path = {}) {
  std::ifstream in(images_path, std::ios::binary);
  if (!in) throw IoError("load_idx: cannot open " + images_path.string());
  const std::uint32_t magic = detail::read_be32(in, 0);
  if (magic != 0x00000803u)
    throw FormatError("load_idx: bad image magic in " + images_path.string(), 0);
  const std::uint32_t n = detail::read_be32(in, 4);
  const std::uint32_t rows = detail::read_be32(in, 8);
  const std::uint32_t cols = detail::read_be32(in, 12);
  if (n == 0 || rows == 0 || cols == 0)
    throw FormatError("load_idx: zero dimension", 4);

  IdxData out;
  out.rows = rows;
  out.cols = cols;
  out.images = Matrix(n, static_cast<std::size_t>(rows) * cols);
  std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    if (!in.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size())))
      throw FormatError("load_idx: truncated pixel payload",
                        16 + static_cast<std::int64_t>(i) *
                                 static_cast<std::int64_t>(buf.size()));
    for (std::size_t j = 0; j < buf.size(); ++j)
      out.images(i, j) = static_cast<double>(buf[j]) / 255.0;
  }

  if (!labels_path.empty()) {
    std::ifstream lin(labels_path, std::ios::binary);
    if (!lin) throw IoError("load_idx: cannot open " + labels_path.string());
    const std::uint32_t lmagic = detail::read_be32(lin, 0);
    if (lmagic != 0x00000801u)
      throw FormatError("load_idx: bad label magic in " + labels_path.string(), 0);
    const std::uint32_t ln = detail::read_be32(lin, 4);
    if (ln != n)
      throw FormatError("load_idx: image/label count mismatch", 4);
    out.labels.resize(ln);
    for (std::uint32_t i = 0; i < ln; ++i) {
      char b;
      if (!lin.read(&b, 1))
        throw FormatError("load_idx: truncated label payload",
                          8 + static_cast<std::int64_t>(i));
      out.labels[i] = static_cast<unsigned char>(b);
    }
  }
  return out;
}

inline void write_idx(const std::filesystem::path& images_path, const Matrix& images,
                      std::size_t rows, std::size_t cols,
                      const std::filesystem::path& labels_path = {},
                      const std::vector<int>& labels = {}) {
  if (images.cols() != rows * cols)
    throw ShapeError("write_idx: image width does not match rows*cols");
  std::ofstream out(images_path, std::ios::binary);
  if (!out) throw IoError("write_idx: cannot open " + images_path.string());
  detail::write_be32(out, 0x00000803u);
  detail::write_be32(out, static_cast<std::uint32_t>(images.rows()));
  detail::write_be32(out, static_cast<std::uint32_t>(rows));
  detail::write_be32(out, static_cast<std::uint32_t>(cols));
  for (std::size_t i = 0; i < images.rows(); ++i) {
    for (std::size_t j = 0; j < images.cols(); ++j) {
      const double v = std::clamp(images(i, j), 0.0, 1.0);
      const unsigned char b =
          static_cast<unsigned char>(std::lround(v * 255.0));
      out.write(reinterpret_cast<const char*>(&b), 1);
    }
  }
  if (!out) throw IoError("write_idx: write failed");

  if (!labels_path.empty()) {
    if (labels.size() != images.rows())
      throw ShapeError("write_idx: label count mismatch");
    std::ofstream lout(labels_path, std::ios::binary);
    if (!lout) throw IoError("write_idx: cannot open " + labels_path.string());
    detail::write_be32(lout, 0x00000801u);
    detail::write_be32(lout, static_cast<std::uint32_t>(labels.size()));
    for (int l : labels) {
      const unsigned char b = static_cast<unsigned char>(l);
      lout.write(reinterpret_cast<const char*>(&b), 1);
    }
    if (!lout) throw IoError("write_idx: write failed");
  }
}

// ---------------------------------------------------------------------------
// Digit-arithmetic pairing: predictor = ["2" | sign glyph | "1"], outcome =
// "3" under +, "1" under -. Digits are drawn without replacement within one
// generated dataset.

struct GlyphConfig {
  int length_min = 12, length_max = 20;     // bar length (pixels)
  int thickness_min = 2, thickness_max = 4;
  int jitter = 3;                            // center offset ~ U{-jitter..jitter}
};

namespace detail {

inline void paint_bar(Matrix& panel, std::size_t row0, std::size_t col0, int r_center,
                      int c_center, int half_len, int thickness, bool horizontal) {
  const int lo_t = -(thickness - 1) / 2, hi_t = thickness / 2;
  for (int t = lo_t; t <= hi_t; ++t) {
    for (int l = -half_len; l <= half_len; ++l) {
      const int r = horizontal ? r_center + t : r_center + l;
      const int c = horizontal ? c_center + l : c_center + t;
      if (r < 0 || r >= 28 || c < 0 || c >= 28) continue;
      panel(row0 + static_cast<std::size_t>(r), col0 + static_cast<std::size_t>(c)) =
          1.0;
    }
  }
}

inline void paint_glyph(Matrix& stack, std::size_t row_offset, std::size_t col_offset,
                        bool plus, const GlyphConfig& g, Rng& rng) {
  auto draw_bar = [&](bool horizontal) {
    const int len = static_cast<int>(rng.uniform_int(g.length_min, g.length_max));
    const int thick =
        static_cast<int>(rng.uniform_int(g.thickness_min, g.thickness_max));
    const int dr = static_cast<int>(rng.uniform_int(-g.jitter, g.jitter));
    const int dc = static_cast<int>(rng.uniform_int(-g.jitter, g.jitter));
    paint_bar(stack, row_offset, col_offset, 14 + dr, 14 + dc, len / 2, thick,
              horizontal);
  };
  draw_bar(true);
  if (plus) draw_bar(false);
}

}  // namespace detail

inline PairedDataset make_mnist_arithmetic(const IdxData& source, std::size_t n,
                                           Rng& rng, const GlyphConfig& glyph = {}) {
  if (source.rows != 28 || source.cols != 28)
    throw InvalidInput("make_mnist_arithmetic: source images must be 28x28");
  if (source.labels.size() != source.images.rows())
    throw InvalidInput("make_mnist_arithmetic: source must be labeled");

  std::vector<std::size_t> pool1, pool2, pool3;
  for (std::size_t i = 0; i < source.labels.size(); ++i) {
    if (source.labels[i] == 1) pool1.push_back(i);
    if (source.labels[i] == 2) pool2.push_back(i);
    if (source.labels[i] == 3) pool3.push_back(i);
  }
  auto shuffle_pool = [&](std::vector<std::size_t>& pool) {
    for (std::size_t i = pool.size(); i-- > 1;) {
      const std::size_t j = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(i)));
      std::swap(pool[i], pool[j]);
    }
  };
  shuffle_pool(pool1);
  shuffle_pool(pool2);
  shuffle_pool(pool3);
  std::size_t next1 = 0, next2 = 0, next3 = 0;
  auto take = [](const std::vector<std::size_t>& pool, std::size_t& next,
                 const char* what) {
    if (next >= pool.size())
      throw InsufficientData(std::string("make_mnist_arithmetic: ran out of ") + what);
    return pool[next++];
  };

  PairedDataset out;
  out.channels.emplace_back(n, 28 * 84);
  out.channel_grids.push_back(VoxelGrid::lattice_2d(28, 84));
  out.outcomes = Matrix(n, 28 * 28);
  out.outcome_grid = VoxelGrid::lattice_2d(28, 28);
  out.labels.resize(n);

  Matrix& stack = out.channels.front();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t two = take(pool2, next2, "digit-2 images");
    const std::size_t one = take(pool1, next1, "digit-1 images");
    const bool plus = rng.uniform() < 0.5;

    for (std::size_t r = 0; r < 28; ++r) {
      for (std::size_t c = 0; c < 28; ++c) {
        stack(i, r * 84 + c) = source.images(two, r * 28 + c);
        stack(i, r * 84 + 56 + c) = source.images(one, r * 28 + c);
      }
    }
    // Middle panel: paint into a row-major 28x84 view at column offset 28.
    {
      Matrix row_view(28, 84, std::vector<double>(stack.row(i).begin(),
                                                  stack.row(i).end()));
      detail::paint_glyph(row_view, 0, 28, plus, glyph, rng);
      std::copy(row_view.storage().begin(), row_view.storage().end(),
                stack.row(i).begin());
    }

    const std::size_t target =
        plus ? take(pool3, next3, "digit-3 images") : take(pool1, next1, "digit-1 images");
    for (std::size_t j = 0; j < 28 * 28; ++j)
      out.outcomes(i, j) = source.images(target, j);
    out.labels[i] = plus ? 3 : 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Quartile split: each image becomes four panels holding its nonzero values
// binned by the quartiles of that image's nonzero intensities (half-open bins,
// last closed); the outcome is the original image.

inline PairedDataset make_quartile_split(const Matrix& images,
                                         std::vector<std::uint8_t>* degenerate_flags =
                                             nullptr) {
  if (images.cols() != 784)
    throw InvalidInput("make_quartile_split: expects 28x28 images");
  const std::size_t n = images.rows();
  PairedDataset out;
  out.channels.emplace_back(n, 28 * 112);
  out.channel_grids.push_back(VoxelGrid::lattice_2d(28, 112));
  out.outcomes = images;
  out.outcome_grid = VoxelGrid::lattice_2d(28, 28);
  if (degenerate_flags) degenerate_flags->assign(n, 0);

  Matrix& stack = out.channels.front();
  std::vector<double> nz;
  for (std::size_t i = 0; i < n; ++i) {
    nz.clear();
    for (std::size_t j = 0; j < 784; ++j)
      if (images(i, j) != 0.0) nz.push_back(images(i, j));
    if (nz.empty()) {
      if (degenerate_flags) (*degenerate_flags)[i] = 1;
      continue;  // four zero panels
    }

    std::sort(nz.begin(), nz.end());
    std::vector<double> distinct(nz);
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (degenerate_flags && distinct.size() < 4) (*degenerate_flags)[i] = 1;

    const double q0 = nz.front();
    const double q1 = quantile_sorted(nz, 0.25);
    const double q2 = quantile_sorted(nz, 0.50);
    const double q3 = quantile_sorted(nz, 0.75);
    const double q4 = nz.back();
    const double edges[5] = {q0, q1, q2, q3, q4};

    for (std::size_t r = 0; r < 28; ++r) {
      for (std::size_t c = 0; c < 28; ++c) {
        const double v = images(i, r * 28 + c);
        if (v == 0.0) continue;
        std::size_t bin = 3;  // last bin is closed on the right
        for (std::size_t k = 0; k < 3; ++k) {
          if (v >= edges[k] && v < edges[k + 1]) {
            bin = k;
            break;
          }
        }
        stack(i, r * 112 + bin * 28 + c) = v;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenarios.

struct ScenarioSpec {
  int scenario = 1;
  std::size_t n = 714;
  std::size_t k_x = 50;
  std::size_t k_y = 50;
  double snr = 0.5;  // scenario 2: per-dimension Var(mean) / lambda
};

struct ScenarioTruth {
  Matrix b{0, 0};                    // scenario 1 linear map
  std::vector<double> lambda_y;      // scenarios 1-2 conditional noise
  std::optional<MlpParams> net;      // scenario 2 mean network
  std::vector<double> beta0, beta1;  // scenario 3 voxelwise coefficients
  Matrix x_coefs{0, 0};              // generating coefficients (scenarios 1-2)
  Matrix y_coefs{0, 0};
};

// Scenario 1 linear map: entries N(0,1) scaled by a per-column factor
// decaying linearly from 1 to 0.05, so the input dimensions carry clearly
// distinguishable importances.
inline Matrix scenario1_b(std::size_t k_y, std::size_t k_x, Rng& rng) {
  Matrix b(k_y, k_x);
  for (std::size_t k = 0; k < k_x; ++k) {
    const double frac =
        k_x > 1 ? static_cast<double>(k) / static_cast<double>(k_x - 1) : 0.0;
    const double scale = 1.0 + frac * (0.05 - 1.0);
    for (std::size_t j = 0; j < k_y; ++j) b(j, k) = rng.normal() * scale;
  }
  return b;
}

// Scenario 2 mean network: a fixed random tanh network standing in for the
// "trained" nonlinear map; weights scaled for O(1) outputs on N(0,1) inputs.
inline MlpParams scenario2_net(std::size_t k_x, std::size_t k_y, Rng& rng) {
  MlpArch arch({k_x, 32, k_y}, Activation::tanh);
  MlpParams net = init_params(arch, rng);
  for (auto& b : net.biases)
    for (double& v : b) v = rng.normal() * 0.3;
  return net;
}

inline PairedDataset simulate_scenario(const ScenarioSpec& spec,
                                       const BasisSet& basis_x,
                                       const BasisSet& basis_y, Rng& rng,
                                       ScenarioTruth* truth_out = nullptr) {
  if (spec.n == 0) throw InvalidInput("simulate_scenario: n must be >= 1");
  PairedDataset out;
  ScenarioTruth truth;

  if (spec.scenario == 1 || spec.scenario == 2) {
    if (spec.k_x > basis_x.num_components() || spec.k_y > basis_y.num_components())
      throw InvalidConfig("simulate_scenario: K exceeds basis components");

    truth.x_coefs = Matrix::random_normal(spec.n, spec.k_x, rng);
    Matrix mean(spec.n, spec.k_y);
    if (spec.scenario == 1) {
      truth.b = scenario1_b(spec.k_y, spec.k_x, rng);
      mean = matmul_nt(truth.x_coefs, truth.b);
      truth.lambda_y.assign(spec.k_y, 1.0);
    } else {
      truth.net = scenario2_net(spec.k_x, spec.k_y, rng);
      mean = forward(*truth.net, truth.x_coefs);
      truth.lambda_y.resize(spec.k_y);
      for (std::size_t k = 0; k < spec.k_y; ++k) {
        std::vector<double> col(spec.n);
        for (std::size_t i = 0; i < spec.n; ++i) col[i] = mean(i, k);
        const double v = spec.n > 1 ? variance(col) : 0.0;
        truth.lambda_y[k] = std::max(v, 1e-12) / spec.snr;
      }
    }
    truth.y_coefs = mean;
    for (std::size_t i = 0; i < spec.n; ++i)
      for (std::size_t k = 0; k < spec.k_y; ++k)
        truth.y_coefs(i, k) += rng.normal() * std::sqrt(truth.lambda_y[k]);

    // Noiseless reconstructions through the first K columns of each basis.
    Matrix psi_x(basis_x.num_voxels(), spec.k_x);
    for (std::size_t j = 0; j < basis_x.num_voxels(); ++j)
      for (std::size_t k = 0; k < spec.k_x; ++k) psi_x(j, k) = basis_x.psi(j, k);
    Matrix psi_y(basis_y.num_voxels(), spec.k_y);
    for (std::size_t j = 0; j < basis_y.num_voxels(); ++j)
      for (std::size_t k = 0; k < spec.k_y; ++k) psi_y(j, k) = basis_y.psi(j, k);
    out.channels.push_back(matmul_nt(truth.x_coefs, psi_x));
    out.outcomes = matmul_nt(truth.y_coefs, psi_y);
    out.channel_grids.push_back(basis_x.grid);
    out.outcome_grid = basis_y.grid;
  } else if (spec.scenario == 3) {
    // Voxelwise linear model on a shared grid; X comes from the supplied
    // predictor basis (eigenvalues required), everything else standard normal.
    Matrix x_images = simulate_images(basis_x, spec.n, 0.0, rng, &truth.x_coefs);
    const std::size_t v = x_images.cols();
    truth.beta0.resize(v);
    truth.beta1.resize(v);
    for (std::size_t j = 0; j < v; ++j) truth.beta0[j] = rng.normal();
    for (std::size_t j = 0; j < v; ++j) truth.beta1[j] = rng.normal();
    out.outcomes = Matrix(spec.n, v);
    for (std::size_t i = 0; i < spec.n; ++i)
      for (std::size_t j = 0; j < v; ++j)
        out.outcomes(i, j) =
            truth.beta0[j] + truth.beta1[j] * x_images(i, j) + rng.normal();
    out.channels.push_back(std::move(x_images));
    out.channel_grids.push_back(basis_x.grid);
    out.outcome_grid = basis_x.grid;
  } else {
    throw InvalidConfig("simulate_scenario: scenario must be 1, 2 or 3");
  }

  if (truth_out) *truth_out = std::move(truth);
  return out;
}

// ---------------------------------------------------------------------------
// Baselines.

struct VrModel {
  std::vector<double> intercept;
  std::vector<double> slope;     // 0 where the predictor voxel was constant
  Matrix covar_slopes{0, 0};     // V x p
};

// Per-voxel ordinary least squares Y(v) ~ 1 + X(v) [+ covariates]. Constant
// predictor voxels fall back to intercept(+covariate)-only fits.
inline VrModel baseline_vr(const Matrix& x, const Matrix& y,
                           const Matrix& covariates = Matrix(0, 0)) {
  if (x.rows() != y.rows()) throw ShapeError("baseline_vr: row mismatch");
  if (x.cols() != y.cols())
    throw GridMismatch("baseline_vr: predictor and outcome must share a grid");
  const std::size_t n = x.rows(), v = x.cols();
  const std::size_t p = covariates.cols();
  if (p > 0 && covariates.rows() != n)
    throw ShapeError("baseline_vr: covariate row mismatch");
  if (n < p + 2) throw InsufficientData("baseline_vr: too few subjects");

  VrModel model;
  model.intercept.assign(v, 0.0);
  model.slope.assign(v, 0.0);
  model.covar_slopes = Matrix(v, p);

  std::vector<double> xv(n);
  for (std::size_t j = 0; j < v; ++j) {
    for (std::size_t i = 0; i < n; ++i) xv[i] = x(i, j);
    const bool with_slope = variance(xv) > 1e-24;

    // Design columns: [1, x?] + covariates.
    const std::size_t dim = (with_slope ? 2 : 1) + p;
    Matrix design(n, dim);
    for (std::size_t i = 0; i < n; ++i) {
      design(i, 0) = 1.0;
      if (with_slope) design(i, 1) = xv[i];
      for (std::size_t c = 0; c < p; ++c)
        design(i, dim - p + c) = covariates(i, c);
    }
    Matrix a = matmul_tn(design, design);
    std::vector<double> rhs(dim, 0.0), sol(dim, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < dim; ++r) rhs[r] += design(i, r) * y(i, j);

    if (!solve_dense(a, rhs, sol)) {
      // Singular even after the fallback: predict the voxel mean.
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += y(i, j);
      model.intercept[j] = m / static_cast<double>(n);
      continue;
    }
    model.intercept[j] = sol[0];
    if (with_slope) model.slope[j] = sol[1];
    for (std::size_t c = 0; c < p; ++c)
      model.covar_slopes(j, c) = sol[dim - p + c];
  }
  return model;
}

inline Matrix vr_predict(const VrModel& model, const Matrix& x,
                         const Matrix& covariates = Matrix(0, 0)) {
  if (x.cols() != model.intercept.size())
    throw ShapeError("vr_predict: voxel count mismatch");
  const std::size_t p = model.covar_slopes.cols();
  if (p > 0 && (covariates.rows() != x.rows() || covariates.cols() != p))
    throw ShapeError("vr_predict: covariate shape mismatch");
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      double v = model.intercept[j] + model.slope[j] * x(i, j);
      for (std::size_t c = 0; c < p; ++c)
        v += model.covar_slopes(j, c) * covariates(i, c);
      out(i, j) = v;
    }
  }
  return out;
}

struct LrModel {
  std::vector<int> parcels;          // voxel -> parcel id
  std::map<int, double> intercept;   // averaged per-parcel fits
  std::map<int, double> slope;
};

// Region-linear baseline: per parcel and training subject, regress the
// outcome on the predictor over the parcel's voxels, then average the fitted
// coefficients over subjects.
inline LrModel baseline_lr(const Matrix& x, const Matrix& y,
                           const std::vector<int>& parcels) {
  if (x.rows() != y.rows()) throw ShapeError("baseline_lr: row mismatch");
  if (x.cols() != y.cols())
    throw GridMismatch("baseline_lr: predictor and outcome must share a grid");
  if (parcels.size() != x.cols())
    throw ShapeError("baseline_lr: parcel labeling length mismatch");
  const std::size_t n = x.rows();

  LrModel model;
  model.parcels = parcels;
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t j = 0; j < parcels.size(); ++j) members[parcels[j]].push_back(j);

  for (const auto& [parcel, voxels] : members) {
    double sum_a = 0.0, sum_b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
      const double m = static_cast<double>(voxels.size());
      for (std::size_t j : voxels) {
        sx += x(i, j);
        sy += y(i, j);
        sxx += x(i, j) * x(i, j);
        sxy += x(i, j) * y(i, j);
      }
      const double det = m * sxx - sx * sx;
      double a, b;
      if (std::abs(det) <= 1e-12 * std::max(1.0, m * sxx)) {
        a = sy / m;
        b = 0.0;
      } else {
        b = (m * sxy - sx * sy) / det;
        a = (sy - b * sx) / m;
      }
      sum_a += a;
      sum_b += b;
    }
    model.intercept[parcel] = sum_a / static_cast<double>(n);
    model.slope[parcel] = sum_b / static_cast<double>(n);
  }
  return model;
}

inline Matrix lr_predict(const LrModel& model, const Matrix& x) {
  if (x.cols() != model.parcels.size())
    throw ShapeError("lr_predict: voxel count mismatch");
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const int parcel = model.parcels[j];
      out(i, j) = model.intercept.at(parcel) + model.slope.at(parcel) * x(i, j);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multinomial logistic classifier on raw pixels (stands in for the external
// CNN scorer on the digit-arithmetic outcomes).

struct LogisticClassifier {
  std::vector<int> classes;
  Matrix w{0, 0};  // C x V
  std::vector<double> bias;
};

struct ClassifierConfig {
  std::size_t max_iters = 500;
  double lr = 0.5;
  double l2 = 1e-6;
  double grad_tol = 1e-6;
};

inline LogisticClassifier train_classifier(const Matrix& images,
                                           const std::vector<int>& labels,
                                           const ClassifierConfig& cfg = {}) {
  if (labels.size() != images.rows())
    throw ShapeError("train_classifier: label count mismatch");
  LogisticClassifier clf;
  clf.classes = labels;
  std::sort(clf.classes.begin(), clf.classes.end());
  clf.classes.erase(std::unique(clf.classes.begin(), clf.classes.end()),
                    clf.classes.end());
  if (clf.classes.size() < 2)
    throw InvalidInput("train_classifier: need at least 2 classes");
  const std::size_t c_count = clf.classes.size();
  const std::size_t n = images.rows(), v = images.cols();

  std::vector<std::size_t> cls_index(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto it = std::lower_bound(clf.classes.begin(), clf.classes.end(), labels[i]);
    cls_index[i] = static_cast<std::size_t>(it - clf.classes.begin());
  }

  clf.w = Matrix(c_count, v);
  clf.bias.assign(c_count, 0.0);
  std::vector<double> flat(c_count * v + c_count, 0.0);
  AdamState adam(flat.size(), cfg.lr);

  std::vector<double> grad(flat.size());
  Matrix probs(n, c_count);
  for (std::size_t iter = 0; iter < cfg.max_iters; ++iter) {
    // Softmax probabilities under the current parameters.
    const Matrix logits_x = matmul_nt(images, clf.w);
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -1e300;
      for (std::size_t c = 0; c < c_count; ++c)
        mx = std::max(mx, logits_x(i, c) + clf.bias[c]);
      double z = 0.0;
      for (std::size_t c = 0; c < c_count; ++c) {
        probs(i, c) = std::exp(logits_x(i, c) + clf.bias[c] - mx);
        z += probs(i, c);
      }
      for (std::size_t c = 0; c < c_count; ++c) probs(i, c) /= z;
    }
    // Mean cross-entropy gradient with L2.
    for (std::size_t i = 0; i < n; ++i) probs(i, cls_index[i]) -= 1.0;
    Matrix gw = matmul_tn(probs, images);
    double gmax = 0.0;
    for (std::size_t c = 0; c < c_count; ++c) {
      for (std::size_t j = 0; j < v; ++j) {
        grad[c * v + j] =
            gw(c, j) / static_cast<double>(n) + cfg.l2 * clf.w(c, j);
        gmax = std::max(gmax, std::abs(grad[c * v + j]));
      }
      double gb = 0.0;
      for (std::size_t i = 0; i < n; ++i) gb += probs(i, c);
      grad[c_count * v + c] = gb / static_cast<double>(n);
      gmax = std::max(gmax, std::abs(grad[c_count * v + c]));
    }
    if (gmax < cfg.grad_tol) break;
    adam_step(adam, flat, grad);
    for (std::size_t c = 0; c < c_count; ++c) {
      for (std::size_t j = 0; j < v; ++j) clf.w(c, j) = flat[c * v + j];
      clf.bias[c] = flat[c_count * v + c];
    }
  }
  return clf;
}

inline std::vector<int> classify(const LogisticClassifier& clf, const Matrix& images) {
  if (images.cols() != clf.w.cols())
    throw ShapeError("classify: image width mismatch");
  const Matrix logits = matmul_nt(images, clf.w);
  std::vector<int> out(images.rows());
  for (std::size_t i = 0; i < images.rows(); ++i) {
    std::size_t best = 0;
    double best_v = logits(i, 0) + clf.bias[0];
    for (std::size_t c = 1; c < clf.classes.size(); ++c) {
      const double v = logits(i, c) + clf.bias[c];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    out[i] = clf.classes[best];
  }
  return out;
}

}  // namespace birdgp
