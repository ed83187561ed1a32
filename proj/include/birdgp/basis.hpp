#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "birdgp/linalg.hpp"
#include "birdgp/matrix.hpp"
#include "birdgp/mlp.hpp"
#include "birdgp/rng.hpp"

namespace birdgp {

// Ordered voxel coordinates. The row order is fixed at construction and
// defines the row order of every image and basis matrix built on the grid.
struct VoxelGrid {
  std::size_t dim = 0;
  Matrix coords{0, 0};      // V x dim, raw coordinates
  Matrix normalized{0, 0};  // V x dim, per-axis affine map into [-1, 1]
  std::vector<double> axis_min;
  std::vector<double> axis_max;

  VoxelGrid() = default;

  explicit VoxelGrid(Matrix raw_coords) : coords(std::move(raw_coords)) {
    dim = coords.cols();
    const std::size_t v = coords.rows();
    if (dim < 1 || dim > 3) throw InvalidInput("VoxelGrid: dim must be 1, 2 or 3");
    if (v == 0) throw InvalidInput("VoxelGrid: empty grid");
    if (!coords.all_finite()) throw InvalidInput("VoxelGrid: non-finite coordinates");

    // Distinctness via lexicographic sort of row indices.
    std::vector<std::size_t> order(v);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      for (std::size_t j = 0; j < dim; ++j) {
        if (coords(a, j) != coords(b, j)) return coords(a, j) < coords(b, j);
      }
      return false;
    });
    for (std::size_t i = 1; i < v; ++i) {
      bool same = true;
      for (std::size_t j = 0; j < dim && same; ++j)
        same = coords(order[i - 1], j) == coords(order[i], j);
      if (same) throw InvalidInput("VoxelGrid: duplicate coordinates");
    }

    axis_min.assign(dim, 0.0);
    axis_max.assign(dim, 0.0);
    for (std::size_t j = 0; j < dim; ++j) {
      double lo = coords(0, j), hi = coords(0, j);
      for (std::size_t i = 1; i < v; ++i) {
        lo = std::min(lo, coords(i, j));
        hi = std::max(hi, coords(i, j));
      }
      axis_min[j] = lo;
      axis_max[j] = hi;
    }
    normalized = normalize_points(coords);
  }

  std::size_t num_voxels() const { return coords.rows(); }

  // Applies the grid's affine map to arbitrary (possibly off-grid) points.
  Matrix normalize_points(const Matrix& pts) const {
    if (pts.cols() != dim) throw ShapeError("VoxelGrid: point dimension mismatch");
    Matrix out(pts.rows(), dim);
    for (std::size_t j = 0; j < dim; ++j) {
      const double span = axis_max[j] - axis_min[j];
      for (std::size_t i = 0; i < pts.rows(); ++i) {
        out(i, j) = span > 0.0
                        ? 2.0 * (pts(i, j) - axis_min[j]) / span - 1.0
                        : 0.0;
      }
    }
    return out;
  }

  static VoxelGrid lattice_1d(std::size_t v) {
    Matrix c(v, 1);
    for (std::size_t i = 0; i < v; ++i) c(i, 0) = static_cast<double>(i);
    return VoxelGrid(std::move(c));
  }

  // Row-major pixel order: voxel index = r * cols + c, matching image rasters.
  static VoxelGrid lattice_2d(std::size_t rows, std::size_t cols) {
    Matrix c(rows * cols, 2);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < cols; ++j) {
        c(r * cols + j, 0) = static_cast<double>(r);
        c(r * cols + j, 1) = static_cast<double>(j);
      }
    }
    return VoxelGrid(std::move(c));
  }
};

enum class BasisMethod { dnn, pca, se, matern };

inline std::string to_string(BasisMethod m) {
  switch (m) {
    case BasisMethod::dnn: return "dnn";
    case BasisMethod::pca: return "pca";
    case BasisMethod::se: return "se";
    case BasisMethod::matern: return "matern";
  }
  throw InvalidState("unknown basis method");
}

inline BasisMethod basis_method_from_string(const std::string& s) {
  if (s == "dnn") return BasisMethod::dnn;
  if (s == "pca") return BasisMethod::pca;
  if (s == "se") return BasisMethod::se;
  if (s == "matern") return BasisMethod::matern;
  throw InvalidConfig("unknown basis method: " + s);
}

struct BasisSet {
  VoxelGrid grid;
  Matrix psi{0, 0};                 // V x K, orthonormal columns
  std::vector<double> eigenvalues;  // lambda estimates, non-increasing; set
                                    // by the projection stage
  BasisMethod method = BasisMethod::pca;
  std::optional<MlpParams> net;     // dnn method: coordinate network
  Matrix mix{0, 0};                 // dnn method: raw net outputs -> psi
  std::vector<double> center;       // pca method: per-voxel training mean

  std::size_t num_voxels() const { return psi.rows(); }
  std::size_t num_components() const { return psi.cols(); }

  // Off-grid basis evaluation for the dnn method: run the stored network at
  // the (raw) points and map through the same mixing matrix used on the grid.
  Matrix evaluate(const Matrix& points) const {
    if (!net) throw InvalidState("BasisSet: off-grid evaluation needs a network");
    const Matrix z = forward(*net, grid.normalize_points(points));
    return matmul(z, mix);
  }
};

struct OrthonormalizeInfo {
  std::size_t retained_rank = 0;
  bool truncated = false;
};

// Orthonormalizes raw basis columns. The svd strategy orders columns by
// singular value and truncates directions with s < 1e-10 * s_max (the info
// out-parameter reports the retained rank); gram_schmidt keeps the original
// column order and throws RankDeficient instead of truncating.
enum class OrthoStrategy { svd, gram_schmidt };

inline BasisSet orthonormalize(const VoxelGrid& grid, const Matrix& raw,
                               OrthoStrategy strategy,
                               OrthonormalizeInfo* info = nullptr) {
  if (raw.rows() != grid.num_voxels())
    throw ShapeError("orthonormalize: row count does not match grid");
  BasisSet out;
  out.grid = grid;
  if (strategy == OrthoStrategy::gram_schmidt) {
    GramSchmidtResult qr = gram_schmidt_qr(raw);
    out.psi = std::move(qr.q);
    out.mix = invert_upper_triangular(qr.r);
    if (info) *info = {raw.cols(), false};
    return out;
  }
  SvdResult svd = svd_thin(raw);
  const double smax = svd.s.empty() ? 0.0 : svd.s.front();
  std::size_t rank = svd.s.size();
  while (rank > 0 && svd.s[rank - 1] <= 1e-10 * smax) --rank;
  if (rank == 0) throw RankDeficient("orthonormalize: zero matrix", 0);
  if (info) *info = {rank, rank < svd.s.size()};

  out.psi = Matrix(raw.rows(), rank);
  for (std::size_t j = 0; j < rank; ++j)
    for (std::size_t i = 0; i < raw.rows(); ++i) out.psi(i, j) = svd.u(i, j);
  // raw = U S V^T, so U = raw * V * S^{-1}.
  const Matrix v = transpose(svd.vt);
  out.mix = Matrix(raw.cols(), rank);
  for (std::size_t i = 0; i < raw.cols(); ++i)
    for (std::size_t j = 0; j < rank; ++j) out.mix(i, j) = v(i, j) / svd.s[j];
  return out;
}

struct BasisFitConfig {
  std::vector<std::size_t> hidden_sizes = {128, 128, 128, 128};
  Activation activation = Activation::relu;
  std::size_t epochs = 200;
  std::size_t batch_voxels = 256;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  // Epochs between optimizer-moment resets (warm restarts); 0 never resets.
  // The initial transient's large gradients park Adam's second-moment scale
  // far above the converged regime, throttling later steps; periodic resets
  // let the step size track the shrinking gradient scale.
  std::size_t adam_restart = 100;
};

struct BasisFitResult {
  Matrix p{0, 0};         // n x K coefficient matrix
  MlpParams net;          // coordinate network, input dim -> K outputs
  std::vector<double> loss_trace;  // per-epoch mean squared residual per voxel entry
};

// Joint first-order fit of sum_v || X(:,v) - P * N(v; theta) ||^2 over both
// the coefficient matrix P and the network parameters, using Adam on voxel
// minibatches. Weight decay applies to the network parameters only.
inline BasisFitResult fit_basis_network(const Matrix& images, const VoxelGrid& grid,
                                        std::size_t k, const BasisFitConfig& cfg,
                                        Rng& rng) {
  const std::size_t n = images.rows();
  const std::size_t v = images.cols();
  if (v != grid.num_voxels())
    throw ShapeError("fit_basis_network: image width does not match grid");
  if (n < 1) throw InvalidInput("fit_basis_network: no images");
  if (!images.all_finite()) throw InvalidInput("fit_basis_network: non-finite images");
  if (k > std::min(n, v))
    throw InvalidConfig("fit_basis_network: K exceeds min(n, V)");
  if (cfg.epochs < 1 || cfg.batch_voxels < 1 || cfg.lr <= 0.0)
    throw InvalidConfig("fit_basis_network: bad optimizer settings");

  std::vector<std::size_t> arch;
  arch.push_back(grid.dim);
  for (std::size_t h : cfg.hidden_sizes) arch.push_back(h);
  arch.push_back(k);

  BasisFitResult out;
  out.net = init_params(MlpArch(arch, cfg.activation), rng);
  out.p = Matrix::random_normal(n, k, rng, 1.0 / std::sqrt(static_cast<double>(k)));

  std::vector<double> theta = flatten(out.net);
  AdamState theta_state(theta.size(), cfg.lr);
  AdamState p_state(n * k, cfg.lr);

  const std::size_t batch = std::min(cfg.batch_voxels, v);
  std::vector<std::size_t> perm(v);
  std::iota(perm.begin(), perm.end(), 0u);

  out.loss_trace.reserve(cfg.epochs);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.adam_restart > 0 && epoch > 0 && epoch % cfg.adam_restart == 0) {
      theta_state = AdamState(theta.size(), cfg.lr);
      p_state = AdamState(n * k, cfg.lr);
    }
    // Fisher-Yates shuffle of the voxel order.
    for (std::size_t i = v; i-- > 1;) {
      const std::size_t j = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(i)));
      std::swap(perm[i], perm[j]);
    }
    double epoch_loss = 0.0;
    std::size_t epoch_entries = 0;
    for (std::size_t start = 0; start < v; start += batch) {
      const std::size_t b = std::min(batch, v - start);
      Matrix pts(b, grid.dim);
      for (std::size_t r = 0; r < b; ++r)
        for (std::size_t j = 0; j < grid.dim; ++j)
          pts(r, j) = grid.normalized(perm[start + r], j);

      ForwardCache cache;
      const Matrix nb = forward(out.net, pts, &cache);  // b x k

      // Residual E(i, r) = X(i, perm[r]) - sum_k P(i,k) * nb(r,k).
      Matrix e = matmul_nt(out.p, nb) * -1.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < b; ++r) e(i, r) += images(i, perm[start + r]);

      double loss = 0.0;
      for (double x : e.storage()) loss += x * x;
      epoch_loss += loss;
      epoch_entries += n * b;

      // dL/dP = -2 E N, dL/dN = -2 E^T P.
      Matrix gp = matmul(e, nb) * -2.0;
      Matrix gn = matmul_tn(e, out.p) * -2.0;
      std::vector<double> gtheta = grad_params(cache, gn);
      for (std::size_t i = 0; i < gtheta.size(); ++i)
        gtheta[i] += cfg.weight_decay * theta[i];

      adam_step(theta_state, theta, gtheta);
      out.net = unflatten(out.net.arch, theta);
      adam_step(p_state, out.p.storage(), gp.storage());
    }
    out.loss_trace.push_back(epoch_loss / static_cast<double>(epoch_entries));
  }
  return out;
}

// Fits the coordinate network and packages its grid evaluation as an
// orthonormal basis with off-grid support.
inline BasisSet dnn_basis(const Matrix& images, const VoxelGrid& grid, std::size_t k,
                          const BasisFitConfig& cfg, Rng& rng,
                          BasisFitResult* fit_out = nullptr,
                          OrthoStrategy strategy = OrthoStrategy::svd) {
  BasisFitResult fit = fit_basis_network(images, grid, k, cfg, rng);
  const Matrix raw = forward(fit.net, grid.normalized);
  BasisSet basis = orthonormalize(grid, raw, strategy);
  basis.method = BasisMethod::dnn;
  basis.net = fit.net;
  if (fit_out) *fit_out = std::move(fit);
  return basis;
}

namespace detail {

// Top-k orthonormal eigenvectors of a symmetric PSD matrix, choosing the
// dense Jacobi path for small problems and subspace iteration otherwise.
inline EigResult psd_top_k(const Matrix& g, std::size_t k, std::uint64_t seed) {
  if (g.rows() <= 320 || k + 10 >= g.rows()) {
    EigResult full = sym_eig_jacobi(g);
    EigResult out;
    out.values.assign(full.values.begin(), full.values.begin() + k);
    out.vectors = Matrix(g.rows(), k);
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t i = 0; i < g.rows(); ++i)
        out.vectors(i, j) = full.vectors(i, j);
    return out;
  }
  return top_k_eig_psd(g, k, 300, 1e-13, seed);
}

}  // namespace detail

// Classical PCA basis: top-K right singular vectors of the column-centered
// image matrix, computed through the n x n Gram matrix. The per-voxel mean is
// stored so projections can center new images identically.
inline BasisSet pca_basis(const Matrix& images, const VoxelGrid& grid, std::size_t k) {
  const std::size_t n = images.rows(), v = images.cols();
  if (v != grid.num_voxels())
    throw ShapeError("pca_basis: image width does not match grid");
  if (k == 0 || k > std::min(n, v))
    throw InvalidConfig("pca_basis: K must be in [1, min(n, V)]");
  if (!images.all_finite()) throw InvalidInput("pca_basis: non-finite images");

  BasisSet out;
  out.grid = grid;
  out.method = BasisMethod::pca;

  if (n == 1) {
    // No centering is possible; the single component is the normalized image.
    out.center.assign(v, 0.0);
    double nrm = 0.0;
    for (std::size_t j = 0; j < v; ++j) nrm += images(0, j) * images(0, j);
    nrm = std::sqrt(nrm);
    if (nrm == 0.0) throw DegenerateInput("pca_basis: single all-zero image");
    out.psi = Matrix(v, 1);
    for (std::size_t j = 0; j < v; ++j) out.psi(j, 0) = images(0, j) / nrm;
    return out;
  }

  out.center.assign(v, 0.0);
  for (std::size_t j = 0; j < v; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += images(i, j);
    out.center[j] = s / static_cast<double>(n);
  }
  Matrix c = images;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < v; ++j) c(i, j) -= out.center[j];

  const Matrix gram = matmul_nt(c, c);
  EigResult eig = detail::psd_top_k(gram, k, 0x9CA5EEDull);

  double smax = 0.0;
  for (double e : eig.values) smax = std::max(smax, std::sqrt(std::max(e, 0.0)));
  out.psi = Matrix(v, k);
  std::vector<std::size_t> deficient;
  for (std::size_t j = 0; j < k; ++j) {
    const double s = std::sqrt(std::max(eig.values[j], 0.0));
    if (s <= 1e-12 * smax || s == 0.0) {
      deficient.push_back(j);
      continue;
    }
    for (std::size_t i = 0; i < v; ++i) {
      double acc = 0.0;
      for (std::size_t r = 0; r < n; ++r) acc += c(r, i) * eig.vectors(r, j);
      out.psi(i, j) = acc / s;
    }
    // Renormalize to shed eigensolver roundoff.
    double nrm = 0.0;
    for (std::size_t i = 0; i < v; ++i) nrm += out.psi(i, j) * out.psi(i, j);
    nrm = std::sqrt(nrm);
    for (std::size_t i = 0; i < v; ++i) out.psi(i, j) /= nrm;
  }
  for (std::size_t j : deficient) detail::complete_column(out.psi, j);
  return out;
}

struct KernelConfig {
  BasisMethod kind = BasisMethod::se;  // se or matern (nu = 3/2)
  double length = 0.5;                 // in normalized coordinate units
  std::size_t subsample = 0;           // landmark count; 0 = dense path
};

namespace detail {

inline double kernel_value(const KernelConfig& cfg, const Matrix& a, std::size_t i,
                           const Matrix& b, std::size_t j) {
  double r2 = 0.0;
  for (std::size_t d = 0; d < a.cols(); ++d) {
    const double diff = a(i, d) - b(j, d);
    r2 += diff * diff;
  }
  if (cfg.kind == BasisMethod::se) return std::exp(-0.5 * r2 / (cfg.length * cfg.length));
  const double r = std::sqrt(r2);
  const double z = std::sqrt(3.0) * r / cfg.length;
  return (1.0 + z) * std::exp(-z);
}

}  // namespace detail

// Top-K eigenvectors of the kernel Gram matrix over the grid. Above the dense
// guard (V <= 20000) a landmark subsample with a Nystroem extension must be
// configured.
inline BasisSet fixed_kernel_basis(const VoxelGrid& grid, const KernelConfig& cfg,
                                   std::size_t k) {
  const std::size_t v = grid.num_voxels();
  if (cfg.kind != BasisMethod::se && cfg.kind != BasisMethod::matern)
    throw InvalidConfig("fixed_kernel_basis: kernel must be se or matern");
  if (cfg.length <= 0.0) throw InvalidConfig("fixed_kernel_basis: length must be > 0");
  if (k == 0 || k > v) throw InvalidConfig("fixed_kernel_basis: K must be in [1, V]");
  if (v > 20000 && cfg.subsample == 0)
    throw ResourceLimit("fixed_kernel_basis: grid too large for a dense Gram matrix; "
                        "configure a landmark subsample");

  BasisSet out;
  out.grid = grid;
  out.method = cfg.kind;
  const Matrix& pts = grid.normalized;

  if (cfg.subsample == 0 || cfg.subsample >= v) {
    Matrix gram(v, v);
    for (std::size_t i = 0; i < v; ++i)
      for (std::size_t j = i; j < v; ++j) {
        const double val = detail::kernel_value(cfg, pts, i, pts, j);
        gram(i, j) = val;
        gram(j, i) = val;
      }
    EigResult eig = detail::psd_top_k(gram, k, 0x5EEDBA515ull);
    out.psi = std::move(eig.vectors);
    return out;
  }

  // Landmarks on a deterministic stride, then the Nystroem extension
  // K_{V,m} u / e, re-orthonormalized on the full grid.
  const std::size_t m = std::max<std::size_t>(cfg.subsample, k);
  std::vector<std::size_t> landmarks(m);
  for (std::size_t i = 0; i < m; ++i) landmarks[i] = (i * v) / m;
  Matrix lpts(m, grid.dim);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t d = 0; d < grid.dim; ++d) lpts(i, d) = pts(landmarks[i], d);

  Matrix gram(m, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i; j < m; ++j) {
      const double val = detail::kernel_value(cfg, lpts, i, lpts, j);
      gram(i, j) = val;
      gram(j, i) = val;
    }
  EigResult eig = detail::psd_top_k(gram, k, 0x5EEDBA515ull);

  // Extension columns K_{V,m} u_j are kept at their natural scale (norm
  // growing with the eigenvalue) rather than divided by e_j: the direction is
  // identical either way, and the separated column norms let the svd
  // re-orthonormalization order columns by eigenvalue instead of facing a
  // degenerate spectrum it could mix arbitrarily.
  Matrix ext(v, k);
  for (std::size_t i = 0; i < v; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double acc = 0.0;
      for (std::size_t l = 0; l < m; ++l)
        acc += detail::kernel_value(cfg, pts, i, lpts, l) * eig.vectors(l, j);
      ext(i, j) = acc;
    }
  }
  BasisSet ortho = orthonormalize(grid, ext, OrthoStrategy::svd);
  out.psi = std::move(ortho.psi);
  return out;
}

// Fraction of image sum-of-squares captured by least-squares projection onto
// the first k basis columns. PCA bases measure centered variance (using the
// stored training mean); the other methods measure raw sum-of-squares.
inline double variance_explained(const Matrix& images, const BasisSet& basis,
                                 std::size_t k) {
  if (images.cols() != basis.num_voxels())
    throw ShapeError("variance_explained: image width does not match basis");
  if (k > basis.num_components())
    throw InvalidInput("variance_explained: k exceeds component count");
  const std::size_t n = images.rows(), v = images.cols();
  const bool centered = basis.method == BasisMethod::pca && !basis.center.empty();

  double total = 0.0, captured = 0.0;
  std::vector<double> row(v);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < v; ++j)
      row[j] = images(i, j) - (centered ? basis.center[j] : 0.0);
    for (double x : row) total += x * x;
    for (std::size_t c = 0; c < k; ++c) {
      double coef = 0.0;
      for (std::size_t j = 0; j < v; ++j) coef += row[j] * basis.psi(j, c);
      captured += coef * coef;
    }
  }
  if (total == 0.0) throw DegenerateInput("variance_explained: zero total variance");
  return std::clamp(captured / total, 0.0, 1.0);
}

}  // namespace birdgp
