#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "birdgp/matrix.hpp"
#include "birdgp/rng.hpp"

namespace birdgp {

struct SvdResult {
  Matrix u;                // V x K, orthonormal columns
  std::vector<double> s;   // K, non-negative, non-increasing
  Matrix vt;               // K x K
};

namespace detail {

// Restores exact orthonormality of a (near) null column against the columns
// before it, starting from a deterministic pseudo-random direction.
inline void complete_column(Matrix& u, std::size_t col) {
  const std::size_t v = u.rows();
  Rng rng(0xC01DCAFEull + col);
  for (int attempt = 0; attempt < 8; ++attempt) {
    std::vector<double> x(v);
    for (double& e : x) e = rng.normal();
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < u.cols(); ++j) {
        if (j == col) continue;
        double d = 0.0;
        for (std::size_t i = 0; i < v; ++i) d += x[i] * u(i, j);
        for (std::size_t i = 0; i < v; ++i) x[i] -= d * u(i, j);
      }
    }
    const double nrm = norm2(x);
    if (nrm > 1e-8) {
      for (std::size_t i = 0; i < v; ++i) u(i, col) = x[i] / nrm;
      return;
    }
  }
  throw NumericalFailure("svd: failed to complete orthonormal column");
}

}  // namespace detail

// Thin SVD of a V x K matrix (V >= K) by one-sided Jacobi rotations applied
// to the columns. Accurate for tall matrices; cost O(V K^2) per sweep.
inline SvdResult svd_thin(const Matrix& m, int max_sweeps = 60) {
  const std::size_t v = m.rows(), k = m.cols();
  if (v < k) throw InvalidInput("svd_thin: requires rows >= cols");
  if (!m.all_finite()) throw InvalidInput("svd_thin: non-finite input");

  Matrix u = m;
  Matrix vmat = Matrix::identity(k);
  std::vector<double> colsq(k);
  for (std::size_t j = 0; j < k; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < v; ++i) s += u(i, j) * u(i, j);
    colsq[j] = s;
  }

  const double tol = 1e-15;
  // Columns this far below the largest are numerical null space: rotating
  // them only chases roundoff noise, so they are skipped here and replaced
  // by deterministic orthonormal completions after the sweep phase.
  const double null_sq =
      *std::max_element(colsq.begin(), colsq.end()) * 1e-26 + 1e-300;
  bool converged = (k <= 1);
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < k; ++p) {
      for (std::size_t q = p + 1; q < k; ++q) {
        const double app = colsq[p], aqq = colsq[q];
        if (app <= null_sq || aqq <= null_sq) continue;
        double apq = 0.0;
        for (std::size_t i = 0; i < v; ++i) apq += u(i, p) * u(i, q);
        if (std::abs(apq) <= tol * std::sqrt(app) * std::sqrt(aqq) || apq == 0.0)
          continue;
        converged = false;
        const double zeta = (aqq - app) / (2.0 * apq);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < v; ++i) {
          const double up = u(i, p), uq = u(i, q);
          u(i, p) = c * up - s * uq;
          u(i, q) = s * up + c * uq;
        }
        for (std::size_t i = 0; i < k; ++i) {
          const double vp = vmat(i, p), vq = vmat(i, q);
          vmat(i, p) = c * vp - s * vq;
          vmat(i, q) = s * vp + c * vq;
        }
        colsq[p] = app - t * apq;
        colsq[q] = aqq + t * apq;
      }
    }
  }
  if (!converged)
    throw NumericalFailure("svd_thin: no convergence within sweep limit");

  SvdResult out;
  out.s.resize(k);
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0u);
  for (std::size_t j = 0; j < k; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < v; ++i) s += u(i, j) * u(i, j);
    colsq[j] = s;
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return colsq[a] > colsq[b]; });

  out.u = Matrix(v, k);
  Matrix vsorted(k, k);
  const double smax = std::sqrt(*std::max_element(colsq.begin(), colsq.end()));
  const double null_s = std::sqrt(null_sq);
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t src = order[j];
    const double sj = std::sqrt(colsq[src]);
    out.s[j] = sj;
    for (std::size_t i = 0; i < k; ++i) vsorted(i, j) = vmat(i, src);
    if (sj > null_s) {
      for (std::size_t i = 0; i < v; ++i) out.u(i, j) = u(i, src) / sj;
    }
  }
  // Null columns still need an orthonormal direction so U^T U = I holds;
  // their tiny singular values keep the reconstruction unaffected.
  for (std::size_t j = 0; j < k; ++j) {
    if (smax == 0.0 || out.s[j] <= null_s) detail::complete_column(out.u, j);
  }
  out.vt = transpose(vsorted);
  return out;
}

// Modified Gram-Schmidt with one re-orthogonalization pass. Also returns the
// upper-triangular R with input = Q * R so callers can map coefficients
// between the raw and orthonormal frames.
struct GramSchmidtResult {
  Matrix q;  // V x K orthonormal
  Matrix r;  // K x K upper triangular
};

inline GramSchmidtResult gram_schmidt_qr(const Matrix& m) {
  const std::size_t v = m.rows(), k = m.cols();
  if (!m.all_finite()) throw InvalidInput("gram_schmidt: non-finite input");
  double max_norm = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < v; ++i) s += m(i, j) * m(i, j);
    max_norm = std::max(max_norm, std::sqrt(s));
  }
  const double rank_tol = 1e-10 * max_norm;

  GramSchmidtResult out{m, Matrix(k, k)};
  Matrix& q = out.q;
  Matrix& r = out.r;
  for (std::size_t j = 0; j < k; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t p = 0; p < j; ++p) {
        double d = 0.0;
        for (std::size_t i = 0; i < v; ++i) d += q(i, p) * q(i, j);
        for (std::size_t i = 0; i < v; ++i) q(i, j) -= d * q(i, p);
        r(p, j) += d;
      }
    }
    double nrm = 0.0;
    for (std::size_t i = 0; i < v; ++i) nrm += q(i, j) * q(i, j);
    nrm = std::sqrt(nrm);
    if (nrm <= rank_tol)
      throw RankDeficient("gram_schmidt: column is in the span of earlier columns", j);
    r(j, j) = nrm;
    for (std::size_t i = 0; i < v; ++i) q(i, j) /= nrm;
  }
  return out;
}

inline Matrix gram_schmidt(const Matrix& m) { return gram_schmidt_qr(m).q; }

// Inverse of an upper-triangular matrix by back substitution.
inline Matrix invert_upper_triangular(const Matrix& r) {
  const std::size_t k = r.rows();
  Matrix inv(k, k);
  for (std::size_t j = 0; j < k; ++j) {
    inv(j, j) = 1.0 / r(j, j);
    for (std::size_t i = j; i-- > 0;) {
      double s = 0.0;
      for (std::size_t p = i + 1; p <= j; ++p) s += r(i, p) * inv(p, j);
      inv(i, j) = -s / r(i, i);
    }
  }
  return inv;
}

struct EigResult {
  std::vector<double> values;  // non-increasing
  Matrix vectors;              // columns are eigenvectors, same order
};

// Cyclic Jacobi eigendecomposition for dense symmetric matrices. Intended for
// small/medium problems (Rayleigh-Ritz blocks, test grids).
inline EigResult sym_eig_jacobi(const Matrix& a_in, int max_sweeps = 100) {
  const std::size_t n = a_in.rows();
  if (a_in.cols() != n) throw ShapeError("sym_eig_jacobi: not square");
  Matrix a = a_in;
  Matrix vec = Matrix::identity(n);

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    if (std::sqrt(off) < 1e-14 * (1.0 + max_abs(a))) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(1.0 + theta * theta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < n; ++i) {
          const double aip = a(i, p), aiq = a(i, q);
          a(i, p) = c * aip - s * aiq;
          a(i, q) = s * aip + c * aiq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double api = a(p, i), aqi = a(q, i);
          a(p, i) = c * api - s * aqi;
          a(q, i) = s * api + c * aqi;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vip = vec(i, p), viq = vec(i, q);
          vec(i, p) = c * vip - s * viq;
          vec(i, q) = s * vip + c * viq;
        }
      }
    }
  }

  EigResult out;
  out.values.resize(n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::vector<double> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = a(i, i);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return diag[x] > diag[y]; });
  out.vectors = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = diag[order[j]];
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = vec(i, order[j]);
  }
  return out;
}

// Top-k eigenpairs of a symmetric PSD matrix by randomized subspace iteration
// with Rayleigh-Ritz extraction. Deterministic given the seed.
inline EigResult top_k_eig_psd(const Matrix& g, std::size_t k, int max_iters = 300,
                               double tol = 1e-13, std::uint64_t seed = 12345) {
  const std::size_t n = g.rows();
  if (g.cols() != n) throw ShapeError("top_k_eig_psd: not square");
  if (k > n) throw InvalidInput("top_k_eig_psd: k exceeds dimension");
  const std::size_t block = std::min(n, k + 10);

  Rng rng(seed, 0x70EA);
  Matrix q = Matrix::random_normal(n, block, rng);
  q = gram_schmidt(q);

  std::vector<double> prev(k, 0.0);
  EigResult ritz;
  for (int it = 0; it < max_iters; ++it) {
    Matrix z = matmul(g, q);
    // Rayleigh-Ritz on the current subspace.
    Matrix small = matmul_tn(q, z);
    ritz = sym_eig_jacobi(small);
    bool done = it > 2;
    for (std::size_t j = 0; j < k && done; ++j) {
      const double scale = std::max(std::abs(ritz.values[0]), 1e-300);
      if (std::abs(ritz.values[j] - prev[j]) > tol * scale) done = false;
    }
    for (std::size_t j = 0; j < k; ++j) prev[j] = ritz.values[j];
    Matrix rotated = matmul(q, ritz.vectors);
    if (done) {
      EigResult out;
      out.values.assign(ritz.values.begin(), ritz.values.begin() + k);
      out.vectors = Matrix(n, k);
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = rotated(i, j);
      return out;
    }
    // Power step on the rotated basis, then re-orthonormalize.
    Matrix znext = matmul(g, rotated);
    try {
      q = gram_schmidt(znext);
    } catch (const RankDeficient&) {
      // Subspace collapsed below `block` directions (rank < block); refresh
      // the lost directions randomly and continue.
      Matrix fresh = Matrix::random_normal(n, block, rng);
      q = gram_schmidt(znext + fresh * (1e-10 * (1.0 + max_abs(znext))));
    }
  }
  throw NumericalFailure("top_k_eig_psd: subspace iteration did not converge");
}

}  // namespace birdgp
