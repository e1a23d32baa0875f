#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace dpnav {

struct SvdError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major matrix, just enough for gradient processing.
struct Matrix {
  int rows = 0, cols = 0;
  std::vector<double> a;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}

  double& at(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
  double at(int i, int j) const { return a[static_cast<std::size_t>(i) * cols + j]; }

  Matrix transposed() const {
    Matrix t(cols, rows);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) t.at(j, i) = at(i, j);
    return t;
  }

  double frobenius() const {
    double s = 0.0;
    for (double v : a) s += v * v;
    return std::sqrt(s);
  }
};

// Rank-k factorization; U is m x k and V is n x k, both with orthonormal
// columns, S descending.
struct SvdTriple {
  int m = 0, n = 0, k = 0;
  std::vector<double> U;  // m * k, row-major
  std::vector<double> S;  // k
  std::vector<double> V;  // n * k, row-major

  Matrix reconstruct(const std::vector<double>& diag) const {
    Matrix out(m, n);
    for (int r = 0; r < k; ++r) {
      double d = diag[static_cast<std::size_t>(r)];
      if (d == 0.0) continue;
      for (int i = 0; i < m; ++i) {
        double ui = U[static_cast<std::size_t>(i) * k + r] * d;
        if (ui == 0.0) continue;
        for (int j = 0; j < n; ++j)
          out.at(i, j) += ui * V[static_cast<std::size_t>(j) * k + r];
      }
    }
    return out;
  }

  Matrix reconstruct() const { return reconstruct(S); }
};

namespace detail {

// One-sided Jacobi on the columns of A (m x n, m >= n): plane rotations
// orthogonalize column pairs; converged column norms are the singular values.
// Rotations are accumulated into V.
inline void jacobi_onesided(Matrix& A, Matrix& V, std::vector<double>& sigma) {
  const int m = A.rows, n = A.cols;
  V = Matrix(n, n);
  for (int i = 0; i < n; ++i) V.at(i, i) = 1.0;

  const double tol = 1e-14;
  const int max_sweeps = 60;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (int p = 0; p < n - 1; ++p)
      for (int q = p + 1; q < n; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (int i = 0; i < m; ++i) {
          double x = A.at(i, p), y = A.at(i, q);
          app += x * x;
          aqq += y * y;
          apq += x * y;
        }
        if (std::fabs(apq) <= tol * std::sqrt(app * aqq) || apq == 0.0) continue;
        rotated = true;
        double zeta = (aqq - app) / (2.0 * apq);
        double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                   (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = c * t;
        for (int i = 0; i < m; ++i) {
          double x = A.at(i, p), y = A.at(i, q);
          A.at(i, p) = c * x - s * y;
          A.at(i, q) = s * x + c * y;
        }
        for (int i = 0; i < n; ++i) {
          double x = V.at(i, p), y = V.at(i, q);
          V.at(i, p) = c * x - s * y;
          V.at(i, q) = s * x + c * y;
        }
      }
    if (!rotated) break;
  }

  sigma.resize(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    double s = 0.0;
    for (int i = 0; i < m; ++i) s += A.at(i, j) * A.at(i, j);
    sigma[static_cast<std::size_t>(j)] = std::sqrt(s);
  }
}

// Fills left-singular columns for (near-)zero singular values with unit
// vectors orthogonal to the columns already present, so U keeps orthonormal
// columns even for rank-deficient inputs.
inline void complete_orthonormal(std::vector<double>& U, int m, int k,
                                 const std::vector<double>& sigma, double floor) {
  for (int r = 0; r < k; ++r) {
    if (sigma[static_cast<std::size_t>(r)] > floor) continue;
    for (int cand = 0; cand < m; ++cand) {
      std::vector<double> v(static_cast<std::size_t>(m), 0.0);
      v[static_cast<std::size_t>(cand)] = 1.0;
      for (int c = 0; c < k; ++c) {
        if (c == r) continue;
        if (c > r && sigma[static_cast<std::size_t>(c)] <= floor) continue;
        double dot = 0.0;
        for (int i = 0; i < m; ++i) dot += v[static_cast<std::size_t>(i)] * U[static_cast<std::size_t>(i) * k + c];
        for (int i = 0; i < m; ++i) v[static_cast<std::size_t>(i)] -= dot * U[static_cast<std::size_t>(i) * k + c];
      }
      double nrm = 0.0;
      for (double x : v) nrm += x * x;
      nrm = std::sqrt(nrm);
      if (nrm > 0.5) {
        for (int i = 0; i < m; ++i) U[static_cast<std::size_t>(i) * k + r] = v[static_cast<std::size_t>(i)] / nrm;
        break;
      }
    }
  }
}

}  // namespace detail

// Full decomposition via one-sided Jacobi run on the smaller Gram dimension.
inline SvdTriple svd_full(const Matrix& G) {
  for (double v : G.a)
    if (!std::isfinite(v)) throw SvdError("svd: non-finite entry");
  bool flipped = G.rows < G.cols;
  Matrix A = flipped ? G.transposed() : G;
  const int m = A.rows, n = A.cols;

  Matrix V;
  std::vector<double> sigma;
  detail::jacobi_onesided(A, V, sigma);

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return sigma[static_cast<std::size_t>(a)] > sigma[static_cast<std::size_t>(b)];
  });

  SvdTriple out;
  out.m = m;
  out.n = n;
  out.k = n;
  out.S.resize(static_cast<std::size_t>(n));
  out.U.assign(static_cast<std::size_t>(m) * n, 0.0);
  out.V.assign(static_cast<std::size_t>(n) * n, 0.0);
  double smax = sigma.empty() ? 0.0 : sigma[static_cast<std::size_t>(order[0])];
  double floor = smax * 1e-13;
  for (int r = 0; r < n; ++r) {
    int src = order[static_cast<std::size_t>(r)];
    double s = sigma[static_cast<std::size_t>(src)];
    out.S[static_cast<std::size_t>(r)] = s;
    if (s > floor && s > 0.0)
      for (int i = 0; i < m; ++i)
        out.U[static_cast<std::size_t>(i) * n + r] = A.at(i, src) / s;
    for (int i = 0; i < n; ++i)
      out.V[static_cast<std::size_t>(i) * n + r] = V.at(i, src);
  }
  detail::complete_orthonormal(out.U, m, n, out.S, floor);

  if (flipped) {
    std::swap(out.U, out.V);
    std::swap(out.m, out.n);
  }
  return out;
}

// Best rank-k approximation in the Frobenius norm. k larger than min(m, n)
// is clamped.
inline SvdTriple truncated_svd(const Matrix& G, int k) {
  if (k < 1) throw SvdError("truncated_svd: k must be >= 1");
  SvdTriple full = svd_full(G);
  int keff = std::min(k, std::min(G.rows, G.cols));
  if (keff == full.k) return full;
  SvdTriple out;
  out.m = full.m;
  out.n = full.n;
  out.k = keff;
  out.S.assign(full.S.begin(), full.S.begin() + keff);
  out.U.resize(static_cast<std::size_t>(out.m) * keff);
  out.V.resize(static_cast<std::size_t>(out.n) * keff);
  for (int i = 0; i < out.m; ++i)
    for (int r = 0; r < keff; ++r)
      out.U[static_cast<std::size_t>(i) * keff + r] =
          full.U[static_cast<std::size_t>(i) * full.k + r];
  for (int i = 0; i < out.n; ++i)
    for (int r = 0; r < keff; ++r)
      out.V[static_cast<std::size_t>(i) * keff + r] =
          full.V[static_cast<std::size_t>(i) * full.k + r];
  return out;
}

}  // namespace dpnav
