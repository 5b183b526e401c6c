// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

// Dense kernels used across the workbench: a row-major Matrix, vector helpers,
// Gram-Schmidt orthonormalization, a one-sided Jacobi SVD (oracle scale only),
// and magnitude-based top-k selection.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gradshield/error.hpp"

namespace gradshield {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, "Matrix: data length must equal rows*cols");
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
      require(row.size() == cols_, "Matrix: ragged initializer");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }

  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }

  Vector column(std::size_t c) const {
    Vector out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  Matrix& operator+=(const Matrix& o) {
    require(rows_ == o.rows_ && cols_ == o.cols_, "Matrix +=: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require(rows_ == o.rows_ && cols_ == o.cols_, "Matrix -=: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Vector helpers

inline double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

inline double frobenius_norm(const Matrix& m) { return norm(m.data()); }

inline Vector subtract(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "subtract: dimension mismatch");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

// ---------------------------------------------------------------------------
// Products

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw ContractViolation("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                            std::to_string(b.rows()) + ")");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

/// aᵀ·b without materializing the transpose.
inline Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), "matmul_at_b: row counts differ");
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

/// a·bᵀ.
inline Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), "matmul_a_bt: column counts differ");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
  return out;
}

// ---------------------------------------------------------------------------
// Orthonormalization

struct OrthonormalizeResult {
  Matrix q;
  /// Columns that were numerically dependent and replaced by random unit vectors.
  std::vector<std::size_t> reseeded_columns;
};

namespace detail {

// Projects column j of q against columns [0, j) twice (MGS with one reorthogonalization pass).
inline void project_out_previous(Matrix& q, std::size_t j) {
  const std::size_t n = q.rows();
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t p = 0; p < j; ++p) {
      double proj = 0.0;
      for (std::size_t i = 0; i < n; ++i) proj += q(i, p) * q(i, j);
      for (std::size_t i = 0; i < n; ++i) q(i, j) -= proj * q(i, p);
    }
  }
}

inline double column_norm(const Matrix& q, std::size_t j) {
  double s = 0.0;
  for (std::size_t i = 0; i < q.rows(); ++i) s += q(i, j) * q(i, j);
  return std::sqrt(s);
}

}  // namespace detail

/// Gram-Schmidt orthonormalization of the columns of `m`. A column whose residual
/// after projection falls below 1e-12 of its original norm (or is exactly zero) is
/// replaced by a random unit vector orthogonal to the preceding columns, so the
/// output keeps the input's shape. Randomness is drawn from `reseed_seed`.
inline OrthonormalizeResult orthonormalize(const Matrix& m, std::uint64_t reseed_seed = 0x5eed) {
  require(m.rows() >= m.cols(), "orthonormalize: needs rows >= cols");
  OrthonormalizeResult result{m, {}};
  Matrix& q = result.q;
  std::mt19937_64 rng(reseed_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  constexpr double kRelativeFloor = 1e-12;

  for (std::size_t j = 0; j < q.cols(); ++j) {
    const double original = detail::column_norm(q, j);
    detail::project_out_previous(q, j);
    double residual = detail::column_norm(q, j);
    if (!(residual > kRelativeFloor * original) || original == 0.0) {
      result.reseeded_columns.push_back(j);
      do {
        for (std::size_t i = 0; i < q.rows(); ++i) q(i, j) = gauss(rng);
        detail::project_out_previous(q, j);
        residual = detail::column_norm(q, j);
      } while (!(residual > 1e-6));
    }
    for (std::size_t i = 0; i < q.rows(); ++i) q(i, j) /= residual;
  }
  return result;
}

// ---------------------------------------------------------------------------
// SVD

struct SvdResult {
  Matrix u;  // n × k, orthonormal columns
  Vector s;  // k singular values, nonincreasing
  Matrix v;  // m × k, orthonormal columns
};

namespace detail {

// One-sided Jacobi on a tall matrix (rows >= cols).
inline SvdResult jacobi_svd_tall(const Matrix& a, std::size_t max_sweeps) {
  const std::size_t n = a.rows();
  const std::size_t m = a.cols();
  Matrix w = a;
  Matrix v = Matrix::identity(m);
  const double tol = static_cast<double>(std::max<std::size_t>(n, 1)) * std::numeric_limits<double>::epsilon();

  double off = 0.0;
  std::size_t sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    off = 0.0;
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < m; ++p) {
      for (std::size_t q = p + 1; q < m; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          alpha += w(i, p) * w(i, p);
          beta += w(i, q) * w(i, q);
          gamma += w(i, p) * w(i, q);
        }
        if (alpha == 0.0 || beta == 0.0 || gamma == 0.0) continue;
        const double coupling = std::abs(gamma) / std::sqrt(alpha * beta);
        off = std::max(off, coupling);
        if (coupling <= tol) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < n; ++i) {
          const double wp = w(i, p), wq = w(i, q);
          w(i, p) = c * wp - s * wq;
          w(i, q) = s * wp + c * wq;
        }
        for (std::size_t i = 0; i < m; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }
  if (sweep == max_sweeps) throw ConvergenceFailure("svd: Jacobi sweep cap exceeded", off);

  Vector sigma(m);
  for (std::size_t j = 0; j < m; ++j) sigma[j] = column_norm(w, j);
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  SvdResult out{Matrix(n, m), Vector(m), Matrix(m, m)};
  const double scale_floor = (sigma.empty() ? 0.0 : sigma[order[0]]) * tol;
  std::vector<std::size_t> null_columns;
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t j = order[k];
    out.s[k] = sigma[j];
    for (std::size_t i = 0; i < m; ++i) out.v(i, k) = v(i, j);
    if (sigma[j] > scale_floor && sigma[j] > 0.0) {
      for (std::size_t i = 0; i < n; ++i) out.u(i, k) = w(i, j) / sigma[j];
    } else {
      null_columns.push_back(k);
    }
  }
  // Complete U on the numerical null space with canonical directions.
  std::vector<bool> ready(m, true);
  for (std::size_t k : null_columns) ready[k] = false;
  std::size_t basis = 0;
  for (std::size_t k : null_columns) {
    for (; basis < n; ++basis) {
      for (std::size_t i = 0; i < n; ++i) out.u(i, k) = (i == basis) ? 1.0 : 0.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t p = 0; p < m; ++p) {
          if (!ready[p]) continue;
          double proj = 0.0;
          for (std::size_t i = 0; i < n; ++i) proj += out.u(i, p) * out.u(i, k);
          for (std::size_t i = 0; i < n; ++i) out.u(i, k) -= proj * out.u(i, p);
        }
      }
      const double r = column_norm(out.u, k);
      if (r > 0.5) {
        for (std::size_t i = 0; i < n; ++i) out.u(i, k) /= r;
        ready[k] = true;
        ++basis;
        break;
      }
    }
  }
  return out;
}

}  // namespace detail

/// Thin SVD by one-sided Jacobi. Intended as an accuracy oracle for small
/// matrices (min dimension <= 64), not as a production factorization.
inline SvdResult svd(const Matrix& m, std::size_t max_sweeps = 10000) {
  require(std::min(m.rows(), m.cols()) <= 64, "svd: oracle-scale only (min dimension <= 64)");
  require(all_finite(m.data()), "svd: non-finite entry");
  if (m.rows() >= m.cols()) return detail::jacobi_svd_tall(m, max_sweeps);
  SvdResult t = detail::jacobi_svd_tall(m.transpose(), max_sweeps);
  return SvdResult{std::move(t.v), std::move(t.s), std::move(t.u)};
}

/// Frobenius error of the best rank-r approximation: sqrt(sum_{i>r} s_i^2).
inline double truncation_error(std::span<const double> singular_values, std::size_t r) {
  require(r <= singular_values.size(), "truncation_error: r exceeds number of singular values");
  double tail = 0.0;
  for (std::size_t i = r; i < singular_values.size(); ++i) tail += singular_values[i] * singular_values[i];
  return std::sqrt(tail);
}

// ---------------------------------------------------------------------------
// Sparse selection

struct SparseVector {
  std::size_t dim = 0;
  std::vector<std::size_t> indices;  // strictly increasing
  Vector values;

  Vector to_dense() const {
    Vector out(dim, 0.0);
    for (std::size_t i = 0; i < indices.size(); ++i) out[indices[i]] = values[i];
    return out;
  }
  friend bool operator==(const SparseVector&, const SparseVector&) = default;
};

/// Keeps the k entries of largest magnitude. Equal magnitudes resolve to the lower index.
inline SparseVector top_k_select(std::span<const double> v, std::size_t k) {
  require(k <= v.size(), "top_k_select: k exceeds dimension");
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  auto larger = [&](std::size_t a, std::size_t b) {
    const double ma = std::abs(v[a]), mb = std::abs(v[b]);
    return ma != mb ? ma > mb : a < b;
  };
  if (k < v.size()) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), larger);
  order.resize(k);
  std::sort(order.begin(), order.end());
  SparseVector out{v.size(), std::move(order), {}};
  out.values.reserve(k);
  for (std::size_t idx : out.indices) out.values.push_back(v[idx]);
  return out;
}

// ---------------------------------------------------------------------------
// Similarity

/// <a,b>/(|a||b|). Throws UndefinedSimilarity when both vectors are zero; a single
/// zero vector is orthogonal to everything and yields 0.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "cosine_similarity: dimension mismatch");
  const double aa = dot(a, a), bb = dot(b, b);
  if (aa == 0.0 && bb == 0.0) throw UndefinedSimilarity("cosine_similarity: both vectors are zero");
  if (aa == 0.0 || bb == 0.0) return 0.0;
  // sqrt(aa·bb) rather than |a|·|b| so that cos(a, a) is exactly 1.
  const double denom = std::isfinite(aa * bb) && aa * bb > 0.0 ? std::sqrt(aa * bb) : std::sqrt(aa) * std::sqrt(bb);
  return std::clamp(dot(a, b) / denom, -1.0, 1.0);
}

}  // namespace gradshield
