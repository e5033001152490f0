// Copyright 2026 The dynlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense linear algebra for the engine. Storage and elementwise work are Eigen;
// products go through gemm_ascending so every output element is reduced in
// ascending inner-index order, independent of blocking or thread count.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "dynlora/errors.hpp"

namespace dynlora {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using ConstMatrixRef = Eigen::Ref<const MatrixT<Scalar>, 0, Eigen::OuterStride<>>;

template <typename Scalar>
using MatrixRef = Eigen::Ref<MatrixT<Scalar>, 0, Eigen::OuterStride<>>;

/// Reference element type. Everything outside linalg works in 64-bit.
using Matrix = MatrixT<double>;

enum class Sign : int { Plus = 1, Minus = -1 };

template <typename Derived>
std::string shape_string(const Eigen::EigenBase<Derived>& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

namespace detail {

// One R x C block of c held in registers. Each element still accumulates
// t = 0, 1, ... in order, so the result equals the plain loop bit for bit.
template <Index R, Index C, typename Scalar>
inline void gemm_block(const Scalar* __restrict a, Index lda, const Scalar* __restrict b, Index ldb,
                       Scalar* __restrict c, Index ldc, Index p) {
  Scalar acc[R][C] = {};
  for (Index t = 0; t < p; ++t) {
    const Scalar* bt = b + t * ldb;
    for (Index r = 0; r < R; ++r) {
      const Scalar av = a[r * lda + t];
      for (Index j = 0; j < C; ++j) acc[r][j] += av * bt[j];
    }
  }
  for (Index r = 0; r < R; ++r)
    for (Index j = 0; j < C; ++j) c[r * ldc + j] = acc[r][j];
}

template <typename Scalar>
inline void gemm_rows(const Scalar* __restrict a, Index lda, const Scalar* __restrict b, Index ldb,
                      Scalar* __restrict c, Index ldc, Index m, Index n, Index p) {
  for (Index i = 0; i < m; ++i) {
    Scalar* ci = c + i * ldc;
    for (Index j = 0; j < n; ++j) ci[j] = Scalar(0);
    const Scalar* ai = a + i * lda;
    for (Index t = 0; t < p; ++t) {
      const Scalar av = ai[t];
      const Scalar* bt = b + t * ldb;
      for (Index j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
}

}  // namespace detail

/// c[i*ldc + j] = sum_t a[i*lda + t] * b[t*ldb + j], t ascending from a zero
/// start. Overwrites c. Blocking only changes which elements are computed
/// together, never the order of any element's reduction.
template <typename Scalar>
void gemm_ascending(const Scalar* __restrict a, Index lda, const Scalar* __restrict b, Index ldb,
                    Scalar* __restrict c, Index ldc, Index m, Index n, Index p) {
  if (n == 1) {
    // Matrix-vector: interleave rows so independent sums overlap.
    constexpr Index kRows = 8;
    Index i0 = 0;
    for (; i0 + kRows <= m; i0 += kRows) {
      Scalar acc[kRows] = {};
      for (Index t = 0; t < p; ++t) {
        const Scalar bv = b[t * ldb];
        for (Index r = 0; r < kRows; ++r) acc[r] += a[(i0 + r) * lda + t] * bv;
      }
      for (Index r = 0; r < kRows; ++r) c[(i0 + r) * ldc] = acc[r];
    }
    detail::gemm_rows(a + i0 * lda, lda, b, ldb, c + i0 * ldc, ldc, m - i0, n, p);
    return;
  }
  // Two rows by 128 bytes of columns keeps the block in registers.
  constexpr Index kR = 2;
  constexpr Index kC = 128 / sizeof(Scalar);
  Index i0 = 0;
  for (; i0 + kR <= m; i0 += kR) {
    Index j0 = 0;
    for (; j0 + kC <= n; j0 += kC) {
      detail::gemm_block<kR, kC>(a + i0 * lda, lda, b + j0, ldb, c + i0 * ldc + j0, ldc, p);
    }
    if (j0 < n) detail::gemm_rows(a + i0 * lda, lda, b + j0, ldb, c + i0 * ldc + j0, ldc, kR, n - j0, p);
  }
  detail::gemm_rows(a + i0 * lda, lda, b, ldb, c + i0 * ldc, ldc, m - i0, n, p);
}

template <typename Scalar>
MatrixT<Scalar> matmul_ref(const ConstMatrixRef<Scalar>& a, const ConstMatrixRef<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + shape_string(a) + " x " +
                     shape_string(b) + ")");
  }
  MatrixT<Scalar> c(a.rows(), b.cols());
  gemm_ascending(a.data(), a.outerStride(), b.data(), b.outerStride(), c.data(), c.cols(),
                 a.rows(), b.cols(), a.cols());
  return c;
}

/// Deterministic matrix product. Accepts any Eigen expression; non-plain
/// operands are evaluated into row-major temporaries first.
template <typename DerivedA, typename DerivedB>
MatrixT<typename DerivedA::Scalar> matmul(const Eigen::MatrixBase<DerivedA>& a,
                                          const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  static_assert(std::is_same_v<Scalar, typename DerivedB::Scalar>, "matmul: scalar types differ");
  return matmul_ref<Scalar>(ConstMatrixRef<Scalar>(a.derived()), ConstMatrixRef<Scalar>(b.derived()));
}

// ---------------------------------------------------------------------------
// Exact in-place accumulation.
//
// Adding and later subtracting the same rounded product does not restore the
// target under IEEE arithmetic. Accumulated products are therefore snapped to
// a fixed dyadic lattice; when the target also lives on that lattice every
// add/subtract below the headroom bound is exact, so +p then -p is a no-op.

template <typename Scalar>
struct AccumulationLattice;

template <>
struct AccumulationLattice<double> {
  static constexpr int kFractionBits = 44;
  /// Sums stay exact while |value| < 2^(mantissa bits - fraction bits).
  static constexpr double kHeadroom = 512.0;
};

template <>
struct AccumulationLattice<float> {
  static constexpr int kFractionBits = 16;
  static constexpr float kHeadroom = 256.0f;
};

template <typename Scalar>
inline Scalar snap_to_lattice(Scalar v) {
  constexpr int bits = AccumulationLattice<Scalar>::kFractionBits;
  constexpr Scalar up = static_cast<Scalar>(1ULL << bits);
  constexpr Scalar down = Scalar(1) / up;
  return std::nearbyint(v * up) * down;
}

template <typename Derived>
void snap_in_place(Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  m = m.unaryExpr([](Scalar v) { return snap_to_lattice(v); });
}

/// target <- target + sign * snap(a x b), in place.
template <typename Scalar>
void accumulate(MatrixRef<Scalar> target, const ConstMatrixRef<Scalar>& a,
                const ConstMatrixRef<Scalar>& b, Sign sign) {
  if (a.cols() != b.rows() || target.rows() != a.rows() || target.cols() != b.cols()) {
    throw ShapeError("accumulate: target " + shape_string(target) + " does not conform to " +
                     shape_string(a) + " x " + shape_string(b));
  }
  const MatrixT<Scalar> product = matmul_ref<Scalar>(a, b);
  const Scalar s = static_cast<Scalar>(static_cast<int>(sign));
  for (Index i = 0; i < target.rows(); ++i) {
    for (Index j = 0; j < target.cols(); ++j) {
      target(i, j) += s * snap_to_lattice(product(i, j));
    }
  }
}

template <typename Scalar, typename DerivedA, typename DerivedB>
void accumulate(MatrixT<Scalar>& target, const Eigen::MatrixBase<DerivedA>& a,
                const Eigen::MatrixBase<DerivedB>& b, Sign sign) {
  accumulate<Scalar>(MatrixRef<Scalar>(target), ConstMatrixRef<Scalar>(a.derived()),
                     ConstMatrixRef<Scalar>(b.derived()), sign);
}

/// Stacks down factors vertically and up factors horizontally, preserving part
/// order, so that up_concat x down_concat == sum_i up_i x down_i.
template <typename Scalar>
std::pair<MatrixT<Scalar>, MatrixT<Scalar>> concat_rank(std::span<const MatrixT<Scalar>> downs,
                                                        std::span<const MatrixT<Scalar>> ups,
                                                        Index d_in, Index d_out) {
  if (downs.size() != ups.size()) {
    throw ShapeError("concat_rank: " + std::to_string(downs.size()) + " down parts but " +
                     std::to_string(ups.size()) + " up parts");
  }
  Index total_rank = 0;
  for (std::size_t i = 0; i < downs.size(); ++i) {
    const auto& d = downs[i];
    const auto& u = ups[i];
    if (d.cols() != d_in) {
      throw ShapeError("concat_rank: down part " + std::to_string(i) + " is " + shape_string(d) +
                       ", expected d_in=" + std::to_string(d_in));
    }
    if (u.rows() != d_out) {
      throw ShapeError("concat_rank: up part " + std::to_string(i) + " is " + shape_string(u) +
                       ", expected d_out=" + std::to_string(d_out));
    }
    if (u.cols() != d.rows()) {
      throw ShapeError("concat_rank: part " + std::to_string(i) + " rank mismatch (" +
                       shape_string(d) + " vs " + shape_string(u) + ")");
    }
    total_rank += d.rows();
  }
  MatrixT<Scalar> down_c(total_rank, d_in);
  MatrixT<Scalar> up_c(d_out, total_rank);
  Index offset = 0;
  for (std::size_t i = 0; i < downs.size(); ++i) {
    const Index r = downs[i].rows();
    down_c.middleRows(offset, r) = downs[i];
    up_c.middleCols(offset, r) = ups[i];
    offset += r;
  }
  return {std::move(down_c), std::move(up_c)};
}

template <typename Scalar>
std::pair<MatrixT<Scalar>, MatrixT<Scalar>> concat_rank(const std::vector<MatrixT<Scalar>>& downs,
                                                        const std::vector<MatrixT<Scalar>>& ups,
                                                        Index d_in, Index d_out) {
  return concat_rank<Scalar>(std::span<const MatrixT<Scalar>>(downs),
                             std::span<const MatrixT<Scalar>>(ups), d_in, d_out);
}

/// max|a - b| / max(max|b|, tiny). Zero when both are empty.
template <typename DerivedA, typename DerivedB>
double max_relative_difference(const Eigen::MatrixBase<DerivedA>& a,
                               const Eigen::MatrixBase<DerivedB>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("max_relative_difference: " + shape_string(a) + " vs " + shape_string(b));
  }
  if (a.size() == 0) return 0.0;
  const double scale = std::max(static_cast<double>(b.cwiseAbs().maxCoeff()), 1e-300);
  return static_cast<double>((a - b).cwiseAbs().maxCoeff()) / scale;
}

/// ||a - b||_F / ||b||_F, or ||a||_F when b is zero.
template <typename DerivedA, typename DerivedB>
double relative_frobenius(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("relative_frobenius: " + shape_string(a) + " vs " + shape_string(b));
  }
  const double diff = static_cast<double>((a - b).norm());
  const double ref = static_cast<double>(b.norm());
  return ref > 0.0 ? diff / ref : diff;
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace dynlora
