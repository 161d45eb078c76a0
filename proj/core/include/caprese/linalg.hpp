#pragma once

#include <cstddef>
#include <vector>

#include "caprese/matrix.hpp"

namespace caprese {

// Thin SVD A = U * diag(s) * V^T with singular values descending.
// U is m x k, V is n x k, k = min(m, n) unless truncated.
template <typename T>
struct SvdResultT {
    Mat<T> u;
    std::vector<T> singular_values;
    Mat<T> v;
};

using SvdResult = SvdResultT<float>;
using SvdResultD = SvdResultT<double>;

// One-sided Jacobi SVD on the smaller Gram side, computed internally in
// double regardless of the stored precision. rank == 0 keeps all min(m, n)
// components, otherwise the result is truncated to `rank`; rank > min(m, n)
// throws ShapeError. Throws NumericError if the sweep loop fails to converge.
SvdResult truncated_svd(const Matrix& a, size_t rank = 0);
SvdResultD truncated_svd(const MatrixD& a, size_t rank = 0);

// Indices of the k largest values. Ties break toward the lower index; the
// returned indices are sorted ascending. k > values.size() throws ShapeError.
std::vector<size_t> topk_indices(const std::vector<float>& values, size_t k);
std::vector<size_t> topk_indices(const std::vector<double>& values, size_t k);

// Nearest-rank percentile: sorts a copy ascending and returns the element at
// index ceil(p * n) - 1, clamped to [0, n-1]. p in [0, 1]; empty input throws
// DomainError.
float percentile(std::vector<float> values, double p);
double percentile(std::vector<double> values, double p);

// Solves (A + ridge * I) X = B for symmetric positive definite A via Cholesky.
// Throws NumericError when the factorization meets a non-positive pivot.
MatrixD solve_spd(const MatrixD& a, const MatrixD& b, double ridge = 0.0);

}  // namespace caprese
