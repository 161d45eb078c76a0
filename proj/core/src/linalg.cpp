#include "caprese/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace caprese {

namespace {

constexpr double kJacobiTol = 1e-10;
constexpr int kJacobiMaxSweeps = 60;

// Hestenes one-sided Jacobi on the columns of w (m x n, n <= m expected by
// the caller). Orthogonalizes column pairs until every normalized inner
// product falls below kJacobiTol.
void jacobi_orthogonalize(MatrixD& w, MatrixD& v) {
    const size_t m = w.rows;
    const size_t n = w.cols;
    for (int sweep = 0; sweep < kJacobiMaxSweeps; ++sweep) {
        double worst = 0.0;
        for (size_t i = 0; i + 1 < n; ++i) {
            for (size_t j = i + 1; j < n; ++j) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (size_t r = 0; r < m; ++r) {
                    const double wi = w.at(r, i);
                    const double wj = w.at(r, j);
                    alpha += wi * wi;
                    beta += wj * wj;
                    gamma += wi * wj;
                }
                if (alpha == 0.0 || beta == 0.0) continue;
                const double rel = std::fabs(gamma) / std::sqrt(alpha * beta);
                worst = std::max(worst, rel);
                if (rel <= kJacobiTol) continue;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (size_t r = 0; r < m; ++r) {
                    const double wi = w.at(r, i);
                    const double wj = w.at(r, j);
                    w.at(r, i) = c * wi - s * wj;
                    w.at(r, j) = s * wi + c * wj;
                }
                for (size_t r = 0; r < n; ++r) {
                    const double vi = v.at(r, i);
                    const double vj = v.at(r, j);
                    v.at(r, i) = c * vi - s * vj;
                    v.at(r, j) = s * vi + c * vj;
                }
            }
        }
        if (worst <= kJacobiTol) return;
    }
    throw NumericError("svd: Jacobi sweeps did not converge");
}

// Replaces near-zero columns of u with vectors orthonormal to the rest so a
// rank-deficient input still yields a usable thin basis.
void complete_orthonormal(MatrixD& u, const std::vector<bool>& degenerate) {
    const size_t m = u.rows;
    const size_t n = u.cols;
    for (size_t j = 0; j < n; ++j) {
        if (!degenerate[j]) continue;
        bool placed = false;
        for (size_t e = 0; e < m && !placed; ++e) {
            std::vector<double> cand(m, 0.0);
            cand[e] = 1.0;
            for (size_t k = 0; k < n; ++k) {
                if (degenerate[k] && k >= j) continue;  // not yet filled
                double dot = 0.0;
                for (size_t r = 0; r < m; ++r) dot += cand[r] * u.at(r, k);
                for (size_t r = 0; r < m; ++r) cand[r] -= dot * u.at(r, k);
            }
            double norm = 0.0;
            for (double c : cand) norm += c * c;
            norm = std::sqrt(norm);
            if (norm > 0.5) {
                for (size_t r = 0; r < m; ++r) u.at(r, j) = cand[r] / norm;
                placed = true;
            }
        }
        if (!placed) throw NumericError("svd: orthonormal completion failed");
    }
}

SvdResultD svd_tall(const MatrixD& a, size_t rank) {
    const size_t m = a.rows;
    const size_t n = a.cols;
    MatrixD w = a;
    MatrixD v = identity<double>(n);
    jacobi_orthogonalize(w, v);

    std::vector<double> norms(n);
    for (size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (size_t r = 0; r < m; ++r) acc += w.at(r, j) * w.at(r, j);
        norms[j] = std::sqrt(acc);
    }
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t(0));
    std::sort(order.begin(), order.end(), [&](size_t x, size_t y) {
        if (norms[x] != norms[y]) return norms[x] > norms[y];
        return x < y;
    });

    const size_t k = (rank == 0) ? n : rank;
    const double smax = norms.empty() ? 0.0 : norms[order[0]];
    const double tiny = std::max(smax, 1.0) * 1e-300;

    SvdResultD out;
    out.u = MatrixD(m, k);
    out.v = MatrixD(n, k);
    out.singular_values.resize(k);
    std::vector<bool> degenerate(k, false);
    for (size_t c = 0; c < k; ++c) {
        const size_t src = order[c];
        const double s = norms[src];
        out.singular_values[c] = s;
        if (s > tiny) {
            for (size_t r = 0; r < m; ++r) out.u.at(r, c) = w.at(r, src) / s;
        } else {
            out.singular_values[c] = 0.0;
            degenerate[c] = true;
        }
        for (size_t r = 0; r < n; ++r) out.v.at(r, c) = v.at(r, src);
    }
    complete_orthonormal(out.u, degenerate);
    return out;
}

template <typename T>
std::vector<size_t> topk_impl(const std::vector<T>& values, size_t k) {
    if (k > values.size()) throw ShapeError("topk_indices: k exceeds value count");
    std::vector<size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), size_t(0));
    auto better = [&](size_t x, size_t y) {
        if (values[x] != values[y]) return values[x] > values[y];
        return x < y;
    };
    std::nth_element(idx.begin(), idx.begin() + std::min(k, idx.size()), idx.end(), better);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

template <typename T>
T percentile_impl(std::vector<T> values, double p) {
    if (values.empty()) throw DomainError("percentile: empty input");
    if (p < 0.0 || p > 1.0) throw DomainError("percentile: p outside [0, 1]");
    std::sort(values.begin(), values.end());
    const double raw = std::ceil(p * double(values.size())) - 1.0;
    const size_t idx = size_t(std::clamp(raw, 0.0, double(values.size() - 1)));
    return values[idx];
}

}  // namespace

SvdResultD truncated_svd(const MatrixD& a, size_t rank) {
    if (a.rows == 0 || a.cols == 0) throw ShapeError("svd: empty matrix");
    if (rank > std::min(a.rows, a.cols)) throw ShapeError("svd: rank exceeds min(rows, cols)");
    if (a.rows >= a.cols) return svd_tall(a, rank);
    // Wide input: factor the transpose and swap the roles of U and V.
    SvdResultD t = svd_tall(transpose(a), rank);
    SvdResultD out;
    out.u = std::move(t.v);
    out.v = std::move(t.u);
    out.singular_values = std::move(t.singular_values);
    return out;
}

SvdResult truncated_svd(const Matrix& a, size_t rank) {
    SvdResultD d = truncated_svd(widen(a), rank);
    SvdResult out;
    out.u = narrow(d.u);
    out.v = narrow(d.v);
    out.singular_values.assign(d.singular_values.begin(), d.singular_values.end());
    return out;
}

std::vector<size_t> topk_indices(const std::vector<float>& values, size_t k) {
    return topk_impl(values, k);
}

std::vector<size_t> topk_indices(const std::vector<double>& values, size_t k) {
    return topk_impl(values, k);
}

float percentile(std::vector<float> values, double p) {
    return percentile_impl(std::move(values), p);
}

double percentile(std::vector<double> values, double p) {
    return percentile_impl(std::move(values), p);
}

MatrixD solve_spd(const MatrixD& a, const MatrixD& b, double ridge) {
    if (a.rows != a.cols) throw ShapeError("solve_spd: matrix not square");
    if (b.rows != a.rows) throw ShapeError("solve_spd: rhs row mismatch");
    const size_t n = a.rows;
    MatrixD l(n, n);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j <= i; ++j) {
            double sum = a.at(i, j) + (i == j ? ridge : 0.0);
            for (size_t k = 0; k < j; ++k) sum -= l.at(i, k) * l.at(j, k);
            if (i == j) {
                if (sum <= 0.0)
                    throw NumericError("solve_spd: matrix not positive definite");
                l.at(i, i) = std::sqrt(sum);
            } else {
                l.at(i, j) = sum / l.at(j, j);
            }
        }
    }
    // L y = b, then L^T x = y, column by column.
    MatrixD x = b;
    for (size_t c = 0; c < b.cols; ++c) {
        for (size_t i = 0; i < n; ++i) {
            double sum = x.at(i, c);
            for (size_t k = 0; k < i; ++k) sum -= l.at(i, k) * x.at(k, c);
            x.at(i, c) = sum / l.at(i, i);
        }
        for (size_t ii = n; ii > 0; --ii) {
            const size_t i = ii - 1;
            double sum = x.at(i, c);
            for (size_t k = i + 1; k < n; ++k) sum -= l.at(k, i) * x.at(k, c);
            x.at(i, c) = sum / l.at(i, i);
        }
    }
    return x;
}

}  // namespace caprese
