#pragma once

// Double-precision training-graph primitives shared by the distillation and
// pretraining translation units. Internal; not installed.

#include <algorithm>
#include <cmath>
#include <vector>

#include "caprese/matrix.hpp"
#include "caprese/tokenizer.hpp"

namespace caprese {
namespace detail {

inline double silu_d(double s) { return s / (1.0 + std::exp(-s)); }

// d/ds silu(s) = sig(s) (1 + s (1 - sig(s))).
inline double dsilu_d(double s) {
    const double sig = 1.0 / (1.0 + std::exp(-s));
    return sig * (1.0 + s * (1.0 - sig));
}

inline MatrixD embed_rows_d(const TokenSequence& tokens, const MatrixD& embedding) {
    MatrixD x(tokens.size(), embedding.cols);
    for (size_t i = 0; i < tokens.size(); ++i) {
        const double* src = embedding.row(size_t(tokens[i]));
        std::copy(src, src + embedding.cols, x.row(i));
    }
    return x;
}

constexpr double kNormEps = 1e-5;

template <class Gain>
MatrixD rmsnorm_d(const MatrixD& x, const Gain* gain, std::vector<double>* inv_out) {
    MatrixD y(x.rows, x.cols);
    if (inv_out) inv_out->assign(x.rows, 0.0);
    for (size_t i = 0; i < x.rows; ++i) {
        const double* row = x.row(i);
        double mean_sq = 0.0;
        for (size_t j = 0; j < x.cols; ++j) mean_sq += row[j] * row[j];
        mean_sq /= double(x.cols);
        const double inv = 1.0 / std::sqrt(mean_sq + kNormEps);
        if (inv_out) (*inv_out)[i] = inv;
        double* out = y.row(i);
        for (size_t j = 0; j < x.cols; ++j) out[j] = row[j] * inv * double(gain[j]);
    }
    return y;
}

// dx += pullback of rmsnorm at x given upstream dy; the gain stays fixed.
template <class Gain>
void rmsnorm_backward_d(const MatrixD& x, const Gain* gain,
                        const std::vector<double>& inv, const MatrixD& dy, MatrixD& dx) {
    const size_t d = x.cols;
    for (size_t i = 0; i < x.rows; ++i) {
        const double* xr = x.row(i);
        const double* dyr = dy.row(i);
        double* dxr = dx.row(i);
        double dot = 0.0;
        for (size_t j = 0; j < d; ++j) dot += dyr[j] * double(gain[j]) * xr[j];
        const double k = inv[i] * inv[i] * inv[i] * dot / double(d);
        for (size_t j = 0; j < d; ++j) dxr[j] += dyr[j] * double(gain[j]) * inv[i] - xr[j] * k;
    }
}

// Rotates adjacent pairs within each head; sign < 0 applies the transpose.
inline void rope_rows_d(MatrixD& m, size_t head_dim, size_t start_pos, double sign) {
    const size_t n_heads = m.cols / head_dim;
    for (size_t i = 0; i < m.rows; ++i) {
        const double pos = double(start_pos + i);
        double* row = m.row(i);
        for (size_t h = 0; h < n_heads; ++h) {
            double* head = row + h * head_dim;
            for (size_t p = 0; p + 1 < head_dim; p += 2) {
                const double angle = pos * std::pow(10000.0, -double(p) / double(head_dim));
                const double c = std::cos(angle);
                const double s = std::sin(angle) * sign;
                const double a = head[p];
                const double b = head[p + 1];
                head[p] = a * c - b * s;
                head[p + 1] = a * s + b * c;
            }
        }
    }
}

}  // namespace detail
}  // namespace caprese
