#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <vector>

#include "caprese/errors.hpp"
#include "caprese/rng.hpp"

namespace caprese {

// Dense row-major matrix. The public engine type is Mat<float>; tests and
// verification paths instantiate Mat<double>.
template <typename T>
struct Mat {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<T> data;  // rows * cols, row-major

    Mat() = default;
    Mat(size_t r, size_t c) : rows(r), cols(c), data(r * c, T(0)) {}
    Mat(size_t r, size_t c, std::vector<T> d) : rows(r), cols(c), data(std::move(d)) {
        if (data.size() != rows * cols) throw ShapeError("matrix data length != rows*cols");
    }

    T* row(size_t i) { return data.data() + i * cols; }
    const T* row(size_t i) const { return data.data() + i * cols; }
    T& at(size_t i, size_t j) { return data[i * cols + j]; }
    const T& at(size_t i, size_t j) const { return data[i * cols + j]; }
    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

using Matrix = Mat<float>;
using MatrixD = Mat<double>;

// When on, float matrix products accumulate in 64-bit. Test oracles flip this
// to separate algorithmic error from precision error.
std::atomic<bool>& verification_mode_flag();
inline bool verification_mode() { return verification_mode_flag().load(std::memory_order_relaxed); }
inline void set_verification_mode(bool on) { verification_mode_flag().store(on, std::memory_order_relaxed); }

template <typename T>
bool all_finite(const Mat<T>& m) {
    for (const T& v : m.data)
        if (!std::isfinite(double(v))) return false;
    return true;
}

namespace detail {

// C = A * B with accumulation carried in Acc.
template <typename T, typename Acc>
void matmul_impl(const Mat<T>& a, const Mat<T>& b, Mat<T>& c) {
    std::vector<Acc> acc(b.cols);
    for (size_t i = 0; i < a.rows; ++i) {
        std::fill(acc.begin(), acc.end(), Acc(0));
        const T* arow = a.row(i);
        for (size_t k = 0; k < a.cols; ++k) {
            const Acc aik = Acc(arow[k]);
            const T* brow = b.row(k);
            for (size_t j = 0; j < b.cols; ++j) acc[j] += aik * Acc(brow[j]);
        }
        T* crow = c.row(i);
        for (size_t j = 0; j < b.cols; ++j) crow[j] = T(acc[j]);
    }
}

}  // namespace detail

template <typename T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
    if (a.cols != b.rows) throw ShapeError("matmul: inner dimensions differ");
    Mat<T> c(a.rows, b.cols);
    if constexpr (sizeof(T) == sizeof(float)) {
        if (verification_mode()) {
            detail::matmul_impl<T, double>(a, b, c);
            return c;
        }
    }
    detail::matmul_impl<T, T>(a, b, c);
    return c;
}

template <typename T>
Mat<T> transpose(const Mat<T>& a) {
    Mat<T> t(a.cols, a.rows);
    for (size_t i = 0; i < a.rows; ++i)
        for (size_t j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

template <typename T>
Mat<T> identity(size_t n) {
    Mat<T> m(n, n);
    for (size_t i = 0; i < n; ++i) m.at(i, i) = T(1);
    return m;
}

template <typename T>
void fill_normal(Mat<T>& m, Rng& rng, double stddev = 1.0) {
    for (T& v : m.data) v = T(rng.normal() * stddev);
}

template <typename T>
void fill_uniform(Mat<T>& m, Rng& rng, double lo, double hi) {
    for (T& v : m.data) v = T(lo + (hi - lo) * rng.uniform());
}

template <typename T>
double frobenius_norm(const Mat<T>& m) {
    double acc = 0.0;
    for (const T& v : m.data) acc += double(v) * double(v);
    return std::sqrt(acc);
}

// ||a - b||_F / max(||b||_F, tiny)
template <typename T>
double relative_error(const Mat<T>& a, const Mat<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("relative_error: shape mismatch");
    double diff = 0.0;
    double ref = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = double(a.data[i]) - double(b.data[i]);
        diff += d * d;
        ref += double(b.data[i]) * double(b.data[i]);
    }
    return std::sqrt(diff) / std::max(std::sqrt(ref), 1e-30);
}

template <typename From, typename To>
Mat<To> convert(const Mat<From>& a) {
    Mat<To> out(a.rows, a.cols);
    for (size_t i = 0; i < a.size(); ++i) out.data[i] = To(a.data[i]);
    return out;
}

inline MatrixD widen(const Matrix& a) { return convert<float, double>(a); }
inline Matrix narrow(const MatrixD& a) { return convert<double, float>(a); }

}  // namespace caprese
