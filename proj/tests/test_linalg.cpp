#include <cmath>
#include <vector>

#include "caprese/linalg.hpp"
#include "caprese/matrix.hpp"
#include "caprese/rng.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace caprese;

namespace {

template <typename T>
Mat<T> reconstruct(const SvdResultT<T>& svd) {
    Mat<T> us = svd.u;
    for (size_t i = 0; i < us.rows; ++i)
        for (size_t j = 0; j < us.cols; ++j) us.at(i, j) *= svd.singular_values[j];
    return matmul(us, transpose(svd.v));
}

template <typename T>
double max_orthonormality_defect(const Mat<T>& m) {
    double worst = 0.0;
    for (size_t i = 0; i < m.cols; ++i)
        for (size_t j = i; j < m.cols; ++j) {
            double dot = 0.0;
            for (size_t r = 0; r < m.rows; ++r) dot += double(m.at(r, i)) * double(m.at(r, j));
            worst = std::max(worst, std::fabs(dot - (i == j ? 1.0 : 0.0)));
        }
    return worst;
}

MatrixD random_matrix(size_t r, size_t c, uint64_t seed) {
    Rng rng(seed);
    MatrixD m(r, c);
    fill_normal(m, rng);
    return m;
}

}  // namespace

// ---- matmul ---------------------------------------------------------------

TEST_CASE("matmul identity and hand case") {
    Matrix a(2, 2, {1, 2, 3, 4});
    CHECK(matmul(identity<float>(2), a).data == a.data);

    Matrix b(2, 1, {1, 1});
    Matrix c = matmul(a, b);
    CHECK(c.rows == 2);
    CHECK(c.cols == 1);
    CHECK(c.at(0, 0) == 3.0f);
    CHECK(c.at(1, 0) == 7.0f);
}

TEST_CASE("matmul shape mismatch throws") {
    Matrix a(2, 3), b(4, 2);
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul matches scalar-loop oracle") {
    const MatrixD a = random_matrix(5, 7, 11);
    const MatrixD b = random_matrix(7, 3, 12);
    const MatrixD got = matmul(a, b);
    const MatrixD want = oracle::matmul(a, b);
    CHECK(relative_error(got, want) < 1e-14);
}

TEST_CASE("matmul associativity") {
    const MatrixD ad = random_matrix(6, 5, 21);
    const MatrixD bd = random_matrix(5, 4, 22);
    const MatrixD cd = random_matrix(4, 3, 23);

    SUBCASE("32-bit within 1e-3") {
        const Matrix a = narrow(ad), b = narrow(bd), c = narrow(cd);
        const Matrix lhs = matmul(matmul(a, b), c);
        const Matrix rhs = matmul(a, matmul(b, c));
        CHECK(relative_error(lhs, rhs) < 1e-3);
    }
    SUBCASE("64-bit mode within 1e-10") {
        const MatrixD lhs = matmul(matmul(ad, bd), cd);
        const MatrixD rhs = matmul(ad, matmul(bd, cd));
        CHECK(relative_error(lhs, rhs) < 1e-10);
    }
}

TEST_CASE("verification mode accumulates float products in double") {
    // Summing many tiny values into a large one loses every contribution at
    // float precision but keeps them all in a double accumulator.
    const size_t n = 4096;
    Matrix a(1, n + 1);
    Matrix b(n + 1, 1);
    a.at(0, 0) = 1.0f;
    b.at(0, 0) = 1.0f;
    for (size_t k = 1; k <= n; ++k) {
        a.at(0, k) = 1.0f;
        b.at(k, 0) = 1e-10f;
    }
    set_verification_mode(false);
    const float plain = matmul(a, b).at(0, 0);
    set_verification_mode(true);
    const float verified = matmul(a, b).at(0, 0);
    set_verification_mode(false);
    CHECK(plain == 1.0f);
    CHECK(verified > 1.0f);
    CHECK(verified == doctest::Approx(1.0f + n * 1e-10).epsilon(1e-6));
}

// ---- truncated_svd ----------------------------------------------------------

TEST_CASE("svd of diagonal matrix truncates cleanly") {
    Matrix a(3, 3);
    a.at(0, 0) = 3.0f;
    a.at(1, 1) = 2.0f;
    a.at(2, 2) = 1.0f;
    SvdResult svd = truncated_svd(a, 2);
    REQUIRE(svd.singular_values.size() == 2);
    CHECK(svd.singular_values[0] == doctest::Approx(3.0).epsilon(1e-6));
    CHECK(svd.singular_values[1] == doctest::Approx(2.0).epsilon(1e-6));
    Matrix rec = reconstruct(svd);
    CHECK(rec.at(0, 0) == doctest::Approx(3.0).epsilon(1e-5));
    CHECK(rec.at(1, 1) == doctest::Approx(2.0).epsilon(1e-5));
    CHECK(std::fabs(rec.at(2, 2)) < 1e-5);
}

TEST_CASE("rank-1 input reconstructs exactly at r=1") {
    Rng rng(31);
    MatrixD u(6, 1), v(4, 1);
    fill_normal(u, rng);
    fill_normal(v, rng);
    const MatrixD a = oracle::matmul(u, transpose(v));
    SvdResultD svd = truncated_svd(a, 1);
    CHECK(relative_error(reconstruct(svd), a) < 1e-12);
}

TEST_CASE("truncation error matches full-SVD oracle on random 8x6") {
    const MatrixD a = random_matrix(8, 6, 41);
    SvdResultD svd = truncated_svd(a, 3);
    const double err = relative_error(reconstruct(svd), a) * frobenius_norm(a);

    const std::vector<double> s = oracle::singular_values(a);
    REQUIRE(s.size() == 6);
    const double want = std::sqrt(s[3] * s[3] + s[4] * s[4] + s[5] * s[5]);
    CHECK(err == doctest::Approx(want).epsilon(1e-3));

    // Eckart-Young: no rank-3 approximation does better.
    const MatrixD oracle_rec = oracle::low_rank_approx(a, 3);
    double oracle_err = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a.data[i] - oracle_rec.data[i];
        oracle_err += d * d;
    }
    CHECK(err == doctest::Approx(std::sqrt(oracle_err)).epsilon(1e-6));
}

TEST_CASE("full-rank svd reconstructs the input") {
    SUBCASE("tall") {
        const MatrixD a = random_matrix(9, 5, 51);
        SvdResultD svd = truncated_svd(a);
        CHECK(relative_error(reconstruct(svd), a) < 1e-10);
    }
    SUBCASE("wide") {
        const MatrixD a = random_matrix(4, 7, 52);
        SvdResultD svd = truncated_svd(a);
        CHECK(relative_error(reconstruct(svd), a) < 1e-10);
    }
    SUBCASE("32-bit within 1e-4") {
        const Matrix a = narrow(random_matrix(8, 8, 53));
        SvdResult svd = truncated_svd(a);
        CHECK(relative_error(reconstruct(svd), a) < 1e-4);
    }
}

TEST_CASE("svd factors are orthonormal") {
    const MatrixD a = random_matrix(10, 6, 61);
    SvdResultD svd64 = truncated_svd(a, 4);
    CHECK(max_orthonormality_defect(svd64.u) < 1e-8);
    CHECK(max_orthonormality_defect(svd64.v) < 1e-8);

    SvdResult svd32 = truncated_svd(narrow(a), 4);
    CHECK(max_orthonormality_defect(svd32.u) < 1e-4);
    CHECK(max_orthonormality_defect(svd32.v) < 1e-4);

    for (size_t i = 1; i < svd64.singular_values.size(); ++i) {
        CHECK(svd64.singular_values[i] >= 0.0);
        CHECK(svd64.singular_values[i - 1] >= svd64.singular_values[i]);
    }
}

TEST_CASE("svd singular values match gram eigensolver oracle") {
    const MatrixD a = random_matrix(7, 9, 71);
    SvdResultD svd = truncated_svd(a);
    const std::vector<double> want = oracle::singular_values(a);
    REQUIRE(svd.singular_values.size() == want.size());
    for (size_t i = 0; i < want.size(); ++i)
        CHECK(svd.singular_values[i] == doctest::Approx(want[i]).epsilon(1e-9));
}

TEST_CASE("rank-deficient input still yields an orthonormal basis") {
    // Two identical columns force a zero singular value.
    MatrixD a = random_matrix(6, 3, 81);
    for (size_t r = 0; r < a.rows; ++r) a.at(r, 2) = a.at(r, 1);
    SvdResultD svd = truncated_svd(a);
    REQUIRE(svd.singular_values.size() == 3);
    CHECK(svd.singular_values[2] < 1e-12);
    CHECK(max_orthonormality_defect(svd.u) < 1e-8);
    CHECK(relative_error(reconstruct(svd), a) < 1e-10);
}

TEST_CASE("svd rank out of range throws") {
    const MatrixD a = random_matrix(4, 3, 91);
    CHECK_THROWS_AS(truncated_svd(a, 4), ShapeError);
}

// ---- topk_indices -----------------------------------------------------------

TEST_CASE("topk picks the largest and breaks ties low") {
    CHECK(topk_indices(std::vector<float>{0.6f, 1.0f, 0.8f}, 1) == std::vector<size_t>{1});
    CHECK(topk_indices(std::vector<float>{5, 5, 5}, 2) == std::vector<size_t>{0, 1});
    CHECK(topk_indices(std::vector<float>{3, 1, 2}, 3) == std::vector<size_t>{0, 1, 2});
    CHECK_THROWS_AS(topk_indices(std::vector<float>{1, 2}, 3), ShapeError);
}

TEST_CASE("topk matches argsort oracle and dominates excluded values") {
    Rng rng(101);
    for (int trial = 0; trial < 20; ++trial) {
        const size_t n = 1 + rng.below(40);
        const size_t k = 1 + rng.below(n);
        std::vector<double> v(n);
        // below(5) makes duplicates likely, exercising the tie rule.
        for (double& x : v) x = double(rng.below(5));
        const auto got = topk_indices(v, k);
        CHECK(got == oracle::topk(v, k));

        double min_kept = 1e300;
        for (size_t idx : got) min_kept = std::min(min_kept, v[idx]);
        std::vector<bool> kept(n, false);
        for (size_t idx : got) kept[idx] = true;
        for (size_t i = 0; i < n; ++i)
            if (!kept[i]) CHECK(min_kept >= v[i]);
    }
}

// ---- percentile ---------------------------------------------------------------

TEST_CASE("percentile nearest-rank examples") {
    CHECK(percentile(std::vector<float>{0.1f, 0.2f, 0.3f, 0.4f}, 0.5) == 0.2f);
    CHECK(percentile(std::vector<float>{4, 1, 3, 2}, 1.0) == 4.0f);
    CHECK(percentile(std::vector<float>{7}, 0.3) == 7.0f);
    CHECK(percentile(std::vector<float>{5, 6}, 0.0) == 5.0f);
    CHECK_THROWS_AS(percentile(std::vector<float>{}, 0.5), DomainError);
    CHECK_THROWS_AS(percentile(std::vector<float>{1}, 1.5), DomainError);
}

TEST_CASE("percentile matches sort oracle and is monotone in p") {
    Rng rng(111);
    std::vector<double> v(37);
    for (double& x : v) x = rng.normal();
    double prev = -1e300;
    for (int i = 0; i <= 20; ++i) {
        const double p = i / 20.0;
        const double got = percentile(v, p);
        CHECK(got == oracle::percentile(v, p));
        CHECK(got >= prev);
        prev = got;
    }
}

// ---- solve_spd -----------------------------------------------------------------

TEST_CASE("solve_spd solves a well-conditioned system") {
    const MatrixD m = random_matrix(6, 6, 121);
    MatrixD a = oracle::matmul(transpose(m), m);
    for (size_t i = 0; i < 6; ++i) a.at(i, i) += 1.0;
    const MatrixD b = random_matrix(6, 2, 122);
    const MatrixD x = solve_spd(a, b);
    CHECK(relative_error(oracle::matmul(a, x), b) < 1e-10);
}

TEST_CASE("solve_spd rejects indefinite input, ridge repairs it") {
    MatrixD a = identity<double>(3);
    a.at(2, 2) = -1.0;
    const MatrixD b = random_matrix(3, 1, 131);
    CHECK_THROWS_AS(solve_spd(a, b), NumericError);
    // Singular matrix: ridge makes it solvable.
    MatrixD zero(2, 2);
    const MatrixD b2 = random_matrix(2, 1, 132);
    CHECK_THROWS_AS(solve_spd(zero, b2), NumericError);
    const MatrixD x = solve_spd(zero, b2, 1e-3);
    CHECK(x.at(0, 0) == doctest::Approx(b2.at(0, 0) / 1e-3));
}
