#include <cmath>
#include <cstring>
#include <vector>

#include "caprese/rng.hpp"
#include "doctest.h"

using namespace caprese;

TEST_CASE("same seed reproduces the same stream") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
    a.reseed(7);
    b.reseed(7);
    for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
}

TEST_CASE("different seeds and forks diverge") {
    Rng a(1), b(2);
    int same = 0;
    for (int i = 0; i < 64; ++i) same += (a.next_u64() == b.next_u64());
    CHECK(same == 0);

    Rng base(9);
    Rng f1 = base.fork(0);
    Rng f2 = base.fork(1);
    same = 0;
    for (int i = 0; i < 64; ++i) same += (f1.next_u64() == f2.next_u64());
    CHECK(same == 0);

    // Forking is a pure function of parent state and stream id.
    Rng g1 = base.fork(0);
    CHECK(g1.next_u64() == Rng(9).fork(0).next_u64());
}

TEST_CASE("uniform stays in [0,1) and is roughly flat") {
    Rng rng(123);
    const int n = 100000;
    int buckets[10] = {0};
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        buckets[int(u * 10.0)]++;
    }
    // Each bucket expects 10000, sigma ~ 95; allow 5 sigma.
    for (int b : buckets) CHECK(std::abs(b - 10000) < 500);
}

TEST_CASE("below(n) covers [0,n) uniformly") {
    Rng rng(77);
    const uint64_t n = 7;
    std::vector<int> counts(n, 0);
    const int draws = 70000;
    for (int i = 0; i < draws; ++i) {
        const uint64_t v = rng.below(n);
        REQUIRE(v < n);
        counts[v]++;
    }
    for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}

TEST_CASE("normal has unit moments") {
    Rng rng(2024);
    const int n = 200000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sum2 += x * x;
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    CHECK(std::abs(mean) < 0.02);       // sigma_mean ~ 0.0022
    CHECK(std::abs(var - 1.0) < 0.03);  // sigma_var ~ 0.0032
}

TEST_CASE("hash_bytes matches FNV-1a reference values") {
    // Reference vectors for 64-bit FNV-1a.
    CHECK(hash_bytes("", 0) == 0xcbf29ce484222325ull);
    CHECK(hash_bytes("a", 1) == 0xaf63dc4c8601ec8cull);
    CHECK(hash_bytes("foobar", 6) == 0x85944171f73967e8ull);

    const char payload[] = "caprese";
    CHECK(hash_bytes(payload, 7) == hash_bytes(payload, 7));
    CHECK(hash_bytes(payload, 7) != hash_bytes(payload, 6));
}

TEST_CASE("hash_combine is order sensitive") {
    CHECK(hash_combine(1, 2) != hash_combine(2, 1));
    CHECK(hash_combine(1, 2) == hash_combine(1, 2));
}
