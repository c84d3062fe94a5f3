#include <cmath>
#include <vector>

#include <doctest.h>

#include "editlab/rng.hpp"

using namespace editlab;

TEST_CASE("rng streams are seed-deterministic") {
    Rng a(42), b(42), c(43);
    bool all_equal = true, any_diff = false;
    for (int i = 0; i < 100; ++i) {
        const uint64_t x = a.next();
        all_equal &= (x == b.next());
        any_diff |= (x != c.next());
    }
    CHECK(all_equal);
    CHECK(any_diff);
}

TEST_CASE("uniform stays in [0,1) and normal has unit moments") {
    Rng rng(1);
    const int n = 100000;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        const double z = rng.normal();
        sum += z;
        sumsq += z * z;
    }
    CHECK(std::fabs(sum / n) < 0.02);
    CHECK(std::fabs(sumsq / n - 1.0) < 0.03);
}

TEST_CASE("index respects bounds and covers the range") {
    Rng rng(2);
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 7000; ++i) {
        const size_t k = rng.index(7);
        REQUIRE(k < 7);
        hits[k]++;
    }
    for (int h : hits) CHECK(h > 700);
}

TEST_CASE("derive_seed decorrelates salts") {
    CHECK(derive_seed(1, 0) != derive_seed(1, 1));
    CHECK(derive_seed(1, 0) != derive_seed(2, 0));
    CHECK(derive_seed(1, 5) == derive_seed(1, 5));
}

TEST_CASE("fnv1a matches published vectors") {
    Fnv1a empty;
    CHECK(empty.digest() == 0xcbf29ce484222325ull);

    Fnv1a a;
    a.update("a", 1);
    CHECK(a.digest() == 0xaf63dc4c8601ec8cull);

    Fnv1a ab;
    ab.update("ab", 2);
    Fnv1a ab2;
    ab2.update("a", 1);
    ab2.update("b", 1);
    CHECK(ab.digest() == ab2.digest());
}

TEST_CASE("hex_u64 formats fixed width") {
    CHECK(hex_u64(0) == "0000000000000000");
    CHECK(hex_u64(0xdeadbeefull) == "00000000deadbeef");
    CHECK(hex_u64(UINT64_MAX) == "ffffffffffffffff");
}
