#include <doctest.h>

#include <cstring>
#include <random>

#include "dfkt/errors.hpp"
#include "dfkt/guidance.hpp"

using namespace dfkt;

namespace {

std::vector<double> randn(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> d;
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

} // namespace

TEST_CASE("double guidance worked example") {
    const std::vector<double> cs{1.0, 0.0}, os{0.5, 0.5}, oo{0.0, 1.0};
    const auto out = compose_double_cfg(cs, os, oo, {2.0, 0.75});
    // 2 * [0.75 cs + 0.25 os] - oo
    CHECK(out[0] == doctest::Approx(2.0 * (0.75 + 0.125)));
    CHECK(out[1] == doctest::Approx(2.0 * 0.125 - 1.0));
    const auto simple = compose_double_cfg(std::vector<double>{2.0, 0.0}, std::vector<double>{9.0, 9.0},
                                           std::vector<double>{0.5, 1.5}, {1.5, 1.0});
    CHECK(simple[0] == doctest::Approx(2.75));
    CHECK(simple[1] == doctest::Approx(-0.75));
}

TEST_CASE("double guidance reductions are exact") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const auto cs = randn(64, rng), os = randn(64, rng), oo = randn(64, rng);
        CHECK(bitwise_equal(compose_double_cfg(cs, os, oo, {1.0, 1.0}), cs));
        CHECK(bitwise_equal(compose_double_cfg(cs, os, oo, {0.0, 0.3}), oo));
        const auto with_os = compose_double_cfg(cs, os, oo, {1.7, 1.0});
        const auto other_os = compose_double_cfg(cs, randn(64, rng), oo, {1.7, 1.0});
        CHECK(bitwise_equal(with_os, other_os));
    }
}

TEST_CASE("float path agrees with double path") {
    std::mt19937_64 rng(2);
    const auto cs = randn(32, rng), os = randn(32, rng), oo = randn(32, rng);
    std::vector<float> fcs(cs.begin(), cs.end()), fos(os.begin(), os.end()), foo(oo.begin(), oo.end()), out(32);
    compose_double_cfg(fcs, fos, foo, {1.5, 0.6}, out);
    const auto ref = compose_double_cfg(std::vector<double>(fcs.begin(), fcs.end()),
                                        std::vector<double>(fos.begin(), fos.end()),
                                        std::vector<double>(foo.begin(), foo.end()), {1.5, 0.6});
    for (std::size_t i = 0; i < 32; ++i) CHECK(out[i] == doctest::Approx(ref[i]).epsilon(1e-6));
}

TEST_CASE("length mismatch") {
    const std::vector<double> a(3), b(4);
    CHECK_THROWS_AS(compose_double_cfg(a, a, b, {}), ShapeError);
    std::vector<float> f(3), g(2);
    CHECK_THROWS_AS(compose_double_cfg(f, f, f, {}, g), ShapeError);
}

TEST_CASE("guidance scaling law") {
    CHECK(scale_guidance(1.5, 2.0) == 2.0);
    CHECK(scale_guidance(1.5, 1.0) == 1.5);
    CHECK(scale_guidance(1.0, 4.0) == 1.0);
    CHECK(scale_guidance(3.0, 0.5) == 2.0);
}
