#include <doctest.h>

#include <cmath>

#include "dfkt/errors.hpp"
#include "dfkt/posembed.hpp"

using namespace dfkt;

TEST_CASE("grid coordinates") {
    const auto ext = build_grid({8, 2, GridMode::extrapolate});
    REQUIRE(ext.size() == 8);
    for (int i = 0; i < 8; ++i) CHECK(ext[static_cast<std::size_t>(i)] == i);

    const auto res = build_grid({8, 2, GridMode::resample});
    REQUIRE(res.size() == 8);
    CHECK(res.front() == 0.0);
    CHECK(res.back() == 4.0);
    for (int i = 0; i < 8; ++i) CHECK(res[static_cast<std::size_t>(i)] == doctest::Approx(i * 4.0 / 7.0));
}

TEST_CASE("resampled extent is constant, extrapolated extent grows") {
    for (auto [g, s] : {std::pair{8, 1}, {16, 2}, {32, 4}}) {
        CHECK(build_grid({g, s, GridMode::resample}).back() == 8.0);
        CHECK(build_grid({g, s, GridMode::extrapolate}).back() == g - 1);
    }
}

TEST_CASE("sincos_2d channel layout") {
    const GridDescriptor d{4, 1, GridMode::extrapolate};
    const MatrixD e = sincos_2d(d, 8);
    REQUIRE(e.rows() == 16);
    REQUIRE(e.cols() == 8);
    // Position (row 2, col 3): first half encodes the row, second the column.
    const Eigen::Index p = 2 * 4 + 3;
    for (int k = 0; k < 2; ++k) {
        const double w = std::pow(10000.0, -2.0 * k / 4);
        CHECK(e(p, 2 * k) == doctest::Approx(std::sin(2.0 * w)));
        CHECK(e(p, 2 * k + 1) == doctest::Approx(std::cos(2.0 * w)));
        CHECK(e(p, 4 + 2 * k) == doctest::Approx(std::sin(3.0 * w)));
        CHECK(e(p, 4 + 2 * k + 1) == doctest::Approx(std::cos(3.0 * w)));
    }
    CHECK_THROWS_AS(sincos_2d(d, 6), ParameterError);
}

TEST_CASE("resampled embedding keeps corner positions across resolutions") {
    const MatrixD lo = sincos_2d({4, 1, GridMode::resample}, 16);
    const MatrixD hi = sincos_2d({8, 2, GridMode::resample}, 16);
    CHECK((lo.row(0) - hi.row(0)).norm() < 1e-12);
    CHECK((lo.row(15) - hi.row(63)).norm() < 1e-12);
}

TEST_CASE("grid descriptor validation") {
    CHECK_THROWS_AS((GridDescriptor{0, 1, GridMode::resample}.validate()), ParameterError);
    CHECK_THROWS_AS((GridDescriptor{4, 0, GridMode::resample}.validate()), ParameterError);
    CHECK_THROWS_AS((GridDescriptor{6, 4, GridMode::resample}.validate()), ParameterError);
}
