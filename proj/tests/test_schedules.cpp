#include <doctest.h>

#include <cmath>
#include <random>

#include "dfkt/errors.hpp"
#include "dfkt/schedules.hpp"

using namespace dfkt;

TEST_CASE("quadratic schedule endpoints and cumulative product") {
    const NoiseSchedule s = quadratic_beta_schedule(1000);
    REQUIRE(s.num_steps() == 1000);
    CHECK(s.betas.front() == 0.00085);
    CHECK(s.betas.back() == 0.012);
    CHECK(s.scale == 1.0);
    // Golden value from a separate cumulative-product script.
    CHECK(s.alpha_bars.back() == doctest::Approx(0.00466010).epsilon(1e-5));

    long double prod = 1.0L;
    const double a = std::sqrt(0.00085), b = std::sqrt(0.012);
    for (int t = 0; t < 1000; ++t) {
        const double beta = std::pow(a + t / 999.0 * (b - a), 2);
        prod *= 1.0L - beta;
        CHECK(s.alpha_bars[static_cast<std::size_t>(t)] ==
              doctest::Approx(static_cast<double>(prod)).epsilon(1e-12));
        if (t > 0) CHECK(s.alpha_bars[static_cast<std::size_t>(t)] < s.alpha_bars[static_cast<std::size_t>(t - 1)]);
    }
}

TEST_CASE("quadratic schedule rejects bad ranges") {
    CHECK_THROWS_AS(quadratic_beta_schedule(1), ParameterError);
    CHECK_THROWS_AS(quadratic_beta_schedule(10, 0.0, 0.01), ParameterError);
    CHECK_THROWS_AS(quadratic_beta_schedule(10, 0.02, 0.01), ParameterError);
    CHECK_THROWS_AS(quadratic_beta_schedule(10, 0.01, 1.0), ParameterError);
}

TEST_CASE("sigma_of examples and inverse") {
    CHECK(sigma_of(1.0) == 0.0);
    CHECK(sigma_of(0.5) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(sigma_of(0.2) == doctest::Approx(2.0).epsilon(1e-15));
    CHECK_THROWS_AS(sigma_of(0.0), DomainError);
    CHECK_THROWS_AS(sigma_of(1.5), DomainError);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(1e-4, 1.0);
    for (int i = 0; i < 100; ++i) {
        const double ab = u(rng);
        CHECK(alpha_bar_of_sigma(sigma_of(ab)) == doctest::Approx(ab).epsilon(1e-12));
    }
}

TEST_CASE("rescale_alpha_bar examples") {
    CHECK(rescale_alpha_bar(0.37, 2, 2) == 0.37);
    CHECK(rescale_alpha_bar(1.0, 1, 4) == 1.0);
    CHECK(rescale_alpha_bar(0.5, 1, 2) == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("rescale_schedule moves every interior step towards noise") {
    const NoiseSchedule s = quadratic_beta_schedule(1000);
    const NoiseSchedule same = rescale_schedule(s, 1.0);
    CHECK(same.alpha_bars == s.alpha_bars);
    CHECK(same.betas == s.betas);

    const NoiseSchedule up = rescale_schedule(s, 2.0);
    CHECK(up.scale == 2.0);
    for (std::size_t t = 0; t < s.alpha_bars.size(); ++t) {
        CHECK(up.alpha_bars[t] < s.alpha_bars[t]);
        CHECK(up.betas[t] > 0.0);
        CHECK(up.betas[t] < 1.0);
    }
    // Betas and alpha-bars stay consistent.
    double prod = 1.0;
    for (std::size_t t = 0; t < up.betas.size(); ++t) {
        prod *= 1.0 - up.betas[t];
        CHECK(prod == doctest::Approx(up.alpha_bars[t]).epsilon(1e-10));
    }
    const NoiseSchedule back = rescale_schedule(up, 1.0);
    for (std::size_t t = 0; t < s.alpha_bars.size(); ++t) {
        CHECK(back.alpha_bars[t] == doctest::Approx(s.alpha_bars[t]).epsilon(1e-12));
    }
    CHECK_THROWS_AS(rescale_schedule(s, 0.0), ParameterError);
    CHECK_THROWS_AS(rescale_schedule(s, -1.0), ParameterError);
}

TEST_CASE("schedule_from_alpha_bars rejects non-decreasing input") {
    CHECK_THROWS_AS(schedule_from_alpha_bars({0.9, 0.95}, 1.0), ParameterError);
    CHECK_THROWS_AS(schedule_from_alpha_bars({0.9, 0.0}, 1.0), ParameterError);
    const NoiseSchedule ok = schedule_from_alpha_bars({0.9, 0.45}, 1.0);
    CHECK(ok.betas[0] == doctest::Approx(0.1));
    CHECK(ok.betas[1] == doctest::Approx(0.5));
}

TEST_CASE("control weight profile") {
    const ControlWeightProfile p2{ControlProfileKind::power_cosine, 2.0};
    CHECK(control_weight(0.5, p2) == doctest::Approx((1 - std::cos(M_PI / 4)) / 2).epsilon(1e-12));
    CHECK(control_weight(0.5, p2) == doctest::Approx(0.14645).epsilon(1e-4));
    for (double a : {0.5, 1.0, 8.0}) {
        const ControlWeightProfile p{ControlProfileKind::power_cosine, a};
        CHECK(control_weight(1.0, p) == 0.0);
        CHECK(control_weight(0.0, p) == 1.0);
    }
    CHECK_THROWS_AS(control_weight(-0.01, p2), DomainError);
    CHECK_THROWS_AS(control_weight(1.01, p2), DomainError);
    const ControlWeightProfile flat{ControlProfileKind::uniform, 8.0};
    CHECK(control_weight(1.0, flat) == 1.0);
    CHECK(control_weight(0.3, flat) == 1.0);
}
