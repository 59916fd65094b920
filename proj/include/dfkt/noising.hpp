#pragma once

#include <span>
#include <vector>

#include "dfkt/schedules.hpp"

namespace dfkt {

/// x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps
std::vector<double> ddpm_noising(std::span<const double> x0, int t, const NoiseSchedule& sched,
                                 std::span<const double> eps);

/// x_t = (x_0 + sigma eps) / sqrt(1 + sigma^2)
std::vector<double> edm_noising(std::span<const double> x0, double sigma, std::span<const double> eps);

/// In-place EDM noising for model-precision buffers.
template <typename T>
void edm_noising_into(std::span<const T> x0, double sigma, std::span<const T> eps, std::span<T> out);

} // namespace dfkt
