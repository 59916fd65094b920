#pragma once

#include <span>
#include <vector>

namespace dfkt {

/// Double classifier-free guidance strengths.
struct GuidanceParams {
    double lambda = 1.5; // semantic guidance scale
    double beta = 1.0;   // control guidance scale
};

/// lambda * [beta * eps_cs + (1 - beta) * eps_0s] + (1 - lambda) * eps_00
///
/// eps_cs: both conditions, eps_0s: semantic only, eps_00: unconditional.
std::vector<double> compose_double_cfg(std::span<const double> eps_cs, std::span<const double> eps_0s,
                                       std::span<const double> eps_00, const GuidanceParams& p);

/// Same combination written into `out`, float storage.
void compose_double_cfg(std::span<const float> eps_cs, std::span<const float> eps_0s,
                        std::span<const float> eps_00, const GuidanceParams& p, std::span<float> out);

/// Guidance scale for a model at resolution factor s: 1 + s * (lambda - 1).
double scale_guidance(double lambda, double s);

} // namespace dfkt
