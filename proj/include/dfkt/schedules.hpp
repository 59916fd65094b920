#pragma once

#include <vector>

namespace dfkt {

/// Discrete diffusion noise schedule. Immutable once built.
///
/// `alpha_bars[t]` is the cumulative product of `(1 - betas[i])` for i <= t.
/// `scale` records the spatial resolution factor the schedule was built for
/// (1.0 = base resolution); it is the `s` consumed by rescale_schedule().
struct NoiseSchedule {
    std::vector<double> betas;
    std::vector<double> alpha_bars;
    double scale = 1.0;

    int num_steps() const { return static_cast<int>(betas.size()); }
    double sigma(int t) const;
};

enum class ControlProfileKind {
    power_cosine, // [1 - cos(pi (1 - t)^alpha)] / 2
    uniform,      // constant 1, low-level controls always fully active
};

/// Time profile weighting the low-level control embedding.
struct ControlWeightProfile {
    ControlProfileKind kind = ControlProfileKind::power_cosine;
    double alpha = 8.0;
};

NoiseSchedule quadratic_beta_schedule(int num_steps, double beta_start = 0.00085,
                                      double beta_end = 0.012);

/// Builds a schedule from alpha-bars, recovering betas from consecutive ratios.
/// Throws ParameterError if any recovered beta falls outside (0, 1).
NoiseSchedule schedule_from_alpha_bars(std::vector<double> alpha_bars, double scale);

/// sigma = sqrt((1 - alpha_bar) / alpha_bar), the EDM noise level.
double sigma_of(double alpha_bar);
double alpha_bar_of_sigma(double sigma);

/// Moves alpha_bar from resolution factor `s` to `s_new` keeping sigma / s fixed.
double rescale_alpha_bar(double alpha_bar, double s, double s_new);

NoiseSchedule rescale_schedule(const NoiseSchedule& sched, double s_new);

/// Low-level control weight. `t_norm = t / T`; 1 is the pure-noise end.
double control_weight(double t_norm, const ControlWeightProfile& profile);

} // namespace dfkt
