#include "dfkt/schedules.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "dfkt/errors.hpp"

namespace dfkt {

double NoiseSchedule::sigma(int t) const {
    return sigma_of(alpha_bars.at(static_cast<size_t>(t)));
}

NoiseSchedule quadratic_beta_schedule(int num_steps, double beta_start, double beta_end) {
    if (num_steps < 2) {
        throw ParameterError("quadratic_beta_schedule: need at least 2 steps");
    }
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw ParameterError("quadratic_beta_schedule: require 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule sched;
    sched.betas.resize(static_cast<size_t>(num_steps));
    sched.alpha_bars.resize(static_cast<size_t>(num_steps));
    const double lo = std::sqrt(beta_start);
    const double hi = std::sqrt(beta_end);
    double prod = 1.0;
    for (int t = 0; t < num_steps; ++t) {
        double beta;
        if (t == 0) {
            beta = beta_start;
        } else if (t == num_steps - 1) {
            beta = beta_end;
        } else {
            const double r = lo + (static_cast<double>(t) / (num_steps - 1)) * (hi - lo);
            beta = r * r;
        }
        prod *= 1.0 - beta;
        sched.betas[static_cast<size_t>(t)] = beta;
        sched.alpha_bars[static_cast<size_t>(t)] = prod;
    }
    sched.scale = 1.0;
    return sched;
}

NoiseSchedule schedule_from_alpha_bars(std::vector<double> alpha_bars, double scale) {
    if (alpha_bars.size() < 2) {
        throw ParameterError("schedule_from_alpha_bars: need at least 2 steps");
    }
    if (!(scale > 0.0)) {
        throw ParameterError("schedule_from_alpha_bars: scale must be positive");
    }
    NoiseSchedule sched;
    sched.betas.resize(alpha_bars.size());
    double prev = 1.0;
    for (size_t t = 0; t < alpha_bars.size(); ++t) {
        const double beta = 1.0 - alpha_bars[t] / prev;
        if (!(beta > 0.0 && beta < 1.0)) {
            throw ParameterError("schedule_from_alpha_bars: derived beta[" + std::to_string(t) +
                                 "] = " + std::to_string(beta) + " outside (0, 1)");
        }
        sched.betas[t] = beta;
        prev = alpha_bars[t];
    }
    sched.alpha_bars = std::move(alpha_bars);
    sched.scale = scale;
    return sched;
}

double sigma_of(double alpha_bar) {
    if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) {
        throw DomainError("sigma_of: alpha_bar must lie in (0, 1]");
    }
    return std::sqrt((1.0 - alpha_bar) / alpha_bar);
}

double alpha_bar_of_sigma(double sigma) {
    if (!(sigma >= 0.0)) {
        throw DomainError("alpha_bar_of_sigma: sigma must be nonnegative");
    }
    return 1.0 / (1.0 + sigma * sigma);
}

double rescale_alpha_bar(double alpha_bar, double s, double s_new) {
    if (!(s > 0.0 && s_new > 0.0)) {
        throw ParameterError("rescale_alpha_bar: scales must be positive");
    }
    if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0)) {
        throw DomainError("rescale_alpha_bar: alpha_bar must lie in [0, 1]");
    }
    if (s == s_new) {
        return alpha_bar;
    }
    const double s2 = s * s;
    const double n2 = s_new * s_new;
    return s2 * alpha_bar / (n2 + alpha_bar * (s2 - n2));
}

NoiseSchedule rescale_schedule(const NoiseSchedule& sched, double s_new) {
    if (!(s_new > 0.0)) {
        throw ParameterError("rescale_schedule: target scale must be positive");
    }
    if (s_new == sched.scale) {
        return sched;
    }
    std::vector<double> ab(sched.alpha_bars.size());
    for (size_t t = 0; t < ab.size(); ++t) {
        ab[t] = rescale_alpha_bar(sched.alpha_bars[t], sched.scale, s_new);
    }
    return schedule_from_alpha_bars(std::move(ab), s_new);
}

double control_weight(double t_norm, const ControlWeightProfile& profile) {
    if (!(t_norm >= 0.0 && t_norm <= 1.0)) {
        throw DomainError("control_weight: t_norm must lie in [0, 1]");
    }
    if (profile.kind == ControlProfileKind::uniform) {
        return 1.0;
    }
    if (!(profile.alpha > 0.0)) {
        throw ParameterError("control_weight: alpha must be positive");
    }
    if (t_norm == 1.0) {
        return 0.0;
    }
    if (t_norm == 0.0) {
        return 1.0;
    }
    const double u = std::pow(1.0 - t_norm, profile.alpha);
    return 0.5 * (1.0 - std::cos(std::numbers::pi * u));
}

} // namespace dfkt
