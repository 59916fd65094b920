#include "dfkt/noising.hpp"

#include <cmath>

#include "dfkt/errors.hpp"

namespace dfkt {

std::vector<double> ddpm_noising(std::span<const double> x0, int t, const NoiseSchedule& sched,
                                 std::span<const double> eps) {
    if (t < 0 || t >= sched.num_steps()) throw ParameterError("ddpm_noising: step out of range");
    if (x0.size() != eps.size()) throw ShapeError("ddpm_noising: x0 and eps differ in length");
    const double ab = sched.alpha_bars[static_cast<size_t>(t)];
    const double a = std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    std::vector<double> out(x0.size());
    for (size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

std::vector<double> edm_noising(std::span<const double> x0, double sigma, std::span<const double> eps) {
    std::vector<double> out(x0.size());
    edm_noising_into<double>(x0, sigma, eps, out);
    return out;
}

template <typename T>
void edm_noising_into(std::span<const T> x0, double sigma, std::span<const T> eps, std::span<T> out) {
    if (!(sigma >= 0.0)) throw ParameterError("edm_noising: sigma must be nonnegative");
    if (x0.size() != eps.size() || x0.size() != out.size()) {
        throw ShapeError("edm_noising: x0 and eps differ in length");
    }
    const double norm = 1.0 / std::sqrt(1.0 + sigma * sigma);
    for (size_t i = 0; i < x0.size(); ++i) {
        out[i] = static_cast<T>((static_cast<double>(x0[i]) + sigma * eps[i]) * norm);
    }
}

template void edm_noising_into<float>(std::span<const float>, double, std::span<const float>,
                                      std::span<float>);
template void edm_noising_into<double>(std::span<const double>, double, std::span<const double>,
                                       std::span<double>);

} // namespace dfkt
