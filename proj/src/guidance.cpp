#include "dfkt/guidance.hpp"

#include "dfkt/errors.hpp"

namespace dfkt {

namespace {

template <typename T>
void combine(std::span<const T> cs, std::span<const T> os, std::span<const T> oo,
             const GuidanceParams& p, std::span<T> out) {
    if (cs.size() != os.size() || cs.size() != oo.size() || cs.size() != out.size()) {
        throw ShapeError("compose_double_cfg: noise estimates differ in length");
    }
    const double lam = p.lambda;
    const double beta = p.beta;
    for (std::size_t i = 0; i < cs.size(); ++i) {
        const double inner = beta * cs[i] + (1.0 - beta) * os[i];
        out[i] = static_cast<T>(lam * inner + (1.0 - lam) * oo[i]);
    }
}

} // namespace

std::vector<double> compose_double_cfg(std::span<const double> eps_cs, std::span<const double> eps_0s,
                                       std::span<const double> eps_00, const GuidanceParams& p) {
    std::vector<double> out(eps_cs.size());
    combine<double>(eps_cs, eps_0s, eps_00, p, out);
    return out;
}

void compose_double_cfg(std::span<const float> eps_cs, std::span<const float> eps_0s,
                        std::span<const float> eps_00, const GuidanceParams& p, std::span<float> out) {
    combine<float>(eps_cs, eps_0s, eps_00, p, out);
}

double scale_guidance(double lambda, double s) {
    if (!(s > 0.0)) throw ParameterError("scale_guidance: s must be positive");
    return 1.0 + s * (lambda - 1.0);
}

} // namespace dfkt
