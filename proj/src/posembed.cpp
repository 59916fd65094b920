#include "dfkt/posembed.hpp"

#include "dfkt/conditioning.hpp"
#include "dfkt/errors.hpp"

namespace dfkt {

void GridDescriptor::validate() const {
    if (grid_size <= 0) throw ParameterError("GridDescriptor: grid_size must be positive");
    if (scale <= 0) throw ParameterError("GridDescriptor: scale must be positive");
    if (mode == GridMode::resample && grid_size % scale != 0) {
        throw ParameterError("GridDescriptor: resample mode needs grid_size divisible by scale");
    }
}

std::vector<double> build_grid(const GridDescriptor& desc) {
    desc.validate();
    const int n = desc.grid_size;
    std::vector<double> coords(static_cast<size_t>(n));
    if (desc.mode == GridMode::extrapolate) {
        for (int i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        return coords;
    }
    // linspace(0, base_size, grid_size), both endpoints included.
    const double hi = desc.base_size();
    if (n == 1) {
        coords[0] = 0.0;
        return coords;
    }
    const double step = hi / (n - 1);
    for (int i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i * step;
    coords.back() = hi;
    return coords;
}

MatrixD sincos_2d(const GridDescriptor& desc, int dim) {
    if (dim <= 0 || dim % 4 != 0) {
        throw ParameterError("sincos_2d: dim must be a positive multiple of 4");
    }
    const auto coords = build_grid(desc);
    const int n = desc.grid_size;
    const int half = dim / 2;
    MatrixD out(static_cast<Eigen::Index>(n) * n, dim);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            double* row = out.row(static_cast<Eigen::Index>(r) * n + c).data();
            sincos_embed_into(coords[static_cast<size_t>(r)], half, row);
            sincos_embed_into(coords[static_cast<size_t>(c)], half, row + half);
        }
    }
    return out;
}

} // namespace dfkt
