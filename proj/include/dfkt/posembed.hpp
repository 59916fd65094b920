#pragma once

#include <vector>

#include "dfkt/tensor.hpp"

namespace dfkt {

enum class GridMode {
    extrapolate, // coordinates 0, 1, ..., grid_size - 1
    resample,    // grid_size points spanning [0, grid_size / scale]
};

/// Sampling grid of the sinusoidal positional embedding.
struct GridDescriptor {
    int grid_size = 4; // tokens per side
    int scale = 1;     // resolution factor relative to the base grid
    GridMode mode = GridMode::resample;

    void validate() const;
    int base_size() const { return grid_size / scale; }
    bool operator==(const GridDescriptor&) const = default;
};

/// Per-axis coordinates of the grid.
std::vector<double> build_grid(const GridDescriptor& desc);

/// (grid_size^2 x dim) embedding, row-major over (row, col) positions. The
/// first dim/2 channels encode the row coordinate, the rest the column.
MatrixD sincos_2d(const GridDescriptor& desc, int dim);

} // namespace dfkt
