#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace dfkt {

// Row-major so that a (tokens x features) block is contiguous per token.
template <typename T>
using MatrixT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVectorT = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using MatrixF = MatrixT<float>;
using MatrixD = MatrixT<double>;

/// Shape of one named parameter tensor. Rank is 1 or 2; a rank-1 tensor of
/// length n is held in memory as a 1 x n matrix.
struct TensorSpec {
    std::string name;
    std::vector<int> dims;

    int rows() const { return dims.size() == 1 ? 1 : dims[0]; }
    int cols() const { return dims.size() == 1 ? dims[0] : dims[1]; }
    std::size_t numel() const { return static_cast<std::size_t>(rows()) * cols(); }
};

/// Ordered collection of named tensors sharing one layout.
template <typename T>
struct ParamSet {
    std::vector<TensorSpec> specs;
    std::vector<MatrixT<T>> tensors;

    std::size_t size() const { return tensors.size(); }
    std::size_t index_of(std::string_view name) const;
    MatrixT<T>& operator[](std::string_view name) { return tensors[index_of(name)]; }
    const MatrixT<T>& operator[](std::string_view name) const { return tensors[index_of(name)]; }
    std::size_t numel() const;

    /// Same layout, every entry zero.
    ParamSet zeros_like() const;

    template <typename U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        out.specs = specs;
        out.tensors.reserve(tensors.size());
        for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
        return out;
    }
};

extern template struct ParamSet<float>;
extern template struct ParamSet<double>;

} // namespace dfkt
