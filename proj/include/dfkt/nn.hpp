#pragma once

// Dense building blocks with hand-written backward passes. Activations are
// (rows x features) row-major matrices; gradients accumulate with +=.

#include <cmath>
#include <vector>

#include "dfkt/tensor.hpp"

namespace dfkt::nn {

template <typename T>
void linear(const MatrixT<T>& x, const MatrixT<T>& w, const MatrixT<T>& b, MatrixT<T>& y) {
    y.noalias() = x * w;
    y.rowwise() += b.row(0);
}

/// dx is overwritten (skipped when null); dw and db accumulate.
template <typename T>
void linear_backward(const MatrixT<T>& x, const MatrixT<T>& w, const MatrixT<T>& dy,
                     MatrixT<T>* dx, MatrixT<T>& dw, MatrixT<T>& db) {
    dw.noalias() += x.transpose() * dy;
    db.row(0) += dy.colwise().sum();
    if (dx != nullptr) dx->noalias() = dy * w.transpose();
}

template <typename T>
T sigmoid(T v) {
    return T(1) / (T(1) + std::exp(-v));
}

template <typename T>
MatrixT<T> silu(const MatrixT<T>& x) {
    return x.unaryExpr([](T v) { return v * sigmoid(v); });
}

template <typename T>
MatrixT<T> silu_backward(const MatrixT<T>& x, const MatrixT<T>& dy) {
    return dy.binaryExpr(x, [](T g, T v) {
        const T s = sigmoid(v);
        return g * s * (T(1) + v * (T(1) - s));
    });
}

/// Per-row layer norm without affine parameters.
template <typename T>
void layer_norm(const MatrixT<T>& x, MatrixT<T>& xhat, std::vector<T>& inv_std, T eps = T(1e-6)) {
    const auto n = x.cols();
    xhat.resize(x.rows(), n);
    inv_std.resize(static_cast<size_t>(x.rows()));
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const T mean = x.row(r).sum() / T(n);
        const auto centered = (x.row(r).array() - mean).eval();
        const T var = centered.square().sum() / T(n);
        const T inv = T(1) / std::sqrt(var + eps);
        xhat.row(r) = centered * inv;
        inv_std[static_cast<size_t>(r)] = inv;
    }
}

template <typename T>
MatrixT<T> layer_norm_backward(const MatrixT<T>& xhat, const std::vector<T>& inv_std,
                               const MatrixT<T>& dxhat) {
    const auto n = xhat.cols();
    MatrixT<T> dx(xhat.rows(), n);
    for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
        const T mean_g = dxhat.row(r).sum() / T(n);
        const T mean_gx = dxhat.row(r).dot(xhat.row(r)) / T(n);
        dx.row(r) = (dxhat.row(r).array() - mean_g - xhat.row(r).array() * mean_gx) *
                    inv_std[static_cast<size_t>(r)];
    }
    return dx;
}

} // namespace dfkt::nn
