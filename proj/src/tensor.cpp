#include "dfkt/tensor.hpp"

#include "dfkt/errors.hpp"

namespace dfkt {

template <typename T>
std::size_t ParamSet<T>::index_of(std::string_view name) const {
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (specs[i].name == name) return i;
    }
    throw ParameterError("unknown parameter tensor '" + std::string(name) + "'");
}

template <typename T>
std::size_t ParamSet<T>::numel() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
    return n;
}

template <typename T>
ParamSet<T> ParamSet<T>::zeros_like() const {
    ParamSet out;
    out.specs = specs;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) out.tensors.push_back(MatrixT<T>::Zero(t.rows(), t.cols()));
    return out;
}

template struct ParamSet<float>;
template struct ParamSet<double>;

} // namespace dfkt
