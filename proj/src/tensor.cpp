#include "circuitforge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace circuitforge {

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel_of(shape_) != data_.size()) {
        throw std::invalid_argument("tensor data length does not match shape");
    }
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(),
                       [](float v) { return std::isfinite(v); });
}

}  // namespace circuitforge
