#include "fedsim/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace fedsim {

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    std::size_t n = 1;
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (shape_[i] <= 0) {
            throw std::invalid_argument("tensor dimension " + std::to_string(i) +
                                        " must be positive, got " + std::to_string(shape_[i]));
        }
        n *= static_cast<std::size_t>(shape_[i]);
    }
    data_.assign(n, 0.0);
}

void Tensor::fill(double v) {
    for (auto& x : data_) x = v;
}

bool Tensor::all_finite() const {
    for (double x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

std::string shape_string(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace fedsim
