#include "regfactor/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "regfactor/errors.hpp"

namespace regfactor {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
        throw ShapeError("tensor data has " + std::to_string(data_.size()) + " values, shape " +
                         shape_str(shape_) + " needs " + std::to_string(shape_numel(shape_)));
    }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

int64_t Tensor::dim(size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
    }
    return shape_[axis];
}

double& Tensor::at(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
}

double Tensor::at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
}

double Tensor::item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

std::span<double> Tensor::grad() {
    if (grad_.empty()) grad_.assign(data_.size(), 0.0);
    return grad_;
}

void Tensor::zero_grad() {
    if (grad_.empty()) {
        grad_.assign(data_.size(), 0.0);
    } else {
        std::fill(grad_.begin(), grad_.end(), 0.0);
    }
}

void Tensor::check_finite(std::string_view where) const {
    for (double v : data_) {
        if (!std::isfinite(v)) {
            throw NumericError("non-finite value in " + std::string(where) + " output " + shape_str(shape_));
        }
    }
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != static_cast<int64_t>(data_.size())) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
}

}  // namespace regfactor
