#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace biattn {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major array of doubles. Carries an optional gradient buffer of
/// the same shape when requires_grad is set; that buffer is what the graph
/// accumulates into for leaf parameters.
class Tensor {
public:
    Tensor() : shape_{1}, data_(1, 0.0) {}

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        validate_shape(shape_);
        data_.assign(biattn::numel(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape(shape_);
        if (biattn::numel(shape_) != data_.size()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + to_string(shape_));
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const noexcept { return data_.size(); }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }
    double* raw() noexcept { return data_.data(); }
    const double* raw() const noexcept { return data_.data(); }

    double& operator[](std::size_t flat) { return data_[flat]; }
    double operator[](std::size_t flat) const { return data_[flat]; }

    double& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
    double at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

    double item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
        return data_[0];
    }

    bool requires_grad() const noexcept { return requires_grad_; }

    void set_requires_grad(bool on) {
        requires_grad_ = on;
        if (on) {
            grad_.assign(data_.size(), 0.0);
        } else {
            grad_.clear();
        }
    }

    std::vector<double>& grad() noexcept { return grad_; }
    const std::vector<double>& grad() const noexcept { return grad_; }

    void zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

    /// Same data under a new shape with an equal element count.
    Tensor reshaped(Shape shape) const {
        if (biattn::numel(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

private:
    static void validate_shape(const Shape& shape) {
        if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
        for (std::size_t d : shape) {
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
        }
    }

    std::size_t offset(std::initializer_list<std::size_t> index) const {
        if (index.size() != shape_.size()) {
            throw ShapeError("index rank " + std::to_string(index.size()) + " for tensor of shape " +
                             to_string(shape_));
        }
        std::size_t off = 0;
        std::size_t axis = 0;
        for (std::size_t i : index) {
            if (i >= shape_[axis]) throw std::out_of_range("tensor index out of range");
            off = off * shape_[axis] + i;
            ++axis;
        }
        return off;
    }

    Shape shape_;
    std::vector<double> data_;
    bool requires_grad_ = false;
    std::vector<double> grad_;
};

}  // namespace biattn
