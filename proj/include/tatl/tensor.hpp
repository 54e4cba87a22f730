#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "tatl/errors.hpp"

namespace tatl {

// Dense row-major tensor of doubles.  Rank is dynamic; most of the library
// uses rank-3 tensors laid out (channels, height, width) for images and
// feature maps, and rank-4 (out_channels, in_channels, kh, kw) for kernels.
class tensor_f {
public:
    tensor_f() = default;

    explicit tensor_f(std::vector<std::size_t> shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(checked_size(shape_), fill) {}

    tensor_f(std::initializer_list<std::size_t> shape, double fill = 0.0)
        : tensor_f(std::vector<std::size_t>(shape), fill) {}

    static tensor_f from_data(std::vector<std::size_t> shape, std::vector<double> data) {
        tensor_f t;
        if (checked_size(shape) != data.size()) {
            throw dimension_error("tensor_f::from_data: shape implies " +
                                  std::to_string(checked_size(shape)) + " elements, got " +
                                  std::to_string(data.size()));
        }
        t.shape_ = std::move(shape);
        t.data_ = std::move(data);
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }

    std::size_t extent(std::size_t axis) const {
        if (axis >= shape_.size()) {
            throw range_error("tensor_f::extent: axis " + std::to_string(axis) +
                              " out of range for rank " + std::to_string(shape_.size()));
        }
        return shape_[axis];
    }

    bool same_shape(const tensor_f& other) const { return shape_ == other.shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Unchecked rank-3 access, (channel, row, col).  Callers validate rank
    // once up front; the hot loops index raw planes instead.
    double& at3(std::size_t c, std::size_t y, std::size_t x) {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }
    double at3(std::size_t c, std::size_t y, std::size_t x) const {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }

    void fill(double v) { data_.assign(data_.size(), v); }

    bool operator==(const tensor_f& other) const = default;

private:
    static std::size_t checked_size(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t e : shape) {
            if (e == 0) throw dimension_error("tensor_f: zero extent in shape");
            n *= e;
        }
        return shape.empty() ? 0 : n;
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

}  // namespace tatl
