#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pkws/errors.hpp"

namespace pkws {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << ")";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

/// Dense row-major array of 64-bit floats. Values are immutable once an
/// operation has produced the array; training code replaces whole arrays
/// rather than mutating shared ones.
class Array {
public:
    Array() = default;

    explicit Array(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(shape_numel(shape_), fill);
    }

    Array(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (shape_numel(shape_) != data_.size()) {
            throw ShapeError("Array: shape " + shape_str(shape_) + " wants " +
                             std::to_string(shape_numel(shape_)) + " values, got " +
                             std::to_string(data_.size()));
        }
    }

    static Array scalar(double v) { return Array(Shape{1}, std::vector<double>{v}); }

    static Array vec(std::initializer_list<double> v) {
        return Array(Shape{v.size()}, std::vector<double>(v));
    }

    static Array matrix(std::initializer_list<std::initializer_list<double>> rows) {
        std::size_t r = rows.size();
        std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("Array::matrix: ragged rows");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Array(Shape{r, c}, std::move(data));
    }

    const Shape& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    /// 2-D accessors (row, col).
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    double item() const {
        if (numel() != 1) {
            throw ShapeError("Array::item: expected scalar, got shape " + shape_str(shape_));
        }
        return data_[0];
    }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    bool same_shape(const Array& o) const { return shape_ == o.shape_; }

    bool bit_equal(const Array& o) const {
        return shape_ == o.shape_ && data_ == o.data_;
    }

    bool requires_grad = false;

private:
    void validate_shape() const {
        for (std::size_t e : shape_) {
            if (e == 0) throw ShapeError("Array: zero extent in shape " + shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

inline void check_finite(const Array& a, const char* where) {
    if (!a.all_finite()) {
        throw NumericError(std::string(where) + ": non-finite value produced");
    }
}

}  // namespace pkws
