#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace patchfm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ')';
    return os.str();
}

/// Storage aligned to the widest SIMD width so that vectorized reductions
/// take the same path regardless of where the heap placed the buffer.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// Dense row-major array. Rank-1 arrays behave as a single row when viewed as
/// a matrix; higher ranks fold every leading axis into the row count.
template <class T>
class Array {
public:
    using value_type = T;

    Array() = default;

    explicit Array(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
        check_shape();
        data_.assign(numel(shape_), fill);
    }

    Array(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        check_shape();
        if (data_.size() != numel(shape_))
            throw std::invalid_argument("Array: data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_str(shape_));
    }

    static Array zeros(Shape shape) { return Array(std::move(shape), T(0)); }
    static Array ones(Shape shape) { return Array(std::move(shape), T(1)); }
    static Array scalar(T v) { return Array(Shape{1}, v); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    bool empty() const { return data_.empty(); }

    std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
    std::size_t rows() const { return cols() == 0 ? 0 : data_.size() / cols(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    AlignedVector<T>& vec() { return data_; }
    const AlignedVector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    MatMap<T> mat() { return MatMap<T>(data_.data(), Eigen::Index(rows()), Eigen::Index(cols())); }
    ConstMatMap<T> mat() const {
        return ConstMatMap<T>(data_.data(), Eigen::Index(rows()), Eigen::Index(cols()));
    }

    Array reshaped(Shape shape) const {
        if (numel(shape) != size())
            throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
        Array out;
        out.shape_ = std::move(shape);
        out.data_ = data_;
        return out;
    }

    template <class U>
    Array<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Array<U>(shape_, std::move(out));
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Array& other) const { return shape_ == other.shape_; }

    friend bool operator==(const Array& a, const Array& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_shape() const {
        if (shape_.empty()) throw std::invalid_argument("Array: shape must have at least one axis");
        for (auto d : shape_)
            if (d == 0) throw std::invalid_argument("Array: zero-sized axis in " + shape_str(shape_));
    }

    Shape shape_;
    AlignedVector<T> data_;
};

}  // namespace patchfm
