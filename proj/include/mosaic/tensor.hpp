#pragma once

// Dense row-major tensor used as the value carrier for every module.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mosaic {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

// 64-byte aligned storage. Vectorised reductions peel differently depending
// on the start address, so alignment keeps results bit-reproducible.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0})
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
        check_shape();
    }

    Tensor(Shape shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (data_.size() != shape_numel(shape_))
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(T v) { return Tensor(Shape{1}, AlignedVector<T>{v}); }

    static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        AlignedVector<T> d;
        d.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw DimensionError("ragged matrix literal");
            d.insert(d.end(), row.begin(), row.end());
        }
        return Tensor(Shape{r, c}, std::move(d));
    }

    static Tensor vector(std::initializer_list<T> values) {
        return Tensor(Shape{values.size()}, AlignedVector<T>(values));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    AlignedVector<T>& values() noexcept { return data_; }
    const AlignedVector<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    T& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    const T& at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    T item() const {
        if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != data_.size())
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> d(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(d));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor& operator+=(const Tensor& o) {
        require_same(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    Tensor& operator*=(T s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    void require_same(const Tensor& o, const char* what) const {
        if (shape_ != o.shape_)
            throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(shape_) +
                                 " vs " + shape_str(o.shape_));
    }

private:
    void check_shape() const {
        for (auto d : shape_)
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
    }

    Shape shape_;
    AlignedVector<T> data_;
};

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    a.require_same(b, "max_abs_diff");
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <class T>
T max_abs(const Tensor<T>& a) {
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i]));
    return m;
}

template <class T>
T frobenius_norm(const Tensor<T>& a) {
    long double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * a[i];
    return static_cast<T>(std::sqrt(s));
}

}  // namespace mosaic
