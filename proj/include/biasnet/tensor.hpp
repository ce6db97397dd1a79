#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"

namespace biasnet {

using Shape = std::vector<std::size_t>;

/// Free-form single-line provenance carried with parameters, banks and datasets.
using Meta = std::map<std::string, std::string>;

inline std::size_t shape_size(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major array. Owns its storage; copies are deep.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape))
    {
        for (auto d : shape_)
            if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape_));
        data_.assign(shape_size(shape_), fill);
    }

    Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values))
    {
        for (auto d : shape_)
            if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape_));
        if (data_.size() != shape_size(shape_))
            throw DimensionError("value count " + std::to_string(data_.size()) + " does not match shape " +
                                 shape_string(shape_));
    }

    static Tensor vector(std::initializer_list<T> values)
    {
        return Tensor({values.size()}, std::vector<T>(values));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    T& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
    const T& at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

    /// Same values, new shape with identical element count.
    Tensor reshaped(Shape shape) const
    {
        return Tensor(std::move(shape), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const
    {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    template <typename U>
    Tensor<U> cast() const
    {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    std::size_t offset(std::initializer_list<std::size_t> index) const
    {
        if (index.size() != shape_.size())
            throw DimensionError("index rank " + std::to_string(index.size()) + " for tensor of shape " +
                                 shape_string(shape_));
        std::size_t off = 0;
        std::size_t axis = 0;
        for (auto i : index) {
            if (i >= shape_[axis]) throw DimensionError("index out of range on axis " + std::to_string(axis));
            off = off * shape_[axis] + i;
            ++axis;
        }
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
void require_shape(const Tensor<T>& t, const Shape& expected, const char* what)
{
    if (t.shape() != expected)
        throw DimensionError(std::string(what) + ": expected shape " + shape_string(expected) + ", got " +
                             shape_string(t.shape()));
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* what)
{
    if (t.rank() != rank)
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                             shape_string(t.shape()));
}

/// Euclidean inner product over the flattened values.
template <typename T>
T dot(std::span<const T> a, std::span<const T> b)
{
    if (a.size() != b.size())
        throw DimensionError("inner product of lengths " + std::to_string(a.size()) + " and " +
                             std::to_string(b.size()));
    T acc{0};
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b)
{
    if (a.shape() != b.shape())
        throw DimensionError("inner product of shapes " + shape_string(a.shape()) + " and " +
                             shape_string(b.shape()));
    return dot(a.values(), b.values());
}

} // namespace biasnet
