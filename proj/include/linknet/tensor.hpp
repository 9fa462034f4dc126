#pragma once
// Dense row-major tensor of doubles. Values only; gradient bookkeeping lives in
// autodiff.hpp.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace linknet {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::string shape_string(const Shape& shape)
{
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

inline std::size_t shape_numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill)
    {
        check_extents();
    }

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data))
    {
        check_extents();
        if (data_.size() != shape_numel(shape_)) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows)
    {
        const std::size_t m = rows.size();
        const std::size_t n = m ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(m * n);
        for (const auto& row : rows) {
            if (row.size() != n) throw DimensionError("ragged matrix literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor({m, n}, std::move(data));
    }

    /// 1×n row vector.
    static Tensor row(std::vector<double> values)
    {
        const std::size_t n = values.size();
        return Tensor({1, n}, std::move(values));
    }

    static Tensor identity(std::size_t n)
    {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t rows() const
    {
        require_matrix();
        return shape_[0];
    }
    std::size_t cols() const
    {
        require_matrix();
        return shape_[1];
    }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const double& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& operator[](std::size_t k) { return data_[k]; }
    const double& operator[](std::size_t k) const { return data_[k]; }

    double& at(std::size_t i, std::size_t j)
    {
        require_matrix();
        if (i >= shape_[0] || j >= shape_[1]) throw std::out_of_range("tensor index out of range");
        return (*this)(i, j);
    }
    double at(std::size_t i, std::size_t j) const { return const_cast<Tensor&>(*this).at(i, j); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    std::span<const double> row_span(std::size_t i) const { return {data_.data() + i * cols(), cols()}; }

    Tensor reshaped(Shape shape) const
    {
        if (shape_numel(shape) != data_.size()) {
            throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const
    {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    void check_extents() const
    {
        for (auto extent : shape_) {
            if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape_));
        }
    }
    void require_matrix() const
    {
        if (shape_.size() != 2) throw DimensionError("expected a matrix, got shape " + shape_string(shape_));
    }

    Shape shape_;
    std::vector<double> data_;
};

/// Largest absolute elementwise difference; shapes must agree.
inline double max_abs_diff(const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape()) {
        throw DimensionError("shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    double worst = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a[k] - b[k]));
    return worst;
}

} // namespace linknet
