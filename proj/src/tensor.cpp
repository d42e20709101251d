#include "modfuse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "modfuse/error.hpp"

namespace modfuse {

std::string shape_string(const Shape& shape)
{
    std::ostringstream out;
    out << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ',';
        out << shape[i];
    }
    out << ')';
    return out.str();
}

std::size_t shape_product(const Shape& shape)
{
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

namespace {

void check_shape(const Shape& shape)
{
    if (shape.empty() || shape.size() > Tensor::max_rank) {
        throw Error(ErrorCode::InvalidArgument, "tensor rank must be in [1,5], got " + std::to_string(shape.size()));
    }
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == 0) {
            throw Error(ErrorCode::InvalidArgument, "tensor extent on axis " + std::to_string(i) + " is zero");
        }
    }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape))
{
    check_shape(shape_);
    data_.assign(shape_product(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data))
{
    check_shape(shape_);
    if (data_.size() != shape_product(shape_)) {
        throw Error(ErrorCode::ShapeMismatch, "data length " + std::to_string(data_.size()) +
                                                  " does not match shape " + shape_string(shape_));
    }
}

std::size_t Tensor::dim(std::size_t axis) const
{
    if (axis >= shape_.size()) {
        throw Error(ErrorCode::IndexOutOfRange, "axis " + std::to_string(axis) + " of rank-" +
                                                    std::to_string(shape_.size()) + " tensor");
    }
    return shape_[axis];
}

std::size_t Tensor::flat_index(std::span<const std::size_t> index) const
{
    if (index.size() != shape_.size()) {
        throw Error(ErrorCode::IndexOutOfRange, "index rank does not match tensor rank");
    }
    std::size_t flat = 0;
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= shape_[i]) {
            throw Error(ErrorCode::IndexOutOfRange, "index " + std::to_string(index[i]) + " on axis " +
                                                        std::to_string(i) + " exceeds extent " +
                                                        std::to_string(shape_[i]));
        }
        flat = flat * shape_[i] + index[i];
    }
    return flat;
}

std::vector<std::size_t> Tensor::unflatten(std::size_t flat) const
{
    if (flat >= data_.size()) {
        throw Error(ErrorCode::IndexOutOfRange, "flat index " + std::to_string(flat) + " out of range");
    }
    std::vector<std::size_t> index(shape_.size());
    for (std::size_t i = shape_.size(); i-- > 0;) {
        index[i] = flat % shape_[i];
        flat /= shape_[i];
    }
    return index;
}

double& Tensor::at(std::initializer_list<std::size_t> index)
{
    return data_[flat_index(std::span<const std::size_t>(index.begin(), index.size()))];
}

double Tensor::at(std::initializer_list<std::size_t> index) const
{
    return data_[flat_index(std::span<const std::size_t>(index.begin(), index.size()))];
}

std::size_t Tensor::inner_size() const noexcept
{
    return shape_.empty() ? 0 : data_.size() / shape_[0];
}

Tensor Tensor::reshaped(Shape shape) const
{
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) noexcept
{
    std::fill(data_.begin(), data_.end(), value);
}

double dot(const Tensor& a, const Tensor& b)
{
    if (a.size() != b.size()) {
        throw Error(ErrorCode::ShapeMismatch, "dot of " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double sum(const Tensor& t)
{
    double acc = 0.0;
    for (double v : t.data()) acc += v;
    return acc;
}

double max_abs_diff(const Tensor& a, const Tensor& b)
{
    if (!a.same_shape(b)) {
        throw Error(ErrorCode::ShapeMismatch, shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

bool all_finite(const Tensor& t)
{
    return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

void axpy(Tensor& a, const Tensor& b, double scale)
{
    if (!a.same_shape(b)) {
        throw Error(ErrorCode::ShapeMismatch, "axpy " + shape_string(a.shape()) + " += " + shape_string(b.shape()));
    }
    double* pa = a.ptr();
    const double* pb = b.ptr();
    for (std::size_t i = 0; i < a.size(); ++i) pa[i] += scale * pb[i];
}

}  // namespace modfuse
