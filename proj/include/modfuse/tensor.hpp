#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace modfuse {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

// Dense row-major array of doubles with up to five axes. Volumetric data uses
// the layout [channels, depth, height, width]; a default-constructed tensor is
// the empty placeholder (rank 0, no data).
class Tensor {
public:
    static constexpr std::size_t max_rank = 5;

    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    double* ptr() noexcept { return data_.data(); }
    const double* ptr() const noexcept { return data_.data(); }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t flat) noexcept { return data_[flat]; }
    double operator[](std::size_t flat) const noexcept { return data_[flat]; }

    double& at(std::initializer_list<std::size_t> index);
    double at(std::initializer_list<std::size_t> index) const;

    std::size_t flat_index(std::span<const std::size_t> index) const;
    std::vector<std::size_t> unflatten(std::size_t flat) const;

    // Number of elements per index of the leading axis.
    std::size_t inner_size() const noexcept;

    Tensor reshaped(Shape shape) const;
    void fill(double value) noexcept;
    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

std::size_t shape_product(const Shape& shape);
double dot(const Tensor& a, const Tensor& b);
double sum(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);

// In-place a += scale * b; shapes must match.
void axpy(Tensor& a, const Tensor& b, double scale = 1.0);

}  // namespace modfuse
