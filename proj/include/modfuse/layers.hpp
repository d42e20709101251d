#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "modfuse/rng.hpp"
#include "modfuse/tensor.hpp"

namespace modfuse {

// Trainable tensor with its gradient buffer. Gradients accumulate until
// zero_grad() is called.
struct Param {
    Param() = default;
    Param(std::string id, Tensor value);

    void zero_grad() { grad.fill(0.0); }

    std::string id;
    Tensor value;
    Tensor grad;
};

enum class LayerKind {
    Conv3d,
    ConvTranspose3d,
    InstanceNorm,
    LeakyRelu,
    SoftmaxChannels,
    ConcatChannels,
    Add,
};

const char* to_string(LayerKind kind) noexcept;

struct LayerSpec {
    LayerKind kind = LayerKind::Conv3d;
    std::array<std::size_t, 3> kernel{3, 3, 3};
    std::size_t stride = 1;
    std::size_t padding = 1;
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    double negative_slope = 0.01;

    void validate() const;
};

inline constexpr double instance_norm_eps = 1e-5;
inline constexpr double default_negative_slope = 0.01;

// --- convolution -----------------------------------------------------------

// x: [C_in,D,H,W], w: [C_out,C_in,kd,kh,kw], b: [C_out].
Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad);

struct ConvGrads {
    Tensor grad_input;
    Tensor grad_weight;
    Tensor grad_bias;
};

ConvGrads conv3d_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out, std::size_t stride,
                          std::size_t pad);

// Kernel 2, stride 2, no padding. x: [C_in,D,H,W], w: [C_in,C_out,2,2,2].
Tensor conv_transpose3d_forward(const Tensor& x, const Tensor& w, const Tensor& b);
ConvGrads conv_transpose3d_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out);

// --- normalization and activations -----------------------------------------

struct InstanceNormCache {
    Tensor normalized;
    std::vector<double> inv_std;
};

Tensor instance_norm_forward(const Tensor& x, const Tensor& gain, const Tensor& shift,
                             InstanceNormCache* cache = nullptr);

struct InstanceNormGrads {
    Tensor grad_input;
    Tensor grad_gain;
    Tensor grad_shift;
};

InstanceNormGrads instance_norm_backward(const InstanceNormCache& cache, const Tensor& gain,
                                         const Tensor& grad_out);

Tensor leaky_relu_forward(const Tensor& x, double negative_slope = default_negative_slope);
// The derivative at exactly zero is negative_slope.
Tensor leaky_relu_backward(const Tensor& x, const Tensor& grad_out, double negative_slope = default_negative_slope);

// Softmax over axis 0 at every spatial position.
Tensor softmax_channels_forward(const Tensor& x);
// y is the forward output; returns the vector-Jacobian product.
Tensor softmax_channels_backward(const Tensor& y, const Tensor& grad_out);

Tensor concat_channels(std::span<const Tensor> parts);
std::vector<Tensor> split_channels(const Tensor& x, std::span<const std::size_t> channels);

// [C,D,H,W] -> [C,1,1,1]
Tensor global_avg_pool_forward(const Tensor& x);
Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out);

// N(0, 2/fan_in) with fan_in = product(shape[1:]).
Tensor he_init(const Shape& shape, SeededRng& rng);

std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, std::size_t stride, std::size_t pad);

}  // namespace modfuse
