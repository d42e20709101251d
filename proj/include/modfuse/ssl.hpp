#pragma once

#include <cstddef>
#include <vector>

#include "modfuse/config.hpp"
#include "modfuse/layers.hpp"
#include "modfuse/model.hpp"

namespace modfuse {

// Task heads on top of the fused encoder levels:
//  recon      per decoder level: transposed conv up, add the fused skip, leaky
//             ReLU; then a 1x1x1 conv back to the M input channels
//  rotation   global average pool of the bottleneck, 1x1x1 conv to K logits
//  projection pool, 1x1x1 conv C->C, leaky ReLU, 1x1x1 conv C->E
class SslHeads {
public:
    SslHeads() = default;
    SslHeads(const ModelConfig& model, const SslSettings& ssl, SeededRng& rng);

    std::vector<Param>& params() noexcept { return params_; }
    const std::vector<Param>& params() const noexcept { return params_; }

    struct Outputs {
        Tensor recon;      // [M,D,H,W]
        Tensor rotation;   // [K,1,1,1]
        Tensor embedding;  // [E,1,1,1]
    };
    Outputs forward(const Encoding& enc);
    // Gradients wrt the three outputs (empty = zero); returns one gradient per
    // fused level for Model::backward_encode.
    std::vector<Tensor> backward(const Tensor& g_recon, const Tensor& g_rotation, const Tensor& g_embedding);

private:
    std::size_t add(const std::string& id, Tensor value);

    std::vector<Param> params_;
    std::size_t levels_ = 0;
    std::vector<std::size_t> up_w_, up_b_;  // index = level, 0..L-2
    std::size_t out_w_ = 0, out_b_ = 0;
    std::size_t rot_w_ = 0, rot_b_ = 0;
    std::size_t proj1_w_ = 0, proj1_b_ = 0, proj2_w_ = 0, proj2_b_ = 0;

    std::vector<Tensor> up_input_, up_pre_;
    std::vector<Shape> level_shapes_;
    Tensor out_input_, pooled_, proj_pre_, proj_act_;
    bool cached_ = false;
};

// Grid-aligned cells of `block` extents, drawn without replacement until at
// least ratio of the voxels are covered. Returns a 0/1 grid.
LabelGrid inpainting_mask(const Extent3& extent, const Extent3& block, double ratio, SeededRng& rng);

struct SslView {
    Tensor input;   // [M,D,H,W], masked voxels zeroed
    Tensor target;  // [M,D,H,W] before masking
    Tensor mask;    // [M,D,H,W], 1 where hidden
    std::size_t rotation = 0;
};

// Depth flip and intensity augmentation, then `rotation` axial quarter-turns,
// then inpainting mask. Pass rotation < 0 to draw it from rng.
SslView make_view(const Tensor& patch, const Config& cfg, SeededRng& rng, int rotation = -1, bool augment = true);

// Splits [M,D,H,W] into M [1,D,H,W] inputs for Model::encode.
std::vector<Tensor> split_modalities(const Tensor& stacked);

}  // namespace modfuse
