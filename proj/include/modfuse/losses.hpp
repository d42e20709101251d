#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "modfuse/tensor.hpp"

namespace modfuse {

inline constexpr double dice_eps = 1e-5;

struct LossResult {
    double value = 0.0;
    Tensor grad;
};

struct LossWeights {
    double lambda_dice = 1.0;
    double lambda_ce = 1.0;

    void validate() const;
};

// 1 - mean_j (2 sum p g + eps) / (sum p + sum g + eps) over the foreground
// channels (channel 0 is skipped when J > 1 unless include_background).
LossResult dice_loss(const Tensor& probs, const Tensor& target, bool include_background = false);

// Mean over voxels of -log softmax at the true label; logits [J, ...].
LossResult ce_loss(const Tensor& logits, const Tensor& target);

// lambda_dice * dice(softmax(logits)) + lambda_ce * ce(logits); grad wrt logits.
LossResult combined_loss(const Tensor& logits, const Tensor& target, const LossWeights& w);

// 1 - (2/J) sum_j (sum G Y) / (sum G^2 + sum Y^2 + eps); grad wrt Y.
LossResult soft_dice_loss(const Tensor& probs, const Tensor& target);

// soft_dice_loss(softmax(logits)) with the gradient chained to the logits.
LossResult soft_dice_logits_loss(const Tensor& logits, const Tensor& target);

// Mean squared error over entries where mask != 0; mask has recon's shape.
LossResult inpainting_loss(const Tensor& recon, const Tensor& original, const Tensor& mask);

// Cross-entropy of logits [K] against the rotation index.
LossResult rotation_loss(const Tensor& logits, std::size_t true_rotation);

struct ContrastiveResult {
    double value = 0.0;
    std::vector<Tensor> grad_a;
    std::vector<Tensor> grad_b;
};

// Symmetric InfoNCE with cosine similarity over 2B anchors; each anchor's
// positive is its paired view and the other 2B - 2 embeddings are negatives.
ContrastiveResult contrastive_loss(std::span<const Tensor> z_a, std::span<const Tensor> z_b, double temperature);

}  // namespace modfuse
