#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "modfuse/rng.hpp"
#include "modfuse/tensor.hpp"

namespace modfuse {

using Extent3 = std::array<std::size_t, 3>;  // (depth, height, width)

std::size_t voxel_count(const Extent3& e);

// Integer label grid in (D,H,W) order.
struct LabelGrid {
    LabelGrid() = default;
    explicit LabelGrid(Extent3 shape, std::int32_t fill = 0);
    LabelGrid(Extent3 shape, std::vector<std::int32_t> labels);

    std::size_t size() const noexcept { return labels.size(); }
    std::int32_t& at(std::size_t z, std::size_t y, std::size_t x) { return labels[(z * shape[1] + y) * shape[2] + x]; }
    std::int32_t at(std::size_t z, std::size_t y, std::size_t x) const
    {
        return labels[(z * shape[1] + y) * shape[2] + x];
    }

    friend bool operator==(const LabelGrid&, const LabelGrid&) = default;

    Extent3 shape{};
    std::vector<std::int32_t> labels;
};

// One case: M co-registered intensity channels, each a rank-3 tensor, plus an
// optional label mask of the same shape.
struct Volume {
    std::vector<Tensor> modalities;
    std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
    std::optional<LabelGrid> mask;

    std::size_t num_modalities() const noexcept { return modalities.size(); }
    Extent3 extent() const;
    // Checks the structural invariants; num_labels > 0 also range-checks the mask.
    void validate(int num_labels = 0) const;
};

struct PatchSpec {
    Extent3 size{16, 16, 16};

    // Each extent must be divisible by 2^(levels-1).
    void check_divisible(std::size_t levels) const;
};

struct CropOffset {
    Extent3 start{};
    friend bool operator==(const CropOffset&, const CropOffset&) = default;
};

inline constexpr double zscore_eps = 1e-8;

Volume zscore_normalize(const Volume& v);

CropOffset random_crop_offset(const Extent3& volume, const PatchSpec& patch, SeededRng& rng);
// Patch centred on a uniformly drawn foreground voxel (label > 0), clamped to
// the volume; falls back to a uniform offset when the mask has no foreground.
CropOffset foreground_crop_offset(const LabelGrid& mask, const PatchSpec& patch, SeededRng& rng);
Volume crop(const Volume& v, const CropOffset& offset, const PatchSpec& patch);
Volume random_crop(const Volume& v, const PatchSpec& patch, SeededRng& rng);

struct AugmentConfig {
    std::array<double, 3> flip_prob{0.5, 0.5, 0.5};
    double rotate_prob = 0.5;  // axial quarter-turns; applied only when H == W
    double scale_prob = 0.15;
    double scale_amount = 0.25;  // factor ~ U(1 - a, 1 + a)
    double noise_prob = 0.15;
    double noise_sigma = 0.1;
};

Volume augment(const Volume& v, const AugmentConfig& cfg, SeededRng& rng);

// Spatial index permutations over the last three axes of a rank-3 or rank-4
// tensor (leading axis = channels).
Tensor flip_axis(const Tensor& t, std::size_t spatial_axis);
// k quarter-turns in the (H,W) plane; one turn maps (z,y,x) to (z, x, H-1-y).
Tensor rotate_quarter(const Tensor& t, int k);
LabelGrid flip_axis(const LabelGrid& g, std::size_t spatial_axis);
LabelGrid rotate_quarter(const LabelGrid& g, int k);

Tensor one_hot(const LabelGrid& mask, int num_labels);

// Stacks modality channels into a [M,D,H,W] tensor.
Tensor stack_modalities(const Volume& v);

}  // namespace modfuse
