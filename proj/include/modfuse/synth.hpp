#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "modfuse/nifti.hpp"
#include "modfuse/volume.hpp"

namespace modfuse {

// Phantom model: a layered background ("anatomy" bands along the height axis)
// plus ellipsoidal lesions whose nested sub-regions carry labels 1..J-1
// (label 1 outermost). Sub-region s of a lesion uses radii scaled by
// 1 - s/(J-1). Each sub-region has a per-modality mean and a per-modality
// hidden probability: a hidden voxel shows the background band instead, so a
// hidden probability of 1 makes that sub-region invisible in that modality.
struct PhantomSpec {
    Extent3 extent{32, 32, 32};
    std::size_t num_modalities = 2;
    std::size_t num_labels = 3;
    std::size_t lesions_min = 1;
    std::size_t lesions_max = 3;
    double radius_min = 3.0;
    double radius_max = 7.0;
    double noise_sigma = 0.1;
    std::size_t anatomy_layers = 4;
    double anatomy_step = 0.5;  // band k has mean k * step in every modality
    // [sub-region][modality]
    std::vector<std::vector<double>> lesion_mean{{3.0, 4.5}, {4.5, 3.0}};
    std::vector<std::vector<double>> hidden{{0.0, 1.0}, {1.0, 0.0}};
    std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};

    void validate() const;
    std::size_t num_tissues() const { return anatomy_layers + num_labels - 1; }
    // Tissue t < anatomy_layers is a background band, else sub-region t - anatomy_layers.
    double tissue_mean(std::size_t tissue, std::size_t modality) const;
};

struct PhantomCase {
    Volume volume;
    // [modality][voxel]: tissue whose mean the voxel shows (before noise).
    std::vector<std::vector<std::uint8_t>> appearance;
};

PhantomCase generate_case_detailed(const PhantomSpec& spec, std::uint64_t seed);
Volume generate_case(const PhantomSpec& spec, std::uint64_t seed);

std::string case_id_for(std::size_t index);

// Writes case_XXXX_mod<m>.nii, case_XXXX_mask.nii and manifest.csv (paths
// relative to out_dir); case i uses seed base_seed + i.
CaseManifest generate_dataset(const PhantomSpec& spec, std::size_t n, const std::filesystem::path& out_dir,
                              std::uint64_t base_seed);

}  // namespace modfuse
