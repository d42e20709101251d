#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modfuse/tensor.hpp"

namespace modfuse {

enum class NiftiDatatype : std::int16_t {
    Int16 = 4,
    Float32 = 16,
    Float64 = 64,
};

int bits_per_voxel(NiftiDatatype dt);

// The subset of the 348-byte NIfTI-1 header this reader interprets. Fields
// not listed here are written as zeros and ignored on read.
struct NiftiHeader {
    std::int32_t sizeof_hdr = 348;
    std::array<std::int16_t, 8> dim{};
    std::int16_t datatype = static_cast<std::int16_t>(NiftiDatatype::Float32);
    std::int16_t bitpix = 32;
    std::array<float, 8> pixdim{};
    float vox_offset = 352.0f;
    float scl_slope = 1.0f;
    float scl_inter = 0.0f;
    std::array<char, 4> magic{'n', '+', '1', '\0'};
    bool byte_swapped = false;  // set by the reader when the file was big-endian
};

inline constexpr std::size_t nifti_header_size = 348;
inline constexpr std::size_t nifti_data_offset = 352;

struct NiftiImage {
    NiftiHeader header;
    Tensor grid;                        // (D,H,W); dim[1] = W varies fastest on disk
    std::array<double, 3> spacing_mm{};  // (depth, height, width) = pixdim[3], pixdim[2], pixdim[1]
};

NiftiImage read_nifti(std::span<const std::uint8_t> bytes);

// spacing_mm in (depth, height, width) order, matching the grid axes.
std::vector<std::uint8_t> write_nifti(const Tensor& grid, const std::array<double, 3>& spacing_mm,
                                      NiftiDatatype datatype = NiftiDatatype::Float32);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

NiftiImage read_nifti_file(const std::filesystem::path& path);
void write_nifti_file(const std::filesystem::path& path, const Tensor& grid, const std::array<double, 3>& spacing_mm,
                      NiftiDatatype datatype = NiftiDatatype::Float32);

struct ManifestEntry {
    std::string case_id;
    std::vector<std::string> modality_paths;
    std::optional<std::string> mask_path;

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct CaseManifest {
    std::vector<ManifestEntry> entries;
    std::filesystem::path base_dir;  // relative paths resolve against this

    std::size_t num_modalities() const;
    std::filesystem::path resolve(const std::string& path) const;
};

// Parses "case_id,mod_1,...,mod_M[,mask]" lines. With num_modalities > 0 a
// row of M+1 paths carries a mask; with 0 every row must have the same width
// and is read as modality paths only.
CaseManifest load_manifest(std::string_view text, std::size_t num_modalities = 0);
CaseManifest load_manifest_file(const std::filesystem::path& path, std::size_t num_modalities = 0);
std::string format_manifest(const CaseManifest& manifest);

}  // namespace modfuse
