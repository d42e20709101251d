#include "modfuse/volume.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "modfuse/error.hpp"

namespace modfuse {

std::size_t voxel_count(const Extent3& e)
{
    return e[0] * e[1] * e[2];
}

LabelGrid::LabelGrid(Extent3 shape_, std::int32_t fill) : shape(shape_), labels(voxel_count(shape_), fill) {}

LabelGrid::LabelGrid(Extent3 shape_, std::vector<std::int32_t> labels_) : shape(shape_), labels(std::move(labels_))
{
    if (labels.size() != voxel_count(shape)) {
        throw Error(ErrorCode::ShapeMismatch, "label grid data length does not match its shape");
    }
}

namespace {

Extent3 extent_of(const Tensor& t)
{
    if (t.rank() != 3) throw Error(ErrorCode::ShapeMismatch, "modality must be rank 3, got " + shape_string(t.shape()));
    return {t.dim(0), t.dim(1), t.dim(2)};
}

std::string extent_string(const Extent3& e)
{
    return "(" + std::to_string(e[0]) + "," + std::to_string(e[1]) + "," + std::to_string(e[2]) + ")";
}

}  // namespace

Extent3 Volume::extent() const
{
    if (modalities.empty()) throw Error(ErrorCode::InvalidArgument, "volume has no modalities");
    return extent_of(modalities.front());
}

void Volume::validate(int num_labels) const
{
    const Extent3 e = extent();
    for (std::size_t m = 1; m < modalities.size(); ++m) {
        if (extent_of(modalities[m]) != e) {
            throw Error(ErrorCode::ShapeMismatch, "modality " + std::to_string(m) + " shape " +
                                                      extent_string(extent_of(modalities[m])) + " differs from " +
                                                      extent_string(e));
        }
    }
    for (double s : spacing_mm) {
        if (!(s > 0.0) || !std::isfinite(s)) throw Error(ErrorCode::InvalidArgument, "spacing must be positive");
    }
    if (mask) {
        if (mask->shape != e) {
            throw Error(ErrorCode::ShapeMismatch, "mask shape " + extent_string(mask->shape) +
                                                      " differs from modality shape " + extent_string(e));
        }
        if (num_labels > 0) {
            for (auto l : mask->labels) {
                if (l < 0 || l >= num_labels) {
                    throw Error(ErrorCode::LabelOutOfRange, "mask label " + std::to_string(l) + " outside [0," +
                                                                std::to_string(num_labels) + ")");
                }
            }
        }
    }
}

void PatchSpec::check_divisible(std::size_t levels) const
{
    const std::size_t factor = std::size_t{1} << (levels - 1);
    for (std::size_t a = 0; a < 3; ++a) {
        if (size[a] == 0 || size[a] % factor != 0) {
            throw Error(ErrorCode::ConfigInvalid, "patch extent " + std::to_string(size[a]) + " on axis " +
                                                      std::to_string(a) + " is not divisible by " +
                                                      std::to_string(factor));
        }
    }
}

Volume zscore_normalize(const Volume& v)
{
    Volume out = v;
    for (auto& m : out.modalities) {
        const double n = static_cast<double>(m.size());
        if (m.size() == 0) throw Error(ErrorCode::InvalidArgument, "modality without voxels");
        double mean = 0.0;
        for (double x : m.data()) mean += x;
        mean /= n;
        double var = 0.0;
        for (double x : m.data()) var += (x - mean) * (x - mean);
        const double sd = std::max(std::sqrt(var / n), zscore_eps);
        for (double& x : m.data()) x = (x - mean) / sd;
    }
    return out;
}

CropOffset random_crop_offset(const Extent3& volume, const PatchSpec& patch, SeededRng& rng)
{
    CropOffset off;
    for (std::size_t a = 0; a < 3; ++a) {
        if (patch.size[a] > volume[a]) {
            throw Error(ErrorCode::PatchTooLarge, "patch extent " + std::to_string(patch.size[a]) + " exceeds volume extent " +
                                                      std::to_string(volume[a]) + " on axis " + std::to_string(a));
        }
        off.start[a] = rng.uniform_index(volume[a] - patch.size[a] + 1);
    }
    return off;
}

CropOffset foreground_crop_offset(const LabelGrid& mask, const PatchSpec& patch, SeededRng& rng)
{
    std::vector<std::size_t> foreground;
    for (std::size_t i = 0; i < mask.labels.size(); ++i)
        if (mask.labels[i] > 0) foreground.push_back(i);
    if (foreground.empty()) return random_crop_offset(mask.shape, patch, rng);
    for (std::size_t a = 0; a < 3; ++a) {
        if (patch.size[a] > mask.shape[a]) {
            throw Error(ErrorCode::PatchTooLarge, "patch extent exceeds volume on axis " + std::to_string(a));
        }
    }
    std::size_t flat = foreground[rng.uniform_index(foreground.size())];
    const std::size_t centre[3] = {flat / (mask.shape[1] * mask.shape[2]), (flat / mask.shape[2]) % mask.shape[1],
                                   flat % mask.shape[2]};
    CropOffset off;
    for (std::size_t a = 0; a < 3; ++a) {
        const std::size_t half = patch.size[a] / 2;
        const std::size_t hi = mask.shape[a] - patch.size[a];
        off.start[a] = centre[a] < half ? 0 : std::min(centre[a] - half, hi);
    }
    return off;
}

Volume crop(const Volume& v, const CropOffset& offset, const PatchSpec& patch)
{
    const Extent3 e = v.extent();
    for (std::size_t a = 0; a < 3; ++a) {
        if (offset.start[a] + patch.size[a] > e[a]) {
            throw Error(ErrorCode::PatchTooLarge, "crop window exceeds volume on axis " + std::to_string(a));
        }
    }
    const auto [pd, ph, pw] = patch.size;
    const auto [z0, y0, x0] = offset.start;
    Volume out;
    out.spacing_mm = v.spacing_mm;
    for (const auto& m : v.modalities) {
        Tensor t({pd, ph, pw});
        double* dst = t.ptr();
        for (std::size_t z = 0; z < pd; ++z)
            for (std::size_t y = 0; y < ph; ++y) {
                const double* src = m.ptr() + ((z0 + z) * e[1] + (y0 + y)) * e[2] + x0;
                dst = std::copy(src, src + pw, dst);
            }
        out.modalities.push_back(std::move(t));
    }
    if (v.mask) {
        LabelGrid g(patch.size);
        for (std::size_t z = 0; z < pd; ++z)
            for (std::size_t y = 0; y < ph; ++y)
                for (std::size_t x = 0; x < pw; ++x) g.at(z, y, x) = v.mask->at(z0 + z, y0 + y, x0 + x);
        out.mask = std::move(g);
    }
    return out;
}

Volume random_crop(const Volume& v, const PatchSpec& patch, SeededRng& rng)
{
    return crop(v, random_crop_offset(v.extent(), patch, rng), patch);
}

namespace {

// Applies a voxel permutation given as a source-index function to every
// channel of a contiguous block of spatial grids.
template <typename T, typename Map>
std::vector<T> permute_grids(const std::vector<T>& src, std::size_t channels, const Extent3& in, const Extent3& out,
                             Map source_of)
{
    std::vector<T> dst(src.size());
    const std::size_t n = voxel_count(in);
    for (std::size_t c = 0; c < channels; ++c) {
        const T* s = src.data() + c * n;
        T* d = dst.data() + c * n;
        for (std::size_t z = 0; z < out[0]; ++z)
            for (std::size_t y = 0; y < out[1]; ++y)
                for (std::size_t x = 0; x < out[2]; ++x) {
                    const auto [sz, sy, sx] = source_of(z, y, x);
                    d[(z * out[1] + y) * out[2] + x] = s[(sz * in[1] + sy) * in[2] + sx];
                }
    }
    return dst;
}

struct SpatialView {
    std::size_t channels;
    Extent3 extent;
};

SpatialView spatial_view(const Tensor& t)
{
    if (t.rank() == 3) return {1, {t.dim(0), t.dim(1), t.dim(2)}};
    if (t.rank() == 4) return {t.dim(0), {t.dim(1), t.dim(2), t.dim(3)}};
    throw Error(ErrorCode::ShapeMismatch, "spatial transform needs a rank-3 or rank-4 tensor");
}

Shape with_extent(const Tensor& t, const Extent3& e)
{
    if (t.rank() == 3) return {e[0], e[1], e[2]};
    return {t.dim(0), e[0], e[1], e[2]};
}

auto flip_map(const Extent3& e, std::size_t axis)
{
    return [e, axis](std::size_t z, std::size_t y, std::size_t x) {
        std::array<std::size_t, 3> s{z, y, x};
        s[axis] = e[axis] - 1 - s[axis];
        return s;
    };
}

// One quarter-turn: out(z, a, b) = in(z, H-1-b, a).
auto quarter_map(const Extent3& in)
{
    return [in](std::size_t z, std::size_t a, std::size_t b) {
        return std::array<std::size_t, 3>{z, in[1] - 1 - b, a};
    };
}

int normalize_turns(int k)
{
    return ((k % 4) + 4) % 4;
}

}  // namespace

Tensor flip_axis(const Tensor& t, std::size_t spatial_axis)
{
    if (spatial_axis > 2) throw Error(ErrorCode::IndexOutOfRange, "flip axis must be 0, 1 or 2");
    const SpatialView v = spatial_view(t);
    return Tensor(t.shape(), permute_grids(t.values(), v.channels, v.extent, v.extent, flip_map(v.extent, spatial_axis)));
}

Tensor rotate_quarter(const Tensor& t, int k)
{
    Tensor out = t;
    for (int turn = 0; turn < normalize_turns(k); ++turn) {
        const SpatialView v = spatial_view(out);
        const Extent3 rotated{v.extent[0], v.extent[2], v.extent[1]};
        out = Tensor(with_extent(out, rotated),
                     permute_grids(out.values(), v.channels, v.extent, rotated, quarter_map(v.extent)));
    }
    return out;
}

LabelGrid flip_axis(const LabelGrid& g, std::size_t spatial_axis)
{
    if (spatial_axis > 2) throw Error(ErrorCode::IndexOutOfRange, "flip axis must be 0, 1 or 2");
    return LabelGrid(g.shape, permute_grids(g.labels, 1, g.shape, g.shape, flip_map(g.shape, spatial_axis)));
}

LabelGrid rotate_quarter(const LabelGrid& g, int k)
{
    LabelGrid out = g;
    for (int turn = 0; turn < normalize_turns(k); ++turn) {
        const Extent3 rotated{out.shape[0], out.shape[2], out.shape[1]};
        out = LabelGrid(rotated, permute_grids(out.labels, 1, out.shape, rotated, quarter_map(out.shape)));
    }
    return out;
}

Volume augment(const Volume& v, const AugmentConfig& cfg, SeededRng& rng)
{
    Volume out = v;
    for (std::size_t axis = 0; axis < 3; ++axis) {
        if (!rng.bernoulli(cfg.flip_prob[axis])) continue;
        for (auto& m : out.modalities) m = flip_axis(m, axis);
        if (out.mask) out.mask = flip_axis(*out.mask, axis);
    }
    const Extent3 e = out.extent();
    if (e[1] == e[2] && rng.bernoulli(cfg.rotate_prob)) {
        const int k = static_cast<int>(rng.uniform_int(1, 3));
        for (auto& m : out.modalities) m = rotate_quarter(m, k);
        if (out.mask) out.mask = rotate_quarter(*out.mask, k);
    }
    if (rng.bernoulli(cfg.scale_prob)) {
        for (auto& m : out.modalities) {
            const double factor = rng.uniform(1.0 - cfg.scale_amount, 1.0 + cfg.scale_amount);
            for (double& x : m.data()) x *= factor;
        }
    }
    if (rng.bernoulli(cfg.noise_prob)) {
        for (auto& m : out.modalities)
            for (double& x : m.data()) x += rng.normal(0.0, cfg.noise_sigma);
    }
    return out;
}

Tensor one_hot(const LabelGrid& mask, int num_labels)
{
    if (num_labels < 1) throw Error(ErrorCode::InvalidArgument, "num_labels must be >= 1");
    const std::size_t n = mask.size();
    Tensor out({static_cast<std::size_t>(num_labels), mask.shape[0], mask.shape[1], mask.shape[2]});
    for (std::size_t i = 0; i < n; ++i) {
        const auto l = mask.labels[i];
        if (l < 0 || l >= num_labels) {
            throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(l) + " at voxel " + std::to_string(i) +
                                                        " outside [0," + std::to_string(num_labels) + ")");
        }
        out[static_cast<std::size_t>(l) * n + i] = 1.0;
    }
    return out;
}

Tensor stack_modalities(const Volume& v)
{
    const Extent3 e = v.extent();
    std::vector<double> data;
    data.reserve(v.num_modalities() * voxel_count(e));
    for (const auto& m : v.modalities) data.insert(data.end(), m.data().begin(), m.data().end());
    return Tensor({v.num_modalities(), e[0], e[1], e[2]}, std::move(data));
}

}  // namespace modfuse
