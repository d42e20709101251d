#include "modfuse/synth.hpp"

#include <cmath>
#include <cstdio>

#include "modfuse/error.hpp"
#include "modfuse/rng.hpp"

namespace modfuse {

void PhantomSpec::validate() const
{
    for (auto e : extent) {
        if (e < 1) throw Error(ErrorCode::ConfigInvalid, "phantom extents must be >= 1");
    }
    if (num_modalities < 1) throw Error(ErrorCode::ConfigInvalid, "phantom needs at least one modality");
    if (num_labels < 2) throw Error(ErrorCode::ConfigInvalid, "phantom needs num_labels >= 2");
    if (lesions_min > lesions_max) throw Error(ErrorCode::ConfigInvalid, "phantom lesion count range is empty");
    if (!(radius_min >= 1.0) || !(radius_max >= radius_min)) {
        throw Error(ErrorCode::ConfigInvalid, "phantom radii need 1 <= radius_min <= radius_max");
    }
    if (!(noise_sigma >= 0.0)) throw Error(ErrorCode::ConfigInvalid, "phantom noise sigma must be >= 0");
    if (anatomy_layers < 1) throw Error(ErrorCode::ConfigInvalid, "phantom needs at least one background band");
    const std::size_t S = num_labels - 1;
    if (lesion_mean.size() != S || hidden.size() != S) {
        throw Error(ErrorCode::ConfigInvalid, "phantom tables need one row per lesion sub-region (" + std::to_string(S) + ")");
    }
    for (std::size_t s = 0; s < S; ++s) {
        if (lesion_mean[s].size() != num_modalities || hidden[s].size() != num_modalities) {
            throw Error(ErrorCode::ConfigInvalid, "phantom table row " + std::to_string(s) + " needs " +
                                                      std::to_string(num_modalities) + " entries");
        }
        for (double h : hidden[s]) {
            if (!(h >= 0.0 && h <= 1.0)) throw Error(ErrorCode::ConfigInvalid, "hidden probabilities must lie in [0,1]");
        }
    }
    if (noise_sigma > 0.0) {
        for (std::size_t m = 0; m < num_modalities; ++m) {
            for (std::size_t a = 0; a < num_tissues(); ++a) {
                for (std::size_t b = a + 1; b < num_tissues(); ++b) {
                    if (std::abs(tissue_mean(a, m) - tissue_mean(b, m)) < 3.0 * noise_sigma) {
                        throw Error(ErrorCode::ConfigInvalid, "modality " + std::to_string(m) + ": tissues " +
                                                                  std::to_string(a) + " and " + std::to_string(b) +
                                                                  " are closer than 3 sigma");
                    }
                }
            }
        }
    }
    for (std::size_t a = 0; a < 3; ++a) {
        if (lesions_max > 0 && extent[a] < 2 * static_cast<std::size_t>(std::floor(radius_max)) + 1) {
            throw Error(ErrorCode::SpecInfeasible, "a lesion of radius " + std::to_string(radius_max) +
                                                       " cannot fit along axis " + std::to_string(a) + " (extent " +
                                                       std::to_string(extent[a]) + ")");
        }
    }
}

double PhantomSpec::tissue_mean(std::size_t tissue, std::size_t modality) const
{
    if (tissue < anatomy_layers) return static_cast<double>(tissue) * anatomy_step;
    return lesion_mean.at(tissue - anatomy_layers).at(modality);
}

PhantomCase generate_case_detailed(const PhantomSpec& spec, std::uint64_t seed)
{
    spec.validate();
    SeededRng rng(seed);
    const Extent3 e = spec.extent;
    const std::size_t S = spec.num_labels - 1;

    struct Lesion {
        std::array<double, 3> radius;
        std::array<std::int64_t, 3> centre;
    };
    std::vector<Lesion> lesions(static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(spec.lesions_min), static_cast<std::int64_t>(spec.lesions_max))));
    for (auto& les : lesions) {
        for (std::size_t a = 0; a < 3; ++a) les.radius[a] = rng.uniform(spec.radius_min, spec.radius_max);
        for (std::size_t a = 0; a < 3; ++a) {
            const auto margin = static_cast<std::int64_t>(std::floor(les.radius[a]));
            les.centre[a] = rng.uniform_int(margin, static_cast<std::int64_t>(e[a]) - 1 - margin);
        }
    }

    PhantomCase pc;
    LabelGrid mask(e, 0);
    for (std::size_t z = 0; z < e[0]; ++z) {
        for (std::size_t y = 0; y < e[1]; ++y) {
            for (std::size_t x = 0; x < e[2]; ++x) {
                const double p[3] = {static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
                std::int32_t label = 0;
                for (const auto& les : lesions) {
                    double q = 0.0;
                    for (std::size_t a = 0; a < 3; ++a) {
                        const double d = (p[a] - static_cast<double>(les.centre[a])) / les.radius[a];
                        q += d * d;
                    }
                    // Inside sub-region s when sqrt(q) <= 1 - s/S.
                    for (std::size_t s = S; s-- > 0;) {
                        const double scale = 1.0 - static_cast<double>(s) / static_cast<double>(S);
                        if (q <= scale * scale) {
                            label = std::max(label, static_cast<std::int32_t>(s + 1));
                            break;
                        }
                    }
                }
                mask.at(z, y, x) = label;
            }
        }
    }

    const std::size_t n = voxel_count(e);
    pc.appearance.assign(spec.num_modalities, std::vector<std::uint8_t>(n));
    for (std::size_t m = 0; m < spec.num_modalities; ++m) {
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t y = (i / e[2]) % e[1];
            const std::size_t band = y * spec.anatomy_layers / e[1];
            const std::int32_t label = mask.labels[i];
            std::size_t tissue = band;
            if (label > 0 && !rng.bernoulli(spec.hidden[label - 1][m])) tissue = spec.anatomy_layers + label - 1;
            pc.appearance[m][i] = static_cast<std::uint8_t>(tissue);
        }
    }
    for (std::size_t m = 0; m < spec.num_modalities; ++m) {
        Tensor t({e[0], e[1], e[2]});
        for (std::size_t i = 0; i < n; ++i) {
            t[i] = spec.tissue_mean(pc.appearance[m][i], m);
            if (spec.noise_sigma > 0.0) t[i] += rng.normal(0.0, spec.noise_sigma);
        }
        pc.volume.modalities.push_back(std::move(t));
    }
    pc.volume.spacing_mm = spec.spacing_mm;
    pc.volume.mask = std::move(mask);
    return pc;
}

Volume generate_case(const PhantomSpec& spec, std::uint64_t seed)
{
    return generate_case_detailed(spec, seed).volume;
}

std::string case_id_for(std::size_t index)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "case_%04zu", index);
    return buf;
}

CaseManifest generate_dataset(const PhantomSpec& spec, std::size_t n, const std::filesystem::path& out_dir,
                              std::uint64_t base_seed)
{
    if (n < 1) throw Error(ErrorCode::ConfigInvalid, "generate_dataset needs n >= 1");
    spec.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create " + out_dir.string() + ": " + ec.message());
    CaseManifest manifest;
    manifest.base_dir = out_dir;
    for (std::size_t i = 0; i < n; ++i) {
        const Volume v = generate_case(spec, base_seed + i);
        ManifestEntry entry;
        entry.case_id = case_id_for(i);
        for (std::size_t m = 0; m < v.num_modalities(); ++m) {
            const std::string name = entry.case_id + "_mod" + std::to_string(m) + ".nii";
            write_nifti_file(out_dir / name, v.modalities[m], v.spacing_mm);
            entry.modality_paths.push_back(name);
        }
        const LabelGrid& mask = *v.mask;
        Tensor grid({mask.shape[0], mask.shape[1], mask.shape[2]});
        for (std::size_t k = 0; k < mask.size(); ++k) grid[k] = mask.labels[k];
        const std::string mask_name = entry.case_id + "_mask.nii";
        write_nifti_file(out_dir / mask_name, grid, v.spacing_mm, NiftiDatatype::Int16);
        entry.mask_path = mask_name;
        manifest.entries.push_back(std::move(entry));
    }
    const std::string text = format_manifest(manifest);
    write_file_bytes(out_dir / "manifest.csv",
                     std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    return manifest;
}

}  // namespace modfuse
