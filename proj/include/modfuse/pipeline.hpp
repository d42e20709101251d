#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "modfuse/checkpoint.hpp"
#include "modfuse/config.hpp"
#include "modfuse/metrics.hpp"
#include "modfuse/model.hpp"
#include "modfuse/nifti.hpp"
#include "modfuse/volume.hpp"

namespace modfuse {

// --- data -------------------------------------------------------------------

Volume load_case(const CaseManifest& manifest, const ManifestEntry& entry, bool with_mask);

struct Dataset {
    std::vector<std::string> ids;
    std::vector<Volume> volumes;  // z-score normalised

    std::size_t size() const { return ids.size(); }
};

// expected_modalities = 0 skips the check; num_labels > 0 range-checks masks.
Dataset load_dataset(const CaseManifest& manifest, bool with_masks, std::size_t expected_modalities,
                     int num_labels = 0);

// --- inference ----------------------------------------------------------------

// 0, step, 2*step, ... plus extent - patch, with step = max(1, floor(patch * (1 - overlap))).
std::vector<std::size_t> window_starts(std::size_t extent, std::size_t patch, double overlap);

// Averages fn(start) ([channels, patch]) over the window grid with equal weight
// per window. Every extent must be >= the patch extent.
using WindowFn = std::function<Tensor(const Extent3& start)>;
Tensor sliding_window_average(const Extent3& extent, const PatchSpec& patch, double overlap, std::size_t channels,
                              const WindowFn& fn);

// Per-label probabilities [J,D,H,W]; volumes smaller than the patch are zero
// padded and the result cropped back.
Tensor sliding_window_predict(Model& model, const Volume& normalized, const PatchSpec& patch, double overlap);

LabelGrid argmax_labels(const Tensor& probs);

struct Prediction {
    Tensor probs;
    LabelGrid labels;
    std::vector<LabelGrid> region_masks;
    LabelGrid lesion_mask;  // union of the region masks
};

Prediction predict_case(Model& model, const Volume& normalized, const PatchSpec& patch, double overlap,
                        const std::vector<Region>& regions);

// Mean validation DSC (regions, then cases).
MetricsReport validate_model(Model& model, const Dataset& data, const std::vector<std::size_t>& indices,
                             const PatchSpec& patch, double overlap, const std::vector<Region>& regions);

// --- training ----------------------------------------------------------------

struct TrainOptions {
    std::optional<std::filesystem::path> init;  // encoder checkpoint
    bool resume = false;
    std::size_t stop_after = 0;  // stop once this many epochs are complete (0 = all)
    std::ostream* log = nullptr;
    std::function<void(std::size_t epoch, const Model&)> on_epoch_begin;
};

struct TrainResult {
    std::vector<double> epoch_loss;
    std::vector<double> val_dsc;  // NaN for epochs without validation
    std::vector<double> step_losses;
    std::vector<double> lr;
    std::vector<std::string> train_ids, val_ids;
    std::size_t epochs_completed = 0;
    std::size_t best_epoch = 0;  // 1-based; 0 = none yet
    double best_dsc = -1.0;
    std::filesystem::path best_checkpoint, last_checkpoint;
};

TrainResult cmd_train(const Config& cfg, const TrainOptions& opts = {});

struct PretrainOptions {
    std::optional<std::filesystem::path> init;  // continue from an earlier pretraining stage
    bool resume = false;
    std::size_t stop_after = 0;
    std::ostream* log = nullptr;
};

struct PretrainResult {
    std::vector<double> loss, inpaint, rotation, contrastive, train_rotation_acc, heldout_rotation_acc, lr;
    std::size_t epochs_completed = 0;
    std::filesystem::path checkpoint;
};

PretrainResult cmd_pretrain(const Config& cfg, const PretrainOptions& opts = {});

// --- files ---------------------------------------------------------------------

CaseManifest cmd_generate_data(const Config& cfg, std::size_t n, const std::filesystem::path& out_dir);

// Writes <id>_labels.nii, <id>_<region>.nii and <id>_lesion.nii per case.
std::vector<std::string> cmd_predict(const Config& cfg, const std::filesystem::path& checkpoint,
                                     const std::filesystem::path& manifest, const std::filesystem::path& out_dir);

// Reads <pred_dir>/<id>_labels.nii for every manifest case; writes metrics.kv
// and metrics.txt into out_dir.
MetricsReport cmd_evaluate(const Config& cfg, const std::filesystem::path& pred_dir,
                           const std::filesystem::path& gt_manifest, const std::filesystem::path& out_dir);

// Run config with the per-run keys dropped, as stored in checkpoints.
std::map<std::string, std::string> stored_run_config(const Config& cfg);
// Rebuilds the run config saved in a checkpoint (defaults for absent keys).
Config config_from_checkpoint(const Checkpoint& ck);

}  // namespace modfuse
