#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "modfuse/losses.hpp"
#include "modfuse/model.hpp"
#include "modfuse/optim.hpp"
#include "modfuse/synth.hpp"
#include "modfuse/volume.hpp"

namespace modfuse {

enum class SupervisedLoss { Combined, SoftDice };

struct OptimConfig {
    OptimizerKind kind = OptimizerKind::Sgd;
    ScheduleSpec schedule;  // total_epochs is filled from the owning stage
    double momentum = 0.95;
    double weight_decay = 3e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    Optimizer make() const;
};

struct TrainSettings {
    std::size_t batch_size = 2;
    std::size_t epochs = 200;
    double val_fraction = 0.2;
    double foreground_prob = 0.5;
    SupervisedLoss loss = SupervisedLoss::Combined;
    std::size_t val_every = 1;
    std::size_t patience = 0;  // 0 disables early stopping
    TransferMode init_transfer = TransferMode::PerModality;
    OptimConfig optim;
};

struct SslSettings {
    std::size_t epochs = 50;
    std::size_t batch_size = 2;
    double mask_ratio = 0.3;
    Extent3 mask_block{4, 4, 4};
    std::size_t rotations = 4;
    double temperature = 0.1;
    std::size_t embedding_dim = 16;
    double weight_inpaint = 1.0;
    double weight_rotation = 1.0;
    double weight_contrastive = 1.0;
    double holdout_fraction = 0.2;
    OptimConfig optim;

    SslSettings();
};

struct DataSettings {
    std::string train_manifest;
    std::string pretrain_manifest;
};

// Every knob of a run. Keys are "section.key"; see key_help() for the list.
struct Config {
    std::uint64_t seed = 0;
    std::string output_dir = "runs/default";
    ModelConfig model;
    PatchSpec patch;
    TrainSettings train;
    LossWeights loss;
    SslSettings ssl;
    AugmentConfig augment;
    DataSettings data;
    PhantomSpec phantom;
    std::string regions = "whole:1,2;core:2";
    double predict_overlap = 0.5;

    void validate() const;
    // Sorted "key = value" pairs for every key; round-trips through from_map.
    std::map<std::string, std::string> to_map() const;
    static Config from_map(const std::map<std::string, std::string>& kv);
};

// "section.key = value" lines; '#' comments and blank lines skipped; duplicate
// or malformed lines are ConfigInvalid.
std::map<std::string, std::string> parse_config_text(std::string_view text);
Config load_config(std::string_view text);
Config load_config_file(const std::filesystem::path& path);
std::string format_config(const Config& cfg);

// Key list with defaults, for --help style output.
std::string key_help();

}  // namespace modfuse
