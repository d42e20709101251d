#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modfuse/layers.hpp"
#include "modfuse/rng.hpp"
#include "modfuse/tensor.hpp"

namespace modfuse {

enum class FusionMode { ConcatProject, Mean };
enum class ModelVariant { MultiEncoder, Vanilla };

const char* to_string(FusionMode m) noexcept;
const char* to_string(ModelVariant v) noexcept;
FusionMode parse_fusion_mode(const std::string& s);
ModelVariant parse_model_variant(const std::string& s);

inline constexpr std::size_t max_channels = 320;

struct ModelConfig {
    std::size_t num_modalities = 2;
    std::size_t num_labels = 3;
    std::size_t num_levels = 3;
    std::size_t base_channels = 8;
    FusionMode fusion = FusionMode::ConcatProject;
    FusionMode skip_fusion = FusionMode::Mean;
    ModelVariant variant = ModelVariant::MultiEncoder;

    void validate() const;
    std::size_t channels(std::size_t level) const;
    std::size_t num_encoders() const { return variant == ModelVariant::Vanilla ? 1 : num_modalities; }
    std::size_t encoder_in_channels() const { return variant == ModelVariant::Vanilla ? num_modalities : 1; }

    // "model.key = value" lines, keys sorted.
    std::map<std::string, std::string> to_map() const;
    static ModelConfig from_map(const std::map<std::string, std::string>& kv);

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// M feature maps of equal shape -> one. Mean ignores `proj`; concat_project
// concatenates channels and applies the 1x1x1 projection (w: [C, M*C, 1,1,1]).
Tensor fuse_bottleneck(std::span<const Tensor> features, FusionMode mode, const Tensor* proj_w = nullptr,
                       const Tensor* proj_b = nullptr);

// conv3d -> instance norm -> leaky ReLU, with the activations backward needs.
struct ConvBlock {
    std::size_t w = 0, b = 0, gain = 0, shift = 0;  // indices into Model::params()
    std::size_t stride = 1;

    Tensor input;
    Tensor pre_act;
    InstanceNormCache norm;
};

// Fused representation of one case: per-level feature maps after skip fusion,
// with levels.back() the fused bottleneck.
struct Encoding {
    std::vector<Tensor> levels;
};

class Model {
public:
    Model() = default;
    Model(const ModelConfig& cfg, SeededRng& rng);

    const ModelConfig& config() const noexcept { return cfg_; }
    std::vector<Param>& params() noexcept { return params_; }
    const std::vector<Param>& params() const noexcept { return params_; }
    Param& param(const std::string& id);
    const Param& param(const std::string& id) const;
    const Param* find_param(const std::string& id) const;
    std::size_t num_parameters() const;
    void zero_grad();

    // inputs: M patches, each [D,H,W] or [1,D,H,W]. Returns [num_labels,D,H,W].
    Tensor forward(std::span<const Tensor> inputs);
    // Accumulates into Param::grad. The cache survives, so a second call adds
    // the same gradients again.
    void backward(const Tensor& grad_logits);

    // Encoder path only (used by self-supervised heads).
    Encoding encode(std::span<const Tensor> inputs);
    // grads: one tensor per fused level (empty tensors count as zero).
    void backward_encode(std::span<const Tensor> grads);

    // Drops cached activations.
    void clear_cache();

private:
    struct FusionSite {
        std::optional<std::size_t> w, b;  // concat_project only
        FusionMode mode = FusionMode::Mean;
        std::vector<Tensor> inputs;
    };
    struct DecoderLevel {
        std::size_t up_w = 0, up_b = 0;
        ConvBlock blocks[2];
        Tensor up_input;
        std::size_t skip_channels = 0;
    };

    std::size_t add_param(const std::string& id, Tensor value);
    ConvBlock make_block(const std::string& prefix, std::size_t in, std::size_t out, std::size_t stride,
                         SeededRng& rng);
    Tensor block_forward(ConvBlock& blk, const Tensor& x);
    Tensor block_backward(ConvBlock& blk, const Tensor& grad);
    Tensor fusion_forward(FusionSite& site, std::vector<Tensor> features);
    std::vector<Tensor> fusion_backward(FusionSite& site, const Tensor& grad);
    std::vector<Tensor> prepare_inputs(std::span<const Tensor> inputs) const;

    ModelConfig cfg_;
    std::vector<Param> params_;
    std::map<std::string, std::size_t> index_;
    std::vector<std::vector<ConvBlock>> encoders_;  // [encoder][level*2 + block]
    std::vector<FusionSite> fusion_;                // per level; last is the bottleneck
    std::vector<DecoderLevel> decoder_;             // index = level, 0..L-2
    std::size_t head_w = 0, head_b = 0;
    Tensor head_input;
    bool encoded_ = false;
    bool decoded_ = false;
};

Model build_model(const ModelConfig& cfg, SeededRng& rng);

// Encoder parameter ids carry this prefix (e.g. "encoder1.level0.block0.conv.weight").
std::string encoder_prefix(std::size_t m);
bool is_encoder_param(const std::string& id);

}  // namespace modfuse
