#include "modfuse/model.hpp"

#include <algorithm>

#include "modfuse/error.hpp"

namespace modfuse {

const char* to_string(FusionMode m) noexcept
{
    return m == FusionMode::Mean ? "mean" : "concat_project";
}

const char* to_string(ModelVariant v) noexcept
{
    return v == ModelVariant::Vanilla ? "vanilla" : "multi_encoder";
}

FusionMode parse_fusion_mode(const std::string& s)
{
    if (s == "mean") return FusionMode::Mean;
    if (s == "concat_project") return FusionMode::ConcatProject;
    throw Error(ErrorCode::ConfigInvalid, "unknown fusion mode '" + s + "' (mean | concat_project)");
}

ModelVariant parse_model_variant(const std::string& s)
{
    if (s == "multi_encoder") return ModelVariant::MultiEncoder;
    if (s == "vanilla") return ModelVariant::Vanilla;
    throw Error(ErrorCode::ConfigInvalid, "unknown model variant '" + s + "' (multi_encoder | vanilla)");
}

void ModelConfig::validate() const
{
    if (num_modalities < 1) throw Error(ErrorCode::ConfigInvalid, "model.num_modalities must be >= 1");
    if (num_labels < 2) throw Error(ErrorCode::ConfigInvalid, "model.num_labels must be >= 2");
    if (num_levels < 2) throw Error(ErrorCode::ConfigInvalid, "model.num_levels must be >= 2");
    if (num_levels > 8) throw Error(ErrorCode::ConfigInvalid, "model.num_levels above 8 is not supported");
    if (base_channels < 1) throw Error(ErrorCode::ConfigInvalid, "model.base_channels must be >= 1");
}

std::size_t ModelConfig::channels(std::size_t level) const
{
    std::size_t c = base_channels;
    for (std::size_t i = 0; i < level && c < max_channels; ++i) c *= 2;
    return std::min(c, max_channels);
}

std::map<std::string, std::string> ModelConfig::to_map() const
{
    return {
        {"model.num_modalities", std::to_string(num_modalities)},
        {"model.num_labels", std::to_string(num_labels)},
        {"model.num_levels", std::to_string(num_levels)},
        {"model.base_channels", std::to_string(base_channels)},
        {"model.fusion", to_string(fusion)},
        {"model.skip_fusion", to_string(skip_fusion)},
        {"model.variant", to_string(variant)},
    };
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv)
{
    auto get = [&](const std::string& key) -> const std::string& {
        const auto it = kv.find(key);
        if (it == kv.end()) throw Error(ErrorCode::ConfigInvalid, "missing key " + key);
        return it->second;
    };
    auto num = [&](const std::string& key) -> std::size_t {
        const std::string& s = get(key);
        std::size_t used = 0;
        unsigned long v = 0;
        try {
            v = std::stoul(s, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != s.size() || s.empty() || s.front() == '-') {
            throw Error(ErrorCode::ConfigInvalid, key + ": expected a non-negative integer, got '" + s + "'");
        }
        return v;
    };
    ModelConfig c;
    c.num_modalities = num("model.num_modalities");
    c.num_labels = num("model.num_labels");
    c.num_levels = num("model.num_levels");
    c.base_channels = num("model.base_channels");
    c.fusion = parse_fusion_mode(get("model.fusion"));
    c.skip_fusion = parse_fusion_mode(get("model.skip_fusion"));
    c.variant = parse_model_variant(get("model.variant"));
    return c;
}

Tensor fuse_bottleneck(std::span<const Tensor> features, FusionMode mode, const Tensor* proj_w, const Tensor* proj_b)
{
    if (features.empty()) throw Error(ErrorCode::ShapeMismatch, "fuse_bottleneck needs at least one feature map");
    for (const auto& f : features) {
        if (f.shape() != features[0].shape()) {
            throw Error(ErrorCode::ShapeMismatch, "fusion inputs differ: " + shape_string(features[0].shape()) +
                                                      " vs " + shape_string(f.shape()));
        }
    }
    if (mode == FusionMode::Mean) {
        Tensor out = features[0];
        for (std::size_t m = 1; m < features.size(); ++m) axpy(out, features[m]);
        if (features.size() > 1) {
            const double inv = 1.0 / static_cast<double>(features.size());
            for (auto& v : out.data()) v *= inv;
        }
        return out;
    }
    if (proj_w == nullptr || proj_b == nullptr) {
        throw Error(ErrorCode::InvalidArgument, "concat_project fusion needs projection weights");
    }
    return conv3d_forward(concat_channels(features), *proj_w, *proj_b, 1, 0);
}

std::string encoder_prefix(std::size_t m)
{
    return "encoder" + std::to_string(m) + ".";
}

bool is_encoder_param(const std::string& id)
{
    return id.rfind("encoder", 0) == 0;
}

std::size_t Model::add_param(const std::string& id, Tensor value)
{
    if (index_.count(id)) throw Error(ErrorCode::InvalidArgument, "duplicate parameter id " + id);
    index_[id] = params_.size();
    params_.emplace_back(id, std::move(value));
    return params_.size() - 1;
}

ConvBlock Model::make_block(const std::string& prefix, std::size_t in, std::size_t out, std::size_t stride,
                            SeededRng& rng)
{
    ConvBlock blk;
    blk.stride = stride;
    blk.w = add_param(prefix + "conv.weight", he_init({out, in, 3, 3, 3}, rng));
    blk.b = add_param(prefix + "conv.bias", Tensor({out}, 0.0));
    blk.gain = add_param(prefix + "norm.gain", Tensor({out}, 1.0));
    blk.shift = add_param(prefix + "norm.shift", Tensor({out}, 0.0));
    return blk;
}

Model::Model(const ModelConfig& cfg, SeededRng& rng) : cfg_(cfg)
{
    cfg_.validate();
    const std::size_t L = cfg_.num_levels;
    const std::size_t E = cfg_.num_encoders();

    encoders_.resize(E);
    for (std::size_t e = 0; e < E; ++e) {
        for (std::size_t l = 0; l < L; ++l) {
            const std::string p = encoder_prefix(e) + "level" + std::to_string(l) + ".";
            const std::size_t in = l == 0 ? cfg_.encoder_in_channels() : cfg_.channels(l - 1);
            encoders_[e].push_back(make_block(p + "block0.", in, cfg_.channels(l), l == 0 ? 1 : 2, rng));
            encoders_[e].push_back(make_block(p + "block1.", cfg_.channels(l), cfg_.channels(l), 1, rng));
        }
    }

    fusion_.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
        FusionSite& site = fusion_[l];
        site.mode = l + 1 == L ? cfg_.fusion : cfg_.skip_fusion;
        if (E > 1 && site.mode == FusionMode::ConcatProject) {
            const std::string p = l + 1 == L ? std::string("fusion.bottleneck.proj.")
                                             : "fusion.skip" + std::to_string(l) + ".proj.";
            const std::size_t c = cfg_.channels(l);
            site.w = add_param(p + "weight", he_init({c, E * c, 1, 1, 1}, rng));
            site.b = add_param(p + "bias", Tensor({c}, 0.0));
        }
    }

    decoder_.resize(L - 1);
    for (std::size_t l = L - 1; l-- > 0;) {
        DecoderLevel& d = decoder_[l];
        const std::string p = "decoder.level" + std::to_string(l) + ".";
        const std::size_t c = cfg_.channels(l);
        d.up_w = add_param(p + "up.weight", he_init({cfg_.channels(l + 1), c, 2, 2, 2}, rng));
        d.up_b = add_param(p + "up.bias", Tensor({c}, 0.0));
        d.skip_channels = c;
        d.blocks[0] = make_block(p + "block0.", 2 * c, c, 1, rng);
        d.blocks[1] = make_block(p + "block1.", c, c, 1, rng);
    }

    head_w = add_param("head.weight", he_init({cfg_.num_labels, cfg_.channels(0), 1, 1, 1}, rng));
    head_b = add_param("head.bias", Tensor({cfg_.num_labels}, 0.0));
}

Model build_model(const ModelConfig& cfg, SeededRng& rng)
{
    return Model(cfg, rng);
}

Param& Model::param(const std::string& id)
{
    const auto it = index_.find(id);
    if (it == index_.end()) throw Error(ErrorCode::MissingParam, "no parameter named " + id);
    return params_[it->second];
}

const Param& Model::param(const std::string& id) const
{
    const auto it = index_.find(id);
    if (it == index_.end()) throw Error(ErrorCode::MissingParam, "no parameter named " + id);
    return params_[it->second];
}

const Param* Model::find_param(const std::string& id) const
{
    const auto it = index_.find(id);
    return it == index_.end() ? nullptr : &params_[it->second];
}

std::size_t Model::num_parameters() const
{
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

void Model::zero_grad()
{
    for (auto& p : params_) p.zero_grad();
}

void Model::clear_cache()
{
    for (auto& enc : encoders_) {
        for (auto& blk : enc) blk = ConvBlock{blk.w, blk.b, blk.gain, blk.shift, blk.stride, {}, {}, {}};
    }
    for (auto& site : fusion_) site.inputs.clear();
    for (auto& d : decoder_) {
        d.up_input = Tensor();
        for (auto& blk : d.blocks) blk = ConvBlock{blk.w, blk.b, blk.gain, blk.shift, blk.stride, {}, {}, {}};
    }
    head_input = Tensor();
    encoded_ = decoded_ = false;
}

Tensor Model::block_forward(ConvBlock& blk, const Tensor& x)
{
    blk.input = x;
    const Tensor y = conv3d_forward(x, params_[blk.w].value, params_[blk.b].value, blk.stride, 1);
    blk.pre_act = instance_norm_forward(y, params_[blk.gain].value, params_[blk.shift].value, &blk.norm);
    return leaky_relu_forward(blk.pre_act);
}

Tensor Model::block_backward(ConvBlock& blk, const Tensor& grad)
{
    const Tensor g_pre = leaky_relu_backward(blk.pre_act, grad);
    InstanceNormGrads ng = instance_norm_backward(blk.norm, params_[blk.gain].value, g_pre);
    axpy(params_[blk.gain].grad, ng.grad_gain);
    axpy(params_[blk.shift].grad, ng.grad_shift);
    ConvGrads cg = conv3d_backward(blk.input, params_[blk.w].value, ng.grad_input, blk.stride, 1);
    axpy(params_[blk.w].grad, cg.grad_weight);
    axpy(params_[blk.b].grad, cg.grad_bias);
    return std::move(cg.grad_input);
}

Tensor Model::fusion_forward(FusionSite& site, std::vector<Tensor> features)
{
    if (features.size() == 1) {
        site.inputs.clear();
        return std::move(features[0]);
    }
    Tensor out = site.w ? fuse_bottleneck(features, site.mode, &params_[*site.w].value, &params_[*site.b].value)
                        : fuse_bottleneck(features, site.mode);
    site.inputs = std::move(features);
    return out;
}

std::vector<Tensor> Model::fusion_backward(FusionSite& site, const Tensor& grad)
{
    const std::size_t E = encoders_.size();
    if (E == 1) return {grad};
    if (site.mode == FusionMode::Mean) {
        Tensor g = grad;
        const double inv = 1.0 / static_cast<double>(E);
        for (auto& v : g.data()) v *= inv;
        return std::vector<Tensor>(E, g);
    }
    ConvGrads cg = conv3d_backward(concat_channels(site.inputs), params_[*site.w].value, grad, 1, 0);
    axpy(params_[*site.w].grad, cg.grad_weight);
    axpy(params_[*site.b].grad, cg.grad_bias);
    const std::vector<std::size_t> counts(E, site.inputs[0].dim(0));
    return split_channels(cg.grad_input, counts);
}

std::vector<Tensor> Model::prepare_inputs(std::span<const Tensor> inputs) const
{
    if (inputs.size() != cfg_.num_modalities) {
        throw Error(ErrorCode::ModalityCountMismatch, "model expects " + std::to_string(cfg_.num_modalities) +
                                                          " modalities, got " + std::to_string(inputs.size()));
    }
    std::vector<Tensor> chans;
    for (const auto& t : inputs) {
        if (t.rank() == 3) {
            chans.push_back(t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)}));
        } else if (t.rank() == 4 && t.dim(0) == 1) {
            chans.push_back(t);
        } else {
            throw Error(ErrorCode::ShapeMismatch, "modality input must be [D,H,W] or [1,D,H,W], got " +
                                                      shape_string(t.shape()));
        }
        if (chans.back().shape() != chans.front().shape()) {
            throw Error(ErrorCode::ShapeMismatch, "modality inputs differ in shape: " +
                                                      shape_string(chans.front().shape()) + " vs " +
                                                      shape_string(chans.back().shape()));
        }
    }
    const std::size_t factor = std::size_t{1} << (cfg_.num_levels - 1);
    static const char* axis_names[] = {"depth", "height", "width"};
    for (std::size_t a = 0; a < 3; ++a) {
        if (chans[0].dim(a + 1) % factor != 0) {
            throw Error(ErrorCode::ShapeMismatch, std::string(axis_names[a]) + " extent " +
                                                      std::to_string(chans[0].dim(a + 1)) + " is not divisible by " +
                                                      std::to_string(factor));
        }
    }
    if (cfg_.variant == ModelVariant::Vanilla) return {concat_channels(chans)};
    return chans;
}

Encoding Model::encode(std::span<const Tensor> inputs)
{
    std::vector<Tensor> xs = prepare_inputs(inputs);
    const std::size_t L = cfg_.num_levels;
    const std::size_t E = encoders_.size();
    std::vector<std::vector<Tensor>> feats(L, std::vector<Tensor>(E));
    for (std::size_t e = 0; e < E; ++e) {
        Tensor x = std::move(xs[e]);
        for (std::size_t l = 0; l < L; ++l) {
            x = block_forward(encoders_[e][2 * l], x);
            x = block_forward(encoders_[e][2 * l + 1], x);
            feats[l][e] = x;
        }
    }
    Encoding enc;
    for (std::size_t l = 0; l < L; ++l) enc.levels.push_back(fusion_forward(fusion_[l], std::move(feats[l])));
    encoded_ = true;
    decoded_ = false;
    return enc;
}

void Model::backward_encode(std::span<const Tensor> grads)
{
    if (!encoded_) throw Error(ErrorCode::NoCachedForward, "backward_encode called without a cached encode");
    const std::size_t L = cfg_.num_levels;
    if (grads.size() != L) {
        throw Error(ErrorCode::ShapeMismatch, "expected " + std::to_string(L) + " level gradients, got " +
                                                  std::to_string(grads.size()));
    }
    const std::size_t E = encoders_.size();
    std::vector<std::vector<Tensor>> g_feat(L);
    for (std::size_t l = 0; l < L; ++l) {
        if (grads[l].empty()) continue;
        g_feat[l] = fusion_backward(fusion_[l], grads[l]);
    }
    for (std::size_t e = 0; e < E; ++e) {
        Tensor g;
        for (std::size_t l = L; l-- > 0;) {
            if (!g_feat[l].empty()) {
                if (g.empty()) {
                    g = g_feat[l][e];
                } else {
                    axpy(g, g_feat[l][e]);
                }
            }
            if (g.empty()) continue;  // nothing flows into the deeper levels yet
            g = block_backward(encoders_[e][2 * l + 1], g);
            g = block_backward(encoders_[e][2 * l], g);
        }
    }
}

Tensor Model::forward(std::span<const Tensor> inputs)
{
    Encoding enc = encode(inputs);
    const std::size_t L = cfg_.num_levels;
    Tensor x = std::move(enc.levels[L - 1]);
    for (std::size_t l = L - 1; l-- > 0;) {
        DecoderLevel& d = decoder_[l];
        d.up_input = x;
        const Tensor up = conv_transpose3d_forward(x, params_[d.up_w].value, params_[d.up_b].value);
        const Tensor parts[2] = {up, enc.levels[l]};
        x = block_forward(d.blocks[0], concat_channels(parts));
        x = block_forward(d.blocks[1], x);
    }
    head_input = x;
    Tensor logits = conv3d_forward(x, params_[head_w].value, params_[head_b].value, 1, 0);
    decoded_ = true;
    return logits;
}

void Model::backward(const Tensor& grad_logits)
{
    if (!decoded_) throw Error(ErrorCode::NoCachedForward, "backward called without a cached forward");
    ConvGrads hg = conv3d_backward(head_input, params_[head_w].value, grad_logits, 1, 0);
    axpy(params_[head_w].grad, hg.grad_weight);
    axpy(params_[head_b].grad, hg.grad_bias);
    const std::size_t L = cfg_.num_levels;
    std::vector<Tensor> level_grads(L);
    Tensor g = std::move(hg.grad_input);
    for (std::size_t l = 0; l + 1 < L; ++l) {
        DecoderLevel& d = decoder_[l];
        g = block_backward(d.blocks[1], g);
        g = block_backward(d.blocks[0], g);
        const std::size_t counts[2] = {d.skip_channels, d.skip_channels};
        std::vector<Tensor> parts = split_channels(g, counts);
        level_grads[l] = std::move(parts[1]);
        ConvGrads ug = conv_transpose3d_backward(d.up_input, params_[d.up_w].value, parts[0]);
        axpy(params_[d.up_w].grad, ug.grad_weight);
        axpy(params_[d.up_b].grad, ug.grad_bias);
        g = std::move(ug.grad_input);
    }
    level_grads[L - 1] = std::move(g);
    backward_encode(level_grads);
}

}  // namespace modfuse
