#include "modfuse/ssl.hpp"

#include <algorithm>
#include <numeric>

#include "modfuse/error.hpp"

namespace modfuse {

std::size_t SslHeads::add(const std::string& id, Tensor value)
{
    params_.emplace_back(id, std::move(value));
    return params_.size() - 1;
}

SslHeads::SslHeads(const ModelConfig& model, const SslSettings& ssl, SeededRng& rng) : levels_(model.num_levels)
{
    const std::size_t L = model.num_levels;
    up_w_.resize(L - 1);
    up_b_.resize(L - 1);
    for (std::size_t l = L - 1; l-- > 0;) {
        const std::string p = "ssl.recon.level" + std::to_string(l) + ".up.";
        up_w_[l] = add(p + "weight", he_init({model.channels(l + 1), model.channels(l), 2, 2, 2}, rng));
        up_b_[l] = add(p + "bias", Tensor({model.channels(l)}, 0.0));
    }
    out_w_ = add("ssl.recon.out.weight", he_init({model.num_modalities, model.channels(0), 1, 1, 1}, rng));
    out_b_ = add("ssl.recon.out.bias", Tensor({model.num_modalities}, 0.0));
    const std::size_t C = model.channels(L - 1);
    rot_w_ = add("ssl.rotation.weight", he_init({ssl.rotations, C, 1, 1, 1}, rng));
    rot_b_ = add("ssl.rotation.bias", Tensor({ssl.rotations}, 0.0));
    proj1_w_ = add("ssl.projection.0.weight", he_init({C, C, 1, 1, 1}, rng));
    proj1_b_ = add("ssl.projection.0.bias", Tensor({C}, 0.0));
    proj2_w_ = add("ssl.projection.1.weight", he_init({ssl.embedding_dim, C, 1, 1, 1}, rng));
    proj2_b_ = add("ssl.projection.1.bias", Tensor({ssl.embedding_dim}, 0.0));
}

SslHeads::Outputs SslHeads::forward(const Encoding& enc)
{
    const std::size_t L = levels_;
    if (enc.levels.size() != L) throw Error(ErrorCode::ShapeMismatch, "encoding has the wrong number of levels");
    level_shapes_.clear();
    for (const auto& t : enc.levels) level_shapes_.push_back(t.shape());
    up_input_.assign(L - 1, Tensor());
    up_pre_.assign(L - 1, Tensor());

    Outputs out;
    Tensor x = enc.levels[L - 1];
    for (std::size_t l = L - 1; l-- > 0;) {
        up_input_[l] = x;
        Tensor u = conv_transpose3d_forward(x, params_[up_w_[l]].value, params_[up_b_[l]].value);
        axpy(u, enc.levels[l]);
        x = leaky_relu_forward(u);
        up_pre_[l] = std::move(u);
    }
    out_input_ = x;
    out.recon = conv3d_forward(x, params_[out_w_].value, params_[out_b_].value, 1, 0);

    pooled_ = global_avg_pool_forward(enc.levels[L - 1]);
    out.rotation = conv3d_forward(pooled_, params_[rot_w_].value, params_[rot_b_].value, 1, 0);
    proj_pre_ = conv3d_forward(pooled_, params_[proj1_w_].value, params_[proj1_b_].value, 1, 0);
    proj_act_ = leaky_relu_forward(proj_pre_);
    out.embedding = conv3d_forward(proj_act_, params_[proj2_w_].value, params_[proj2_b_].value, 1, 0);
    cached_ = true;
    return out;
}

std::vector<Tensor> SslHeads::backward(const Tensor& g_recon, const Tensor& g_rotation, const Tensor& g_embedding)
{
    if (!cached_) throw Error(ErrorCode::NoCachedForward, "ssl heads backward without a cached forward");
    const std::size_t L = levels_;
    std::vector<Tensor> grads(L);
    for (std::size_t l = 0; l < L; ++l) grads[l] = Tensor(level_shapes_[l], 0.0);

    auto accumulate = [&](std::size_t w, std::size_t b, const ConvGrads& g) {
        axpy(params_[w].grad, g.grad_weight);
        axpy(params_[b].grad, g.grad_bias);
    };

    if (!g_recon.empty()) {
        ConvGrads og = conv3d_backward(out_input_, params_[out_w_].value, g_recon, 1, 0);
        accumulate(out_w_, out_b_, og);
        Tensor g = std::move(og.grad_input);
        for (std::size_t l = 0; l + 1 < L; ++l) {
            const Tensor gu = leaky_relu_backward(up_pre_[l], g);
            axpy(grads[l], gu);
            ConvGrads ug = conv_transpose3d_backward(up_input_[l], params_[up_w_[l]].value, gu);
            accumulate(up_w_[l], up_b_[l], ug);
            g = std::move(ug.grad_input);
        }
        axpy(grads[L - 1], g);
    }

    Tensor g_pool(pooled_.shape(), 0.0);
    if (!g_rotation.empty()) {
        ConvGrads rg = conv3d_backward(pooled_, params_[rot_w_].value, g_rotation, 1, 0);
        accumulate(rot_w_, rot_b_, rg);
        axpy(g_pool, rg.grad_input);
    }
    if (!g_embedding.empty()) {
        ConvGrads p2 = conv3d_backward(proj_act_, params_[proj2_w_].value, g_embedding, 1, 0);
        accumulate(proj2_w_, proj2_b_, p2);
        ConvGrads p1 = conv3d_backward(pooled_, params_[proj1_w_].value,
                                       leaky_relu_backward(proj_pre_, p2.grad_input), 1, 0);
        accumulate(proj1_w_, proj1_b_, p1);
        axpy(g_pool, p1.grad_input);
    }
    axpy(grads[L - 1], global_avg_pool_backward(level_shapes_[L - 1], g_pool));
    return grads;
}

LabelGrid inpainting_mask(const Extent3& extent, const Extent3& block, double ratio, SeededRng& rng)
{
    Extent3 cells{};
    for (std::size_t a = 0; a < 3; ++a) {
        if (block[a] < 1) throw Error(ErrorCode::InvalidArgument, "mask block extents must be >= 1");
        cells[a] = (extent[a] + block[a] - 1) / block[a];
    }
    std::vector<std::size_t> order(voxel_count(cells));
    std::iota(order.begin(), order.end(), std::size_t{0});
    LabelGrid mask(extent, 0);
    const double target = ratio * static_cast<double>(voxel_count(extent));
    std::size_t covered = 0;
    for (std::size_t i = 0; i < order.size() && static_cast<double>(covered) < target; ++i) {
        // Partial Fisher-Yates: cell i is drawn uniformly from the remainder.
        std::swap(order[i], order[i + rng.uniform_index(order.size() - i)]);
        const std::size_t c = order[i];
        const std::size_t cz = c / (cells[1] * cells[2]), cy = (c / cells[2]) % cells[1], cx = c % cells[2];
        for (std::size_t z = cz * block[0]; z < std::min(extent[0], (cz + 1) * block[0]); ++z) {
            for (std::size_t y = cy * block[1]; y < std::min(extent[1], (cy + 1) * block[1]); ++y) {
                for (std::size_t x = cx * block[2]; x < std::min(extent[2], (cx + 1) * block[2]); ++x) {
                    mask.at(z, y, x) = 1;
                    ++covered;
                }
            }
        }
    }
    return mask;
}

SslView make_view(const Tensor& patch, const Config& cfg, SeededRng& rng, int rotation, bool augment)
{
    if (patch.rank() != 4) throw Error(ErrorCode::ShapeMismatch, "ssl view expects [M,D,H,W]");
    Tensor t = patch;
    const std::size_t M = t.dim(0);
    const std::size_t n = t.inner_size();
    if (augment) {
        const AugmentConfig& a = cfg.augment;
        // Height and width flips would mimic half-turns, so only depth flips.
        if (rng.bernoulli(a.flip_prob[0])) t = flip_axis(t, 0);
        for (std::size_t m = 0; m < M; ++m) {
            double* p = t.ptr() + m * n;
            if (rng.bernoulli(a.scale_prob)) {
                const double f = rng.uniform(1.0 - a.scale_amount, 1.0 + a.scale_amount);
                for (std::size_t i = 0; i < n; ++i) p[i] *= f;
            }
            if (rng.bernoulli(a.noise_prob)) {
                for (std::size_t i = 0; i < n; ++i) p[i] += rng.normal(0.0, a.noise_sigma);
            }
        }
    }
    SslView v;
    v.rotation = rotation >= 0 ? static_cast<std::size_t>(rotation) : rng.uniform_index(cfg.ssl.rotations);
    v.target = rotate_quarter(t, static_cast<int>(v.rotation));
    const Extent3 e{v.target.dim(1), v.target.dim(2), v.target.dim(3)};
    const LabelGrid cells = inpainting_mask(e, cfg.ssl.mask_block, cfg.ssl.mask_ratio, rng);
    v.mask = Tensor(v.target.shape(), 0.0);
    v.input = v.target;
    for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t i = 0; i < n; ++i) {
            if (cells.labels[i]) {
                v.mask[m * n + i] = 1.0;
                v.input[m * n + i] = 0.0;
            }
        }
    }
    return v;
}

std::vector<Tensor> split_modalities(const Tensor& stacked)
{
    std::vector<std::size_t> ones(stacked.dim(0), 1);
    return split_channels(stacked, ones);
}

}  // namespace modfuse
