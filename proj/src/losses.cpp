#include "modfuse/losses.hpp"

#include <algorithm>
#include <cmath>

#include "modfuse/error.hpp"
#include "modfuse/layers.hpp"

namespace modfuse {

void LossWeights::validate() const
{
    if (!(lambda_dice >= 0.0) || !(lambda_ce >= 0.0) || !(lambda_dice + lambda_ce > 0.0)) {
        throw Error(ErrorCode::ConfigInvalid, "loss weights must be >= 0 with a positive sum");
    }
}

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what)
{
    if (a.shape() != b.shape() || a.rank() < 1) {
        throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": " + shape_string(a.shape()) + " vs " +
                                                  shape_string(b.shape()));
    }
}

}  // namespace

LossResult dice_loss(const Tensor& probs, const Tensor& target, bool include_background)
{
    require_same(probs, target, "dice_loss");
    const std::size_t J = probs.dim(0);
    const std::size_t n = probs.inner_size();
    const std::size_t first = (J > 1 && !include_background) ? 1 : 0;
    const double scale = 1.0 / static_cast<double>(J - first);
    LossResult r{1.0, Tensor(probs.shape(), 0.0)};
    for (std::size_t j = first; j < J; ++j) {
        const double* p = probs.ptr() + j * n;
        const double* g = target.ptr() + j * n;
        double inter = 0.0, sp = 0.0, sg = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            inter += p[i] * g[i];
            sp += p[i];
            sg += g[i];
        }
        const double num = 2.0 * inter + dice_eps;
        const double den = sp + sg + dice_eps;
        r.value -= scale * num / den;
        double* d = r.grad.ptr() + j * n;
        const double inv_den2 = 1.0 / (den * den);
        for (std::size_t i = 0; i < n; ++i) d[i] = -scale * (2.0 * g[i] * den - num) * inv_den2;
    }
    return r;
}

LossResult ce_loss(const Tensor& logits, const Tensor& target)
{
    require_same(logits, target, "ce_loss");
    const std::size_t J = logits.dim(0);
    const std::size_t n = logits.inner_size();
    const Tensor probs = softmax_channels_forward(logits);
    LossResult r{0.0, Tensor(logits.shape(), 0.0)};
    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double mx = logits[i];
        for (std::size_t j = 1; j < J; ++j) mx = std::max(mx, logits[j * n + i]);
        double s = 0.0;
        for (std::size_t j = 0; j < J; ++j) s += std::exp(logits[j * n + i] - mx);
        const double lse = mx + std::log(s);
        double tsum = 0.0;
        for (std::size_t j = 0; j < J; ++j) {
            const double t = target[j * n + i];
            if (t != 0.0) total += t * (lse - logits[j * n + i]);
            tsum += t;
        }
        for (std::size_t j = 0; j < J; ++j) {
            r.grad[j * n + i] = (tsum * probs[j * n + i] - target[j * n + i]) * inv_n;
        }
    }
    r.value = total * inv_n;
    return r;
}

LossResult combined_loss(const Tensor& logits, const Tensor& target, const LossWeights& w)
{
    w.validate();
    require_same(logits, target, "combined_loss");
    LossResult r{0.0, Tensor(logits.shape(), 0.0)};
    if (w.lambda_dice != 0.0) {
        const Tensor probs = softmax_channels_forward(logits);
        const LossResult d = dice_loss(probs, target);
        r.value += w.lambda_dice * d.value;
        axpy(r.grad, softmax_channels_backward(probs, d.grad), w.lambda_dice);
    }
    if (w.lambda_ce != 0.0) {
        const LossResult c = ce_loss(logits, target);
        r.value += w.lambda_ce * c.value;
        axpy(r.grad, c.grad, w.lambda_ce);
    }
    return r;
}

LossResult soft_dice_loss(const Tensor& probs, const Tensor& target)
{
    require_same(probs, target, "soft_dice_loss");
    const std::size_t J = probs.dim(0);
    const std::size_t n = probs.inner_size();
    const double scale = 2.0 / static_cast<double>(J);
    LossResult r{1.0, Tensor(probs.shape(), 0.0)};
    for (std::size_t j = 0; j < J; ++j) {
        const double* y = probs.ptr() + j * n;
        const double* g = target.ptr() + j * n;
        double num = 0.0, gg = 0.0, yy = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            num += g[i] * y[i];
            gg += g[i] * g[i];
            yy += y[i] * y[i];
        }
        const double den = gg + yy + dice_eps;
        r.value -= scale * num / den;
        double* d = r.grad.ptr() + j * n;
        const double inv_den2 = 1.0 / (den * den);
        for (std::size_t i = 0; i < n; ++i) d[i] = -scale * (g[i] * den - 2.0 * num * y[i]) * inv_den2;
    }
    return r;
}

LossResult soft_dice_logits_loss(const Tensor& logits, const Tensor& target)
{
    const Tensor probs = softmax_channels_forward(logits);
    LossResult r = soft_dice_loss(probs, target);
    r.grad = softmax_channels_backward(probs, r.grad);
    return r;
}

LossResult inpainting_loss(const Tensor& recon, const Tensor& original, const Tensor& mask)
{
    require_same(recon, original, "inpainting_loss");
    require_same(recon, mask, "inpainting_loss mask");
    std::size_t count = 0;
    for (double m : mask.data()) count += m != 0.0;
    if (count == 0) throw Error(ErrorCode::EmptyMask, "inpainting mask selects no voxels");
    const double inv = 1.0 / static_cast<double>(count);
    LossResult r{0.0, Tensor(recon.shape(), 0.0)};
    double total = 0.0;
    for (std::size_t i = 0; i < recon.size(); ++i) {
        if (mask[i] == 0.0) continue;
        const double d = recon[i] - original[i];
        total += d * d;
        r.grad[i] = 2.0 * d * inv;
    }
    r.value = total * inv;
    return r;
}

LossResult rotation_loss(const Tensor& logits, std::size_t true_rotation)
{
    const std::size_t K = logits.size();
    if (true_rotation >= K) {
        throw Error(ErrorCode::IndexOutOfRange, "rotation index " + std::to_string(true_rotation) + " with " +
                                                    std::to_string(K) + " categories");
    }
    const double mx = *std::max_element(logits.data().begin(), logits.data().end());
    double s = 0.0;
    for (double v : logits.data()) s += std::exp(v - mx);
    LossResult r{mx + std::log(s) - logits[true_rotation], Tensor(logits.shape(), 0.0)};
    for (std::size_t k = 0; k < K; ++k) r.grad[k] = std::exp(logits[k] - mx) / s - (k == true_rotation ? 1.0 : 0.0);
    return r;
}

ContrastiveResult contrastive_loss(std::span<const Tensor> z_a, std::span<const Tensor> z_b, double temperature)
{
    const std::size_t B = z_a.size();
    if (B < 2 || z_b.size() != B) {
        throw Error(ErrorCode::DegenerateBatch, "contrastive loss needs B >= 2 paired views, got " +
                                                    std::to_string(z_a.size()) + " and " + std::to_string(z_b.size()));
    }
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw Error(ErrorCode::InvalidArgument, "temperature must be positive and finite");
    }
    const std::size_t N = 2 * B;
    const std::size_t E = z_a[0].size();
    std::vector<const Tensor*> z(N);
    for (std::size_t i = 0; i < B; ++i) {
        z[i] = &z_a[i];
        z[B + i] = &z_b[i];
    }
    std::vector<std::vector<double>> u(N, std::vector<double>(E));
    std::vector<double> norm(N);
    for (std::size_t k = 0; k < N; ++k) {
        if (z[k]->size() != E) throw Error(ErrorCode::ShapeMismatch, "embeddings differ in length");
        double s = 0.0;
        for (double v : z[k]->data()) s += v * v;
        norm[k] = std::sqrt(s);
        if (norm[k] == 0.0) throw Error(ErrorCode::ZeroVector, "embedding " + std::to_string(k) + " is zero");
        for (std::size_t e = 0; e < E; ++e) u[k][e] = (*z[k])[e] / norm[k];
    }
    std::vector<double> sim(N * N);
    for (std::size_t k = 0; k < N; ++k) {
        for (std::size_t l = 0; l < N; ++l) {
            double s = 0.0;
            for (std::size_t e = 0; e < E; ++e) s += u[k][e] * u[l][e];
            sim[k * N + l] = s / temperature;
        }
    }
    // dL/dsim, then dL/du.
    std::vector<std::vector<double>> du(N, std::vector<double>(E, 0.0));
    double total = 0.0;
    const double inv_n = 1.0 / static_cast<double>(N);
    std::vector<double> w(N);
    for (std::size_t k = 0; k < N; ++k) {
        const std::size_t pos = k < B ? k + B : k - B;
        double mx = -INFINITY;
        for (std::size_t l = 0; l < N; ++l) {
            if (l != k) mx = std::max(mx, sim[k * N + l]);
        }
        double s = 0.0;
        for (std::size_t l = 0; l < N; ++l) {
            w[l] = l == k ? 0.0 : std::exp(sim[k * N + l] - mx);
            s += w[l];
        }
        total += mx + std::log(s) - sim[k * N + pos];
        for (std::size_t l = 0; l < N; ++l) {
            if (l == k) continue;
            const double g = (w[l] / s - (l == pos ? 1.0 : 0.0)) * inv_n / temperature;
            for (std::size_t e = 0; e < E; ++e) {
                du[k][e] += g * u[l][e];
                du[l][e] += g * u[k][e];
            }
        }
    }
    ContrastiveResult r;
    r.value = total * inv_n;
    for (std::size_t k = 0; k < N; ++k) {
        double proj = 0.0;
        for (std::size_t e = 0; e < E; ++e) proj += u[k][e] * du[k][e];
        Tensor g(z[k]->shape(), 0.0);
        for (std::size_t e = 0; e < E; ++e) g[e] = (du[k][e] - u[k][e] * proj) / norm[k];
        (k < B ? r.grad_a : r.grad_b).push_back(std::move(g));
    }
    return r;
}

}  // namespace modfuse
