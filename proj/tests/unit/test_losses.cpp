#include <doctest.h>

#include <cmath>

#include "modfuse/error.hpp"
#include "modfuse/layers.hpp"
#include "modfuse/losses.hpp"
#include "oracles.hpp"

using namespace modfuse;
using oracle::random_tensor;

namespace {

// Random one-hot target [J, n, 1, 1].
Tensor random_target(std::size_t J, std::size_t n, SeededRng& rng)
{
    Tensor t({J, n, 1, 1}, 0.0);
    for (std::size_t i = 0; i < n; ++i) t[rng.uniform_index(J) * n + i] = 1.0;
    return t;
}

// Two-channel crisp tensor whose foreground channel is `fg`.
Tensor crisp(const std::vector<int>& fg)
{
    const std::size_t n = fg.size();
    Tensor t({2, n, 1, 1});
    for (std::size_t i = 0; i < n; ++i) {
        t[n + i] = fg[i];
        t[i] = 1 - fg[i];
    }
    return t;
}

}  // namespace

TEST_CASE("dice loss values")
{
    SeededRng rng(0);
    const Tensor g = random_target(3, 40, rng);
    CHECK(dice_loss(g, g).value < 1e-4);

    const Tensor p = crisp({1, 1, 0, 0}), q = crisp({0, 0, 1, 1});
    CHECK(std::abs(dice_loss(p, q).value - 1.0) < 1e-4);

    // |P| = 4, |G| = 6, overlap 3 on the single foreground channel.
    const Tensor P = crisp({1, 1, 1, 1, 0, 0, 0, 0, 0, 0});
    const Tensor G = crisp({0, 1, 1, 1, 1, 1, 1, 0, 0, 0});
    CHECK(std::abs(dice_loss(P, G).value - 0.4) < 1e-5);
    CHECK_THROWS_AS(dice_loss(P, Tensor({2, 9, 1, 1})), Error);
}

TEST_CASE("cross entropy values")
{
    SeededRng rng(1);
    const Tensor t = random_target(4, 10, rng);
    CHECK(std::abs(ce_loss(Tensor({4, 10, 1, 1}, 0.7), t).value - std::log(4.0)) < 1e-10);
    Tensor logits({4, 10, 1, 1}, 0.0);
    for (std::size_t i = 0; i < t.size(); ++i) logits[i] = t[i] * 100.0;
    CHECK(ce_loss(logits, t).value < 1e-10);
}

TEST_CASE("combined loss degenerates to its components")
{
    SeededRng rng(2);
    const Tensor t = random_target(3, 30, rng);
    const Tensor logits = random_tensor(t.shape(), rng, -2, 2);
    const auto ce = ce_loss(logits, t);
    const auto only_ce = combined_loss(logits, t, {0.0, 1.0});
    CHECK(only_ce.value == ce.value);
    CHECK(only_ce.grad == ce.grad);

    const auto dice = dice_loss(softmax_channels_forward(logits), t);
    const auto only_dice = combined_loss(logits, t, {1.0, 0.0});
    CHECK(only_dice.value == dice.value);

    Tensor perfect = t;
    for (auto& v : perfect.data()) v *= 100.0;
    CHECK(combined_loss(perfect, t, {}).value < 1e-4);
    CHECK_THROWS_AS(LossWeights({0.0, 0.0}).validate(), Error);
    CHECK_THROWS_AS(LossWeights({-1.0, 1.0}).validate(), Error);
}

TEST_CASE("soft dice values")
{
    SeededRng rng(3);
    const Tensor g = random_target(3, 20, rng);
    CHECK(soft_dice_loss(g, g).value < 1e-4);
    // J = 1, G all ones, Y = 0.5: 1 - 2 (0.5 I) / (I + 0.25 I) = 0.2.
    CHECK(std::abs(soft_dice_loss(Tensor({1, 50, 1, 1}, 0.5), Tensor({1, 50, 1, 1}, 1.0)).value - 0.2) < 1e-4);
}

TEST_CASE("inpainting and rotation losses")
{
    SeededRng rng(4);
    const Tensor o = random_tensor({2, 4, 4, 4}, rng);
    Tensor mask({2, 4, 4, 4}, 0.0);
    for (std::size_t i = 0; i < mask.size(); i += 3) mask[i] = 1.0;
    CHECK(inpainting_loss(o, o, mask).value == 0.0);
    Tensor r = o;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] += mask[i];
    CHECK(std::abs(inpainting_loss(r, o, mask).value - 1.0) < 1e-12);
    CHECK_THROWS_AS(inpainting_loss(o, o, Tensor({2, 4, 4, 4}, 0.0)), Error);

    CHECK(std::abs(rotation_loss(Tensor({4, 1, 1, 1}, 0.0), 2).value - std::log(4.0)) < 1e-12);
    Tensor good({4, 1, 1, 1}, 0.0);
    good[1] = 100.0;
    CHECK(rotation_loss(good, 1).value < 1e-10);
    CHECK_THROWS_AS(rotation_loss(good, 4), Error);
}

TEST_CASE("loss gradients match finite differences")
{
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SeededRng rng(seed);
        const Tensor t = random_target(3, 12, rng);
        Tensor logits = random_tensor(t.shape(), rng, -2, 2);
        Tensor probs = softmax_channels_forward(random_tensor(t.shape(), rng, -2, 2));

        CHECK(oracle::fd_check(probs, dice_loss(probs, t).grad, [&] { return dice_loss(probs, t).value; }) < 1e-4);
        CHECK(oracle::fd_check(logits, ce_loss(logits, t).grad, [&] { return ce_loss(logits, t).value; }) < 1e-5);
        const LossWeights w{0.7, 1.3};
        CHECK(oracle::fd_check(logits, combined_loss(logits, t, w).grad,
                               [&] { return combined_loss(logits, t, w).value; }) < 1e-4);
        CHECK(oracle::fd_check(probs, soft_dice_loss(probs, t).grad, [&] { return soft_dice_loss(probs, t).value; }) <
              1e-4);
        CHECK(oracle::fd_check(logits, soft_dice_logits_loss(logits, t).grad,
                               [&] { return soft_dice_logits_loss(logits, t).value; }) < 1e-4);

        const Tensor orig = random_tensor({2, 3, 3, 3}, rng);
        Tensor recon = random_tensor({2, 3, 3, 3}, rng);
        Tensor mask({2, 3, 3, 3}, 0.0);
        for (auto& m : mask.data()) m = rng.bernoulli(0.4) ? 1.0 : 0.0;
        mask[0] = 1.0;
        const auto ip = inpainting_loss(recon, orig, mask);
        CHECK(oracle::fd_check(recon, ip.grad, [&] { return inpainting_loss(recon, orig, mask).value; }) < 1e-4);

        Tensor rl = random_tensor({4, 1, 1, 1}, rng, -3, 3);
        const std::size_t k = rng.uniform_index(4);
        CHECK(oracle::fd_check(rl, rotation_loss(rl, k).grad, [&] { return rotation_loss(rl, k).value; }) < 1e-5);
    }
}

TEST_CASE("contrastive loss matches the naive double loop")
{
    // B = 2, z_a1 == z_b1 orthogonal to z_a2 == z_b2, tau = 1.
    const Tensor e1({2, 1, 1, 1}, std::vector<double>{1, 0});
    const Tensor e2({2, 1, 1, 1}, std::vector<double>{0, 1});
    const std::vector<Tensor> a = {e1, e2}, b = {e1, e2};
    const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0 + 1.0));
    CHECK(std::abs(contrastive_loss(a, b, 1.0).value - expect) < 1e-12);
    CHECK(std::abs(oracle::contrastive(a, b, 1.0) - expect) < 1e-12);

    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SeededRng rng(seed);
        const std::size_t B = 2 + seed;
        std::vector<Tensor> za, zb;
        for (std::size_t i = 0; i < B; ++i) {
            za.push_back(random_tensor({8, 1, 1, 1}, rng));
            zb.push_back(random_tensor({8, 1, 1, 1}, rng));
        }
        const double tau = 0.1 + 0.3 * double(seed);
        const auto r = contrastive_loss(za, zb, tau);
        CHECK(std::abs(r.value - oracle::contrastive(za, zb, tau)) < 1e-10);
        CHECK(r.value >= 0.0);

        // Internal normalisation: scaling every embedding leaves the loss unchanged.
        auto sa = za, sb = zb;
        for (auto& t : sa)
            for (auto& v : t.data()) v *= 5.0;
        for (auto& t : sb)
            for (auto& v : t.data()) v *= 5.0;
        CHECK(std::abs(contrastive_loss(sa, sb, tau).value - r.value) < 1e-12);

        for (std::size_t i = 0; i < B; ++i) {
            CHECK(oracle::fd_check(za[i], r.grad_a[i], [&] { return contrastive_loss(za, zb, tau).value; }) < 1e-4);
            CHECK(oracle::fd_check(zb[i], r.grad_b[i], [&] { return contrastive_loss(za, zb, tau).value; }) < 1e-4);
        }
    }
}

TEST_CASE("contrastive loss errors")
{
    const Tensor e({2, 1, 1, 1}, std::vector<double>{1, 0});
    const std::vector<Tensor> one = {e};
    CHECK_THROWS_AS(contrastive_loss(one, one, 0.1), Error);
    const std::vector<Tensor> a = {e, Tensor({2, 1, 1, 1}, 0.0)}, b = {e, e};
    CHECK_THROWS_AS(contrastive_loss(a, b, 0.1), Error);
    const std::vector<Tensor> c = {e, e};
    CHECK_THROWS_AS(contrastive_loss(c, c, 0.0), Error);
}
