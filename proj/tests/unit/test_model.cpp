#include <doctest.h>

#include <cmath>
#include <cstring>

#include "modfuse/checkpoint.hpp"
#include "modfuse/error.hpp"
#include "modfuse/losses.hpp"
#include "modfuse/model.hpp"
#include "oracles.hpp"

using namespace modfuse;
using oracle::random_tensor;

namespace {

ModelConfig tiny(std::size_t M = 2, std::size_t L = 2, std::size_t base = 2)
{
    ModelConfig c;
    c.num_modalities = M;
    c.num_levels = L;
    c.base_channels = base;
    return c;
}

std::vector<Tensor> random_inputs(std::size_t M, Extent3 e, SeededRng& rng, double lo = -1, double hi = 1)
{
    std::vector<Tensor> v;
    for (std::size_t m = 0; m < M; ++m) v.push_back(random_tensor({e[0], e[1], e[2]}, rng, lo, hi));
    return v;
}

void copy_encoder(Model& m, std::size_t from, std::size_t to)
{
    const auto src = encoder_prefix(from), dst = encoder_prefix(to);
    for (auto& p : m.params())
        if (p.id.rfind(dst, 0) == 0) p.value = m.param(src + p.id.substr(dst.size())).value;
}

}  // namespace

TEST_CASE("parameter counts match the closed form")
{
    std::vector<ModelConfig> cfgs = {tiny(2, 3, 8), tiny(4, 4, 4), tiny(3, 2, 5)};
    cfgs[1].fusion = FusionMode::Mean;
    cfgs[2].skip_fusion = FusionMode::ConcatProject;
    ModelConfig v = tiny(4, 3, 8);
    v.variant = ModelVariant::Vanilla;
    cfgs.push_back(v);
    for (const auto& c : cfgs) {
        SeededRng rng(0);
        CHECK(Model(c, rng).num_parameters() == oracle::param_count(c));
    }

    for (std::size_t L : {2, 3}) {
        ModelConfig a = tiny(1, L, 4), b = tiny(1, L, 4);
        b.variant = ModelVariant::Vanilla;
        SeededRng r1(0), r2(0);
        CHECK(Model(a, r1).num_parameters() == Model(b, r2).num_parameters());
    }

    // Channel widths are capped at 320.
    ModelConfig wide = tiny(1, 4, 100);
    CHECK(wide.channels(3) == 320);
    CHECK(wide.channels(1) == 200);
}

TEST_CASE("model config validation and map round trip")
{
    CHECK_THROWS_AS(tiny(0).validate(), Error);
    CHECK_THROWS_AS(tiny(2, 1).validate(), Error);
    ModelConfig c = tiny(3, 3, 6);
    c.num_labels = 4;
    c.fusion = FusionMode::Mean;
    c.skip_fusion = FusionMode::ConcatProject;
    c.variant = ModelVariant::Vanilla;
    CHECK(ModelConfig::from_map(c.to_map()) == c);
    CHECK_THROWS_AS(parse_fusion_mode("sum"), Error);
}

TEST_CASE("forward shapes, determinism and finiteness")
{
    SeededRng a(7), b(7);
    ModelConfig cfg = tiny(2, 3, 4);
    Model m1(cfg, a), m2(cfg, b);
    for (std::size_t i = 0; i < m1.params().size(); ++i) CHECK(m1.params()[i].value == m2.params()[i].value);

    const std::vector<Tensor> zeros = {Tensor({16, 16, 16}), Tensor({16, 16, 16})};
    CHECK(m1.forward(zeros).shape() == Shape{3, 16, 16, 16});

    SeededRng rng(1);
    const auto in = random_inputs(2, {8, 12, 4}, rng, -5, 5);
    const Tensor out = m1.forward(in);
    CHECK(out.shape() == Shape{3, 8, 12, 4});
    for (double v : out.data()) CHECK(std::isfinite(v));
    // Same case again: identical logits (no state leaks between samples).
    CHECK(m1.forward(in) == out);

    const std::vector<Tensor> one = {in[0]};
    try {
        m1.forward(one);
        FAIL("accepted one modality");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ModalityCountMismatch);
    }
    const std::vector<Tensor> odd = {Tensor({6, 8, 8}), Tensor({6, 8, 8})};
    CHECK_THROWS_AS(m1.forward(odd), Error);  // 6 not divisible by 4
}

TEST_CASE("fuse_bottleneck")
{
    SeededRng rng(2);
    const Tensor f = random_tensor({3, 2, 2, 2}, rng);
    const std::vector<Tensor> same = {f, f, f};
    const Tensor idem = fuse_bottleneck(same, FusionMode::Mean);
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(std::abs(idem[i] - f[i]) <= 1e-15 * std::abs(f[i]));

    Tensor neg = f;
    for (auto& v : neg.data()) v = -v;
    const std::vector<Tensor> pm = {f, neg};
    const Tensor cancel = fuse_bottleneck(pm, FusionMode::Mean);
    for (double v : cancel.data()) CHECK(v == 0.0);

    // (1/M) identity blocks with zero bias reduce concat_project to the mean.
    const std::size_t M = 3, C = 3;
    const std::vector<Tensor> fs = {f, random_tensor(f.shape(), rng), random_tensor(f.shape(), rng)};
    Tensor w({C, M * C, 1, 1, 1}, 0.0), bias({C}, 0.0);
    for (std::size_t o = 0; o < C; ++o)
        for (std::size_t m = 0; m < M; ++m) w[o * M * C + m * C + o] = 1.0 / double(M);
    const Tensor proj = fuse_bottleneck(fs, FusionMode::ConcatProject, &w, &bias);
    const Tensor mean = fuse_bottleneck(fs, FusionMode::Mean);
    for (std::size_t i = 0; i < mean.size(); ++i) CHECK(std::abs(proj[i] - mean[i]) < 1e-14);

    const std::vector<Tensor> bad = {f, Tensor({3, 2, 2, 1})};
    CHECK_THROWS_AS(fuse_bottleneck(bad, FusionMode::Mean), Error);
}

TEST_CASE("copied encoders with mean fusion are symmetric in their inputs")
{
    ModelConfig cfg = tiny(3, 3, 2);
    cfg.fusion = FusionMode::Mean;
    cfg.skip_fusion = FusionMode::Mean;
    SeededRng rng(3);
    Model m(cfg, rng);
    copy_encoder(m, 0, 1);
    copy_encoder(m, 0, 2);
    const auto in = random_inputs(3, {8, 8, 8}, rng);
    const Tensor base = m.forward(in);
    const std::vector<Tensor> perm = {in[2], in[0], in[1]};
    const Tensor swapped = m.forward(perm);
    for (std::size_t i = 0; i < base.size(); ++i) CHECK(std::abs(base[i] - swapped[i]) < 1e-12);
}

TEST_CASE("backward: zero seeds, accumulation and missing cache")
{
    SeededRng rng(4);
    Model m(tiny(), rng);
    try {
        m.backward(Tensor({3, 8, 8, 8}));
        FAIL("backward without forward");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::NoCachedForward);
    }
    const auto in = random_inputs(2, {8, 8, 8}, rng);
    const Tensor out = m.forward(in);
    m.zero_grad();
    m.backward(Tensor(out.shape(), 0.0));
    for (const auto& p : m.params())
        for (double g : p.grad.data()) CHECK(g == 0.0);

    const Tensor seed = random_tensor(out.shape(), rng);
    m.zero_grad();
    m.backward(seed);
    std::vector<Tensor> once;
    for (const auto& p : m.params()) once.push_back(p.grad);
    m.backward(seed);
    for (std::size_t i = 0; i < once.size(); ++i)
        for (std::size_t k = 0; k < once[i].size(); ++k)
            CHECK(std::abs(m.params()[i].grad[k] - 2 * once[i][k]) <= 1e-12 * (1 + std::abs(once[i][k])));
}

TEST_CASE("whole-model gradient matches finite differences")
{
    // The training loss on a random one-hot target. Conv biases ahead of an
    // instance norm have a true gradient of exactly zero, so the check depends
    // on the FD round-off (|L| eps / h) staying below the 1e-6 error floor.
    for (std::uint64_t seed = 0; seed < 2; ++seed) {
        SeededRng rng(seed);
        ModelConfig cfg = tiny();
        cfg.skip_fusion = seed == 0 ? FusionMode::Mean : FusionMode::ConcatProject;
        Model m(cfg, rng);
        const auto in = random_inputs(2, {8, 8, 8}, rng);
        LabelGrid labels({8, 8, 8});
        for (auto& l : labels.labels) l = std::int32_t(rng.uniform_index(3));
        const Tensor target = one_hot(labels, 3);
        const LossWeights w;
        m.zero_grad();
        m.backward(combined_loss(m.forward(in), target, w).grad);
        auto loss = [&] { return combined_loss(m.forward(in), target, w).value; };
        double worst = 0;
        for (int k = 0; k < 50; ++k) {
            auto& p = m.params()[rng.uniform_index(m.params().size())];
            const std::size_t i = rng.uniform_index(p.value.size());
            const double keep = p.value[i];
            p.value[i] = keep + 1e-5;
            const double up = loss();
            p.value[i] = keep - 1e-5;
            const double down = loss();
            p.value[i] = keep;
            const double err = oracle::rel_error(p.grad[i], (up - down) / 2e-5);
            worst = std::max(worst, err);
        }
        CHECK(worst < 1e-3);
    }
}

TEST_CASE("checkpoint round trip is byte-identical")
{
    SeededRng rng(5);
    const ModelConfig cfg = tiny(2, 3, 3);
    Model m(cfg, rng);
    Checkpoint ck;
    store_model(ck, m);
    ck.meta["run.epoch"] = "7";
    ck.put(Blob::text("run.note", "hello"));
    const auto bytes = serialize_checkpoint(ck);
    const Checkpoint back = parse_checkpoint(bytes);
    CHECK(back == ck);
    const Model loaded = load_model(back, LoadMode::Full, &cfg);
    Checkpoint again;
    store_model(again, loaded);
    again.meta["run.epoch"] = "7";
    again.put(Blob::text("run.note", "hello"));
    CHECK(serialize_checkpoint(again) == bytes);

    const auto path = std::filesystem::temp_directory_path() / "modfuse_unit_ck.mfck";
    write_checkpoint(path, ck);
    CHECK(read_checkpoint(path) == ck);
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint errors")
{
    SeededRng rng(6);
    const ModelConfig cfg = tiny();
    Model m(cfg, rng);
    Checkpoint ck;
    store_model(ck, m);
    auto bytes = serialize_checkpoint(ck);

    ModelConfig other = cfg;
    other.num_labels = 4;
    try {
        load_model(ck, LoadMode::Full, &other);
        FAIL("accepted mismatched config");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ConfigMismatch);
    }

    auto wrong_version = bytes;
    const std::uint32_t v = 99;
    std::memcpy(wrong_version.data() + 4, &v, 4);
    try {
        parse_checkpoint(wrong_version);
        FAIL("accepted version 99");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::VersionMismatch);
    }

    Checkpoint missing = ck;
    std::erase_if(missing.blobs, [](const Blob& b) { return b.name == "param.head.bias"; });
    try {
        load_model(missing, LoadMode::Full);
        FAIL("accepted missing param");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::MissingParam);
        CHECK(std::string(e.what()).find("head.bias") != std::string::npos);
    }

    CHECK_THROWS_AS(parse_checkpoint(std::span(bytes).first(bytes.size() - 3)), Error);
    bytes[0] = 'X';
    CHECK_THROWS_AS(parse_checkpoint(bytes), Error);
}

TEST_CASE("encoder-only loading")
{
    SeededRng src_rng(8);
    ModelConfig src_cfg = tiny(2, 2, 2);
    Model src(src_cfg, src_rng);
    Checkpoint ck;
    store_model(ck, src);

    ModelConfig dst_cfg = src_cfg;
    dst_cfg.num_labels = 5;  // head differs, encoders compatible
    SeededRng rng(9);
    const Model dst = load_model(ck, LoadMode::EncodersOnly, &dst_cfg, &rng);
    for (const auto& p : dst.params()) {
        if (is_encoder_param(p.id)) CHECK(p.value == src.param(p.id).value);
        else if (const Param* s = src.find_param(p.id);
                 s && s->value.shape() == p.value.shape() && p.id.ends_with(".weight"))
            CHECK(p.value != s->value);
    }

    // Replicate copies encoder 0 into every target encoder.
    ModelConfig three = src_cfg;
    three.num_modalities = 3;
    SeededRng rng2(10);
    const Model rep = load_model(ck, LoadMode::EncodersOnly, &three, &rng2, TransferMode::Replicate);
    const std::string id = "level1.block1.conv.weight";
    for (std::size_t e = 0; e < 3; ++e) CHECK(rep.param(encoder_prefix(e) + id).value == src.param(encoder_prefix(0) + id).value);

    // Per-modality transfer needs a source encoder for every target encoder.
    SeededRng rng3(11);
    CHECK_THROWS_AS(load_model(ck, LoadMode::EncodersOnly, &three, &rng3, TransferMode::PerModality), Error);

    ModelConfig wider = src_cfg;
    wider.base_channels = 3;
    SeededRng rng4(12);
    try {
        load_model(ck, LoadMode::EncodersOnly, &wider, &rng4);
        FAIL("accepted a different encoder topology");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ConfigMismatch);
    }
}
