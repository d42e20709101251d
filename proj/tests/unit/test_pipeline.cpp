#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "modfuse/error.hpp"
#include "modfuse/layers.hpp"
#include "modfuse/pipeline.hpp"
#include "oracles.hpp"

using namespace modfuse;
namespace fs = std::filesystem;

namespace {

// Eight 16^3 phantom cases and a tiny model; three short epochs.
struct Fixture {
    fs::path root;
    Config cfg;

    explicit Fixture(const std::string& name)
    {
        root = fs::temp_directory_path() / ("modfuse_unit_" + name);
        fs::remove_all(root);
        cfg.seed = 5;
        cfg.phantom.extent = {16, 16, 16};
        cfg.phantom.radius_min = 2;
        cfg.phantom.radius_max = 4;
        cfg.model.base_channels = 2;
        cfg.model.num_levels = 2;
        cfg.patch.size = {8, 8, 8};
        cfg.train.epochs = 3;
        cfg.ssl.epochs = 2;
        cfg.ssl.mask_block = {2, 2, 2};
        cfg.ssl.embedding_dim = 4;
        cfg.output_dir = (root / "run").string();
        cmd_generate_data(cfg, 8, root / "data");
        cfg.data.train_manifest = (root / "data" / "manifest.csv").string();
        cfg.data.pretrain_manifest = cfg.data.train_manifest;
    }
    ~Fixture() { fs::remove_all(root); }
};

std::vector<std::uint8_t> slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::string slurp_text(const fs::path& p)
{
    const auto b = slurp(p);
    return {b.begin(), b.end()};
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b)
{
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

Volume random_volume(std::size_t M, Extent3 e, SeededRng& rng)
{
    Volume v;
    for (std::size_t m = 0; m < M; ++m) v.modalities.push_back(oracle::random_tensor({e[0], e[1], e[2]}, rng));
    return v;
}

}  // namespace

TEST_CASE("window starts match the independent formula")
{
    for (std::size_t E : {8, 16, 17, 24, 31, 32, 40})
        for (std::size_t P : {4, 8, 16})
            for (double ov : {0.0, 0.25, 0.5, 0.75})
                if (E >= P) CHECK(window_starts(E, P, ov) == oracle::starts(E, P, ov));
    CHECK(window_starts(24, 16, 0.5) == std::vector<std::size_t>{0, 8});
    CHECK(window_starts(16, 16, 0.5) == std::vector<std::size_t>{0});
}

TEST_CASE("sliding-window prediction matches the accumulation oracle")
{
    SeededRng rng(1);
    ModelConfig mc;
    mc.base_channels = 2;
    Model model(mc, rng);
    const Volume v = random_volume(2, {24, 24, 24}, rng);
    PatchSpec p;
    p.size = {16, 16, 16};
    const Tensor got = sliding_window_predict(model, v, p, 0.5);
    const Tensor want = oracle::sliding_average(model, v, p.size, 0.5);
    REQUIRE(got.shape() == want.shape());
    double worst = 0;
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
    CHECK(worst < 1e-10);
}

TEST_CASE("sliding window degenerate tilings")
{
    SeededRng rng(2);
    ModelConfig mc;
    mc.base_channels = 2;
    mc.num_levels = 2;
    Model model(mc, rng);
    PatchSpec p;
    p.size = {8, 8, 8};
    const Volume same = random_volume(2, {8, 8, 8}, rng);
    const Tensor one = sliding_window_predict(model, same, p, 0.5);
    const Tensor direct = softmax_channels_forward(model.forward(same.modalities));
    for (std::size_t i = 0; i < one.size(); ++i) CHECK(std::abs(one[i] - direct[i]) < 1e-14);

    const Volume small = random_volume(2, {5, 8, 11}, rng);
    const Tensor s = sliding_window_predict(model, small, p, 0.5);
    CHECK(s.shape() == Shape{3, 5, 8, 11});
    const auto regions = parse_regions("whole:1,2;core:2");
    const auto pred = predict_case(model, small, p, 0.5, regions);
    CHECK(pred.labels.shape == Extent3{5, 8, 11});
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        const bool any = pred.region_masks[0].labels[i] || pred.region_masks[1].labels[i];
        CHECK(pred.lesion_mask.labels[i] == (any ? 1 : 0));
    }
}

TEST_CASE("train: traces, checkpoints and internal consistency")
{
    Fixture fx("train");
    const TrainResult r = cmd_train(fx.cfg);
    CHECK(r.epochs_completed == 3);
    CHECK(r.epoch_loss.size() == 3);
    CHECK(r.val_dsc.size() == 3);
    CHECK(fs::exists(r.last_checkpoint));
    CHECK(fs::exists(r.best_checkpoint));
    CHECK(r.best_epoch >= 1);

    const std::set<std::string> train(r.train_ids.begin(), r.train_ids.end());
    for (const auto& v : r.val_ids) CHECK(train.count(v) == 0);
    CHECK(r.train_ids.size() + r.val_ids.size() == 8);

    // Epoch loss equals the mean of the persisted step losses.
    const Checkpoint ck = read_checkpoint(r.last_checkpoint);
    const std::vector<double> steps = ck.get("run.step_losses").f64;
    const std::size_t per = (r.train_ids.size() + 1) / 2;
    REQUIRE(steps.size() == 3 * per);
    for (std::size_t e = 0; e < 3; ++e) {
        double s = 0;
        for (std::size_t k = 0; k < per; ++k) s += steps[e * per + k];
        CHECK(s / double(per) == r.epoch_loss[e]);
    }
    CHECK(config_from_checkpoint(ck).to_map().at("train.epochs") == "3");
}

TEST_CASE("train: determinism and resume")
{
    Fixture fx("resume");
    const TrainResult full = cmd_train(fx.cfg);
    const auto full_bytes = slurp(full.last_checkpoint);

    Config again = fx.cfg;
    again.output_dir = (fx.root / "again").string();
    const TrainResult rerun = cmd_train(again);
    CHECK(bit_equal(rerun.epoch_loss, full.epoch_loss));
    CHECK(slurp(rerun.last_checkpoint) == full_bytes);

    Config split = fx.cfg;
    split.output_dir = (fx.root / "split").string();
    TrainOptions first;
    first.stop_after = 1;
    CHECK(cmd_train(split, first).epochs_completed == 1);
    TrainOptions rest;
    rest.resume = true;
    const TrainResult resumed = cmd_train(split, rest);
    CHECK(bit_equal(resumed.epoch_loss, full.epoch_loss));
    CHECK(bit_equal(resumed.step_losses, full.step_losses));
    CHECK(slurp(resumed.last_checkpoint) == full_bytes);

    Config changed = split;
    changed.train.batch_size = 1;
    TrainOptions bad;
    bad.resume = true;
    CHECK_THROWS_AS(cmd_train(changed, bad), Error);
}

TEST_CASE("pretrain smoke run and encoder transfer")
{
    Fixture fx("pretrain");
    Config pcfg = fx.cfg;
    pcfg.output_dir = (fx.root / "ssl").string();
    const PretrainResult p = cmd_pretrain(pcfg);
    CHECK(p.epochs_completed == 2);
    CHECK(p.loss.size() == 2);
    for (double v : p.loss) CHECK(std::isfinite(v));
    const Checkpoint ck = read_checkpoint(p.checkpoint);
    CHECK(ck.find("param.ssl.rotation.weight") != nullptr);

    Config again = pcfg;
    again.output_dir = (fx.root / "ssl2").string();
    CHECK(bit_equal(cmd_pretrain(again).loss, p.loss));

    // The supervised stage starts from the pretrained encoders.
    TrainOptions opts;
    opts.init = p.checkpoint;
    opts.stop_after = 1;
    std::size_t checked = 0;
    opts.on_epoch_begin = [&](std::size_t epoch, const Model& m) {
        if (epoch != 0) return;
        for (const auto& prm : m.params()) {
            if (!is_encoder_param(prm.id)) continue;
            CHECK(prm.value == ck.get("param." + prm.id).as_tensor());
            ++checked;
        }
    };
    cmd_train(fx.cfg, opts);
    CHECK(checked > 0);

    // A pretraining checkpoint with different encoder widths is rejected.
    Config wider = fx.cfg;
    wider.model.base_channels = 3;
    wider.output_dir = (fx.root / "wide").string();
    TrainOptions w;
    w.init = p.checkpoint;
    try {
        cmd_train(wider, w);
        FAIL("accepted incompatible init");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::IncompatibleInit);
    }
}

TEST_CASE("predict and evaluate")
{
    Fixture fx("eval");
    const TrainResult r = cmd_train(fx.cfg);
    const fs::path manifest = fx.cfg.data.train_manifest;
    const fs::path pred = fx.root / "pred";
    const auto ids = cmd_predict(fx.cfg, r.best_checkpoint, manifest, pred);
    CHECK(ids.size() == 8);
    for (const auto& id : ids) {
        CHECK(read_nifti_file(pred / (id + "_labels.nii")).grid.shape() == Shape{16, 16, 16});
        CHECK(fs::exists(pred / (id + "_whole.nii")));
        CHECK(fs::exists(pred / (id + "_core.nii")));
        CHECK(fs::exists(pred / (id + "_lesion.nii")));
    }
    const auto rep = cmd_evaluate(fx.cfg, pred, manifest, fx.root / "metrics");
    const auto kv = parse_report_kv(slurp_text(fx.root / "metrics" / "metrics.kv"));
    CHECK(std::abs(kv.at("@mean.@all.dsc") - rep.mean.back().dsc) <= 5e-7);

    // Ground truth copied as the prediction scores 1 everywhere.
    const CaseManifest m = load_manifest_file(manifest);
    const fs::path copy = fx.root / "copy";
    fs::create_directories(copy);
    for (const auto& e : m.entries)
        fs::copy_file(manifest.parent_path() / *e.mask_path, copy / (e.case_id + "_labels.nii"));
    const auto perfect = cmd_evaluate(fx.cfg, copy, manifest, fx.root / "m2");
    for (const auto& mv : perfect.mean) CHECK(mv == MetricValues{1, 1, 1, 1, 1});

    // Plant errors in one case: relabel three background voxels as 2 and
    // clear one whole-region voxel.
    const auto& e0 = m.entries[0];
    NiftiImage gt = read_nifti_file(manifest.parent_path() / *e0.mask_path);
    Tensor bad = gt.grid;
    std::size_t planted_fp = 0, cleared = 0, fg = 0, core = 0;
    for (double v : gt.grid.data()) {
        fg += v != 0;
        core += v == 2;
    }
    for (std::size_t i = 0; i < bad.size(); ++i) {
        if (bad[i] == 0 && planted_fp < 3) {
            bad[i] = 2;
            ++planted_fp;
        } else if (bad[i] == 1 && cleared < 1) {
            bad[i] = 0;
            ++cleared;
        }
    }
    REQUIRE(cleared == 1);
    write_nifti_file(copy / (e0.case_id + "_labels.nii"), bad, gt.spacing_mm, NiftiDatatype::Int16);
    const auto planted = cmd_evaluate(fx.cfg, copy, manifest, fx.root / "m3");
    const double N = 16 * 16 * 16;
    const auto& whole = planted.cases[0].regions[0];
    CHECK(std::abs(whole.dsc - 2.0 * (fg - 1) / (2.0 * (fg - 1) + 3 + 1)) < 1e-12);
    CHECK(std::abs(whole.acc - (N - 4) / N) < 1e-12);
    CHECK(std::abs(whole.se - double(fg - 1) / fg) < 1e-12);
    CHECK(std::abs(whole.pre - double(fg - 1) / (fg + 2)) < 1e-12);
    const auto& cr = planted.cases[0].regions[1];
    CHECK(std::abs(cr.pre - double(core) / (core + 3)) < 1e-12);
    CHECK(cr.se == 1.0);

    fs::remove(copy / (m.entries[3].case_id + "_labels.nii"));
    try {
        cmd_evaluate(fx.cfg, copy, manifest, fx.root / "m4");
        FAIL("missing prediction accepted");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::MissingCase);
        CHECK(std::string(e.what()).find(m.entries[3].case_id) != std::string::npos);
    }
}
