#include "modfuse/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <ostream>
#include <set>

#include "modfuse/error.hpp"
#include "modfuse/losses.hpp"
#include "modfuse/optim.hpp"
#include "modfuse/ssl.hpp"
#include "modfuse/synth.hpp"

namespace modfuse {

namespace fs = std::filesystem;

// --- data -------------------------------------------------------------------

Volume load_case(const CaseManifest& manifest, const ManifestEntry& entry, bool with_mask)
{
    Volume v;
    for (const auto& p : entry.modality_paths) {
        NiftiImage img = read_nifti_file(manifest.resolve(p));
        if (v.modalities.empty()) v.spacing_mm = img.spacing_mm;
        if (!v.modalities.empty() && img.grid.shape() != v.modalities.front().shape()) {
            throw Error(ErrorCode::ShapeMismatch, "case " + entry.case_id + ": modality " + p + " has shape " +
                                                      shape_string(img.grid.shape()) + ", expected " +
                                                      shape_string(v.modalities.front().shape()));
        }
        v.modalities.push_back(std::move(img.grid));
    }
    if (with_mask) {
        if (!entry.mask_path) throw Error(ErrorCode::MissingCase, "case " + entry.case_id + " has no mask in the manifest");
        const NiftiImage img = read_nifti_file(manifest.resolve(*entry.mask_path));
        if (img.grid.shape() != v.modalities.front().shape()) {
            throw Error(ErrorCode::ShapeMismatch, "case " + entry.case_id + ": mask shape " +
                                                      shape_string(img.grid.shape()) + " differs from the modalities");
        }
        const Extent3 e{img.grid.dim(0), img.grid.dim(1), img.grid.dim(2)};
        LabelGrid g(e);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double r = std::round(img.grid[i]);
            if (r != img.grid[i] || r < 0 || r > std::numeric_limits<std::int32_t>::max()) {
                throw Error(ErrorCode::LabelOutOfRange, "case " + entry.case_id + ": mask voxel " + std::to_string(i) +
                                                            " is not a non-negative integer label");
            }
            g.labels[i] = static_cast<std::int32_t>(r);
        }
        v.mask = std::move(g);
    }
    return v;
}

Dataset load_dataset(const CaseManifest& manifest, bool with_masks, std::size_t expected_modalities, int num_labels)
{
    if (manifest.entries.empty()) throw Error(ErrorCode::EmptyManifest, "manifest lists no cases");
    if (expected_modalities && manifest.num_modalities() != expected_modalities) {
        throw Error(ErrorCode::ModalityCountMismatch, "manifest has " + std::to_string(manifest.num_modalities()) +
                                                          " modalities, model expects " +
                                                          std::to_string(expected_modalities));
    }
    Dataset d;
    for (const auto& e : manifest.entries) {
        Volume v = load_case(manifest, e, with_masks);
        v.validate(with_masks ? num_labels : 0);
        d.ids.push_back(e.case_id);
        d.volumes.push_back(zscore_normalize(v));
    }
    return d;
}

// --- inference ----------------------------------------------------------------

std::vector<std::size_t> window_starts(std::size_t extent, std::size_t patch, double overlap)
{
    if (patch == 0) throw Error(ErrorCode::InvalidArgument, "patch extent must be >= 1");
    if (extent <= patch) return {0};
    const auto step = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(static_cast<double>(patch) * (1.0 - overlap))));
    std::vector<std::size_t> s;
    for (std::size_t p = 0; p + patch < extent; p += step) s.push_back(p);
    s.push_back(extent - patch);
    return s;
}

Tensor sliding_window_average(const Extent3& extent, const PatchSpec& patch, double overlap, std::size_t channels,
                              const WindowFn& fn)
{
    for (std::size_t a = 0; a < 3; ++a) {
        if (patch.size[a] > extent[a]) {
            throw Error(ErrorCode::PatchTooLarge, "sliding window patch exceeds the volume on axis " + std::to_string(a));
        }
    }
    const auto [D, H, W] = extent;
    const auto [pd, ph, pw] = patch.size;
    Tensor acc({channels, D, H, W}, 0.0);
    std::vector<double> count(D * H * W, 0.0);
    const std::size_t n = D * H * W;
    const std::size_t pn = pd * ph * pw;
    for (auto z0 : window_starts(D, pd, overlap)) {
        for (auto y0 : window_starts(H, ph, overlap)) {
            for (auto x0 : window_starts(W, pw, overlap)) {
                const Tensor out = fn({z0, y0, x0});
                if (out.shape() != Shape{channels, pd, ph, pw}) {
                    throw Error(ErrorCode::ShapeMismatch, "window output " + shape_string(out.shape()));
                }
                for (std::size_t z = 0; z < pd; ++z) {
                    for (std::size_t y = 0; y < ph; ++y) {
                        const std::size_t row = ((z0 + z) * H + (y0 + y)) * W + x0;
                        for (std::size_t x = 0; x < pw; ++x) count[row + x] += 1.0;
                        for (std::size_t c = 0; c < channels; ++c) {
                            const double* src = out.ptr() + c * pn + (z * ph + y) * pw;
                            double* dst = acc.ptr() + c * n + row;
                            for (std::size_t x = 0; x < pw; ++x) dst[x] += src[x];
                        }
                    }
                }
            }
        }
    }
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t i = 0; i < n; ++i) acc[c * n + i] /= count[i];
    }
    return acc;
}

namespace {

Tensor pad_to(const Tensor& t, const Extent3& e)
{
    Tensor out({e[0], e[1], e[2]}, 0.0);
    for (std::size_t z = 0; z < t.dim(0); ++z) {
        for (std::size_t y = 0; y < t.dim(1); ++y) {
            const double* src = t.ptr() + (z * t.dim(1) + y) * t.dim(2);
            std::copy(src, src + t.dim(2), out.ptr() + (z * e[1] + y) * e[2]);
        }
    }
    return out;
}

Tensor crop_grid(const Tensor& t, const Extent3& start, const Extent3& size)
{
    Tensor out({size[0], size[1], size[2]});
    double* dst = out.ptr();
    for (std::size_t z = 0; z < size[0]; ++z) {
        for (std::size_t y = 0; y < size[1]; ++y) {
            const double* src = t.ptr() + ((start[0] + z) * t.dim(1) + start[1] + y) * t.dim(2) + start[2];
            dst = std::copy(src, src + size[2], dst);
        }
    }
    return out;
}

}  // namespace

Tensor sliding_window_predict(Model& model, const Volume& normalized, const PatchSpec& patch, double overlap)
{
    if (normalized.num_modalities() != model.config().num_modalities) {
        throw Error(ErrorCode::ModalityCountMismatch, "case has " + std::to_string(normalized.num_modalities()) +
                                                          " modalities, model expects " +
                                                          std::to_string(model.config().num_modalities));
    }
    const Extent3 e = normalized.extent();
    Extent3 padded{};
    for (std::size_t a = 0; a < 3; ++a) padded[a] = std::max(e[a], patch.size[a]);
    std::vector<Tensor> mods;
    for (const auto& m : normalized.modalities) mods.push_back(padded == e ? m : pad_to(m, padded));
    const std::size_t J = model.config().num_labels;
    Tensor probs = sliding_window_average(padded, patch, overlap, J, [&](const Extent3& start) {
        std::vector<Tensor> inputs;
        for (const auto& m : mods) inputs.push_back(crop_grid(m, start, patch.size));
        return softmax_channels_forward(model.forward(inputs));
    });
    if (padded == e) return probs;
    Tensor out({J, e[0], e[1], e[2]});
    const std::size_t n = voxel_count(e), pn = voxel_count(padded);
    for (std::size_t c = 0; c < J; ++c) {
        const Tensor slab = crop_grid(Tensor({padded[0], padded[1], padded[2]},
                                             std::vector<double>(probs.ptr() + c * pn, probs.ptr() + (c + 1) * pn)),
                                      {0, 0, 0}, e);
        std::copy(slab.ptr(), slab.ptr() + n, out.ptr() + c * n);
    }
    return out;
}

LabelGrid argmax_labels(const Tensor& probs)
{
    if (probs.rank() != 4) throw Error(ErrorCode::ShapeMismatch, "argmax expects [J,D,H,W]");
    const std::size_t J = probs.dim(0), n = probs.inner_size();
    LabelGrid g({probs.dim(1), probs.dim(2), probs.dim(3)});
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < J; ++j) {
            if (probs[j * n + i] > probs[best * n + i]) best = j;
        }
        g.labels[i] = static_cast<std::int32_t>(best);
    }
    return g;
}

Prediction predict_case(Model& model, const Volume& normalized, const PatchSpec& patch, double overlap,
                        const std::vector<Region>& regions)
{
    Prediction p;
    p.probs = sliding_window_predict(model, normalized, patch, overlap);
    p.labels = argmax_labels(p.probs);
    p.lesion_mask = LabelGrid(p.labels.shape, 0);
    for (const auto& r : regions) {
        p.region_masks.push_back(binarize(p.labels, r));
        const auto& m = p.region_masks.back();
        for (std::size_t i = 0; i < m.size(); ++i) p.lesion_mask.labels[i] |= m.labels[i];
    }
    return p;
}

MetricsReport validate_model(Model& model, const Dataset& data, const std::vector<std::size_t>& indices,
                             const PatchSpec& patch, double overlap, const std::vector<Region>& regions)
{
    std::vector<CaseMetrics> cases;
    for (auto i : indices) {
        const LabelGrid pred = argmax_labels(sliding_window_predict(model, data.volumes[i], patch, overlap));
        cases.push_back(evaluate_case(pred, *data.volumes[i].mask, regions, data.ids[i]));
    }
    return aggregate(std::move(cases), regions);
}

// --- shared run plumbing ------------------------------------------------------

std::map<std::string, std::string> stored_run_config(const Config& cfg)
{
    auto kv = cfg.to_map();
    kv.erase("run.output_dir");
    return kv;
}

Config config_from_checkpoint(const Checkpoint& ck)
{
    std::map<std::string, std::string> kv;
    for (const auto& [k, v] : ck.meta) {
        if (k.rfind("config.", 0) == 0) kv[k.substr(7)] = v;
    }
    return Config::from_map(kv);
}

namespace {

std::string real_text(double v)
{
    // Shortest text that parses back to the same double.
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

void say(std::ostream* log, const std::string& line)
{
    if (log) *log << line << std::endl;
}

void put_config(Checkpoint& ck, const Config& cfg)
{
    for (const auto& [k, v] : stored_run_config(cfg)) ck.meta["config." + k] = v;
}

void check_resume_config(const Checkpoint& ck, const Config& cfg, const char* kind)
{
    const auto it = ck.meta.find("run.kind");
    if (it == ck.meta.end() || it->second != kind) {
        throw Error(ErrorCode::ConfigMismatch, std::string("checkpoint is not a ") + kind + " checkpoint");
    }
    std::map<std::string, std::string> stored;
    for (const auto& [k, v] : ck.meta) {
        if (k.rfind("config.", 0) == 0) stored[k.substr(7)] = v;
    }
    for (const auto& [k, v] : stored_run_config(cfg)) {
        const auto s = stored.find(k);
        if (s == stored.end() || s->second != v) {
            throw Error(ErrorCode::ConfigMismatch, "resume: config key " + k + " differs from the checkpoint");
        }
    }
}

std::vector<double> blob_reals(const Checkpoint& ck, const std::string& name)
{
    return ck.get(name).f64;
}

std::vector<std::size_t> shuffled(std::vector<std::size_t> v, SeededRng& rng)
{
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.uniform_index(i)]);
    return v;
}

void check_init_topology(const ModelConfig& target, const ModelConfig& source, TransferMode transfer)
{
    if (source.base_channels != target.base_channels || source.num_levels != target.num_levels ||
        source.encoder_in_channels() != target.encoder_in_channels()) {
        throw Error(ErrorCode::IncompatibleInit,
                    "init checkpoint encoders differ in base_channels, num_levels or input channels");
    }
    if (transfer == TransferMode::PerModality && source.num_encoders() < target.num_encoders()) {
        throw Error(ErrorCode::IncompatibleInit, "init checkpoint has " + std::to_string(source.num_encoders()) +
                                                     " encoders, per-modality transfer needs " +
                                                     std::to_string(target.num_encoders()));
    }
}

void init_encoders(Model& model, const fs::path& path, TransferMode transfer)
{
    const Checkpoint ck = read_checkpoint(path);
    check_init_topology(model.config(), stored_model_config(ck), transfer);
    try {
        load_encoders(model, ck, transfer);
    } catch (const Error& e) {
        throw Error(ErrorCode::IncompatibleInit, e.what());
    }
}

void write_text(const fs::path& path, const std::string& text)
{
    write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_holdout(std::size_t n, double fraction,
                                                                              bool at_least_one)
{
    auto held = static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction));
    if (at_least_one && fraction > 0.0) held = std::max<std::size_t>(held, 1);
    if (held >= n) throw Error(ErrorCode::EmptyManifest, "holdout split leaves no training cases");
    std::vector<std::size_t> train, hold;
    for (std::size_t i = 0; i < n; ++i) (i < n - held ? train : hold).push_back(i);
    return {train, hold};
}

}  // namespace

// --- supervised training ------------------------------------------------------

TrainResult cmd_train(const Config& cfg, const TrainOptions& opts)
{
    cfg.validate();
    if (cfg.data.train_manifest.empty()) throw Error(ErrorCode::ConfigInvalid, "data.train_manifest is not set");
    const CaseManifest manifest = load_manifest_file(cfg.data.train_manifest, cfg.model.num_modalities);
    const Dataset data = load_dataset(manifest, true, cfg.model.num_modalities, static_cast<int>(cfg.model.num_labels));
    const auto [train_idx, val_idx] = split_holdout(data.size(), cfg.train.val_fraction, true);
    TrainResult r;
    for (auto i : train_idx) r.train_ids.push_back(data.ids[i]);
    for (auto i : val_idx) r.val_ids.push_back(data.ids[i]);
    {
        const std::set<std::string> t(r.train_ids.begin(), r.train_ids.end());
        for (const auto& v : r.val_ids) {
            if (t.count(v)) throw Error(ErrorCode::DuplicateCaseId, "case " + v + " is in both splits");
        }
    }

    const fs::path out = cfg.output_dir;
    fs::create_directories(out);
    r.last_checkpoint = out / "last.ckpt";
    r.best_checkpoint = out / "best.ckpt";
    const auto regions = parse_regions(cfg.regions);
    const std::size_t J = cfg.model.num_labels;
    const std::size_t T = cfg.train.epochs;
    ScheduleSpec sched = cfg.train.optim.schedule;
    sched.total_epochs = static_cast<double>(T);

    SeededRng master(cfg.seed);
    Optimizer opt = cfg.train.optim.make();
    Model model;
    std::size_t since_best = 0;
    std::size_t start = 0;
    if (opts.resume) {
        const Checkpoint ck = read_checkpoint(r.last_checkpoint);
        check_resume_config(ck, cfg, "train");
        model = load_model(ck, LoadMode::Full, &cfg.model);
        opt.restore(ck);
        master.set_state(ck.get("run.rng").bytes);
        r.epoch_loss = blob_reals(ck, "run.epoch_loss");
        r.val_dsc = blob_reals(ck, "run.val_dsc");
        r.step_losses = blob_reals(ck, "run.step_losses");
        r.lr = blob_reals(ck, "run.lr");
        start = std::stoul(ck.meta.at("run.epoch"));
        r.best_epoch = std::stoul(ck.meta.at("run.best_epoch"));
        r.best_dsc = std::stod(ck.meta.at("run.best_dsc"));
        since_best = std::stoul(ck.meta.at("run.since_best"));
        say(opts.log, "resuming at epoch " + std::to_string(start + 1));
    } else {
        SeededRng model_rng(master.derive_seed());
        model = build_model(cfg.model, model_rng);
        if (opts.init) init_encoders(model, *opts.init, cfg.train.init_transfer);
    }

    const std::size_t B = cfg.train.batch_size;
    for (std::size_t epoch = start; epoch < T; ++epoch) {
        if (opts.stop_after && epoch >= opts.stop_after) break;
        if (cfg.train.patience && since_best >= cfg.train.patience) break;
        if (opts.on_epoch_begin) opts.on_epoch_begin(epoch, model);
        SeededRng rng(master.derive_seed());
        const double lr = sched.at(static_cast<double>(epoch));
        const auto order = shuffled(train_idx, rng);
        double epoch_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += B) {
            const std::size_t bn = std::min(B, order.size() - b0);
            model.zero_grad();
            double batch_sum = 0.0;
            for (std::size_t k = 0; k < bn; ++k) {
                const Volume& vol = data.volumes[order[b0 + k]];
                const CropOffset off = rng.bernoulli(cfg.train.foreground_prob)
                                           ? foreground_crop_offset(*vol.mask, cfg.patch, rng)
                                           : random_crop_offset(vol.extent(), cfg.patch, rng);
                const Volume sample = augment(crop(vol, off, cfg.patch), cfg.augment, rng);
                const Tensor logits = model.forward(sample.modalities);
                const Tensor target = one_hot(*sample.mask, static_cast<int>(J));
                LossResult lr_ = cfg.train.loss == SupervisedLoss::Combined ? combined_loss(logits, target, cfg.loss)
                                                                            : soft_dice_logits_loss(logits, target);
                for (auto& g : lr_.grad.data()) g /= static_cast<double>(bn);
                model.backward(lr_.grad);
                batch_sum += lr_.value;
            }
            opt.step(model.params(), lr);
            const double step_loss = batch_sum / static_cast<double>(bn);
            r.step_losses.push_back(step_loss);
            epoch_sum += step_loss;
            ++steps;
        }
        model.clear_cache();
        r.epoch_loss.push_back(epoch_sum / static_cast<double>(steps));
        r.lr.push_back(lr);

        double dsc = std::numeric_limits<double>::quiet_NaN();
        const bool validate = (epoch + 1) % cfg.train.val_every == 0 || epoch + 1 == T;
        if (validate) {
            dsc = validate_model(model, data, val_idx, cfg.patch, cfg.predict_overlap, regions).mean_dsc();
            model.clear_cache();
        }
        r.val_dsc.push_back(dsc);
        bool improved = false;
        if (validate) {
            if (dsc > r.best_dsc) {
                r.best_dsc = dsc;
                r.best_epoch = epoch + 1;
                since_best = 0;
                improved = true;
            } else {
                ++since_best;
            }
        }

        Checkpoint ck;
        put_config(ck, cfg);
        ck.meta["run.kind"] = "train";
        ck.meta["run.epoch"] = std::to_string(epoch + 1);
        ck.meta["run.best_epoch"] = std::to_string(r.best_epoch);
        ck.meta["run.best_dsc"] = real_text(r.best_dsc);
        ck.meta["run.since_best"] = std::to_string(since_best);
        store_model(ck, model);
        opt.store(ck);
        ck.put(Blob::text("run.rng", master.state()));
        ck.put(Blob::reals("run.epoch_loss", r.epoch_loss));
        ck.put(Blob::reals("run.val_dsc", r.val_dsc));
        ck.put(Blob::reals("run.step_losses", r.step_losses));
        ck.put(Blob::reals("run.lr", r.lr));
        if (improved) write_checkpoint(r.best_checkpoint, ck);
        write_checkpoint(r.last_checkpoint, ck);

        std::string epochs_tsv = "epoch\ttrain_loss\tval_dsc\tlr\n";
        for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) {
            epochs_tsv += std::to_string(e + 1) + "\t" + real_text(r.epoch_loss[e]) + "\t" + real_text(r.val_dsc[e]) +
                          "\t" + real_text(r.lr[e]) + "\n";
        }
        write_text(out / "epochs.tsv", epochs_tsv);
        const std::size_t per_epoch = (train_idx.size() + B - 1) / B;
        std::string steps_tsv = "epoch\tstep\tloss\n";
        for (std::size_t s = 0; s < r.step_losses.size(); ++s) {
            steps_tsv += std::to_string(s / per_epoch + 1) + "\t" + std::to_string(s + 1) + "\t" +
                         real_text(r.step_losses[s]) + "\n";
        }
        write_text(out / "steps.tsv", steps_tsv);

        char line[160];
        std::snprintf(line, sizeof line, "epoch %zu/%zu  loss %.6f  val_dsc %s  lr %.3g", epoch + 1, T,
                      r.epoch_loss.back(), validate ? std::to_string(dsc).c_str() : "-", lr);
        say(opts.log, line);
    }
    r.epochs_completed = r.epoch_loss.size();
    return r;
}

// --- self-supervised pretraining ---------------------------------------------

namespace {

std::size_t argmax(const Tensor& t)
{
    return static_cast<std::size_t>(std::max_element(t.data().begin(), t.data().end()) - t.data().begin());
}

Tensor crop_stacked(const Volume& v, const PatchSpec& patch, SeededRng& rng)
{
    const Volume c = crop(v, random_crop_offset(v.extent(), patch, rng), patch);
    return stack_modalities(c);
}

}  // namespace

PretrainResult cmd_pretrain(const Config& cfg, const PretrainOptions& opts)
{
    cfg.validate();
    if (cfg.data.pretrain_manifest.empty()) throw Error(ErrorCode::ConfigInvalid, "data.pretrain_manifest is not set");
    const CaseManifest manifest = load_manifest_file(cfg.data.pretrain_manifest, cfg.model.num_modalities);
    const Dataset data = load_dataset(manifest, false, cfg.model.num_modalities);
    const auto [train_idx, hold_idx] = split_holdout(data.size(), cfg.ssl.holdout_fraction, false);
    if (train_idx.size() < 2) throw Error(ErrorCode::EmptyManifest, "pretraining needs at least two training cases");

    const fs::path out = cfg.output_dir;
    fs::create_directories(out);
    PretrainResult r;
    r.checkpoint = out / "pretrain.ckpt";
    const SslSettings& ssl = cfg.ssl;
    const std::size_t T = ssl.epochs;
    ScheduleSpec sched = ssl.optim.schedule;
    sched.total_epochs = static_cast<double>(T);

    SeededRng master(cfg.seed);
    Optimizer opt = ssl.optim.make();
    Model model;
    SslHeads heads;
    std::size_t start = 0;
    if (opts.resume) {
        const Checkpoint ck = read_checkpoint(r.checkpoint);
        check_resume_config(ck, cfg, "pretrain");
        model = load_model(ck, LoadMode::Full, &cfg.model);
        SeededRng scratch(0);
        heads = SslHeads(cfg.model, ssl, scratch);
        for (auto& p : heads.params()) {
            const Tensor t = ck.get("param." + p.id).as_tensor();
            if (t.shape() != p.value.shape()) throw Error(ErrorCode::ConfigMismatch, "head " + p.id + " shape differs");
            p.value = t;
        }
        opt.restore(ck);
        master.set_state(ck.get("run.rng").bytes);
        r.loss = blob_reals(ck, "run.loss");
        r.inpaint = blob_reals(ck, "run.inpaint");
        r.rotation = blob_reals(ck, "run.rotation");
        r.contrastive = blob_reals(ck, "run.contrastive");
        r.train_rotation_acc = blob_reals(ck, "run.train_rotation_acc");
        r.heldout_rotation_acc = blob_reals(ck, "run.heldout_rotation_acc");
        r.lr = blob_reals(ck, "run.lr");
        start = std::stoul(ck.meta.at("run.epoch"));
        say(opts.log, "resuming at epoch " + std::to_string(start + 1));
    } else {
        SeededRng model_rng(master.derive_seed());
        model = build_model(cfg.model, model_rng);
        heads = SslHeads(cfg.model, ssl, model_rng);
        if (opts.init) init_encoders(model, *opts.init, cfg.train.init_transfer);
    }

    // Only the encoder path and the heads learn; the segmentation decoder is
    // left untouched for the supervised stage to initialise.
    std::vector<Param*> trainable;
    for (auto& p : model.params()) {
        if (is_encoder_param(p.id) || p.id.rfind("fusion.", 0) == 0) trainable.push_back(&p);
    }
    for (auto& p : heads.params()) trainable.push_back(&p);

    const std::size_t B = ssl.batch_size;
    const std::size_t n = train_idx.size();
    const double inv_views = 1.0 / static_cast<double>(2 * B);
    for (std::size_t epoch = start; epoch < T; ++epoch) {
        if (opts.stop_after && epoch >= opts.stop_after) break;
        SeededRng rng(master.derive_seed());
        const double lr = sched.at(static_cast<double>(epoch));
        const auto order = shuffled(train_idx, rng);
        const std::size_t batches = (n + B - 1) / B;
        double s_loss = 0, s_inp = 0, s_rot = 0, s_con = 0;
        std::size_t correct = 0, seen = 0;
        for (std::size_t b = 0; b < batches; ++b) {
            std::vector<SslView> views;  // case i -> views 2i, 2i+1
            for (std::size_t k = 0; k < B; ++k) {
                const Tensor patch = crop_stacked(data.volumes[order[(b * B + k) % n]], cfg.patch, rng);
                // Both views of a pair share the rotation: with independent
                // draws the contrastive term rewards rotation-invariant
                // embeddings and rotation prediction stalls at chance.
                const int rot = static_cast<int>(rng.uniform_index(cfg.ssl.rotations));
                views.push_back(make_view(patch, cfg, rng, rot));
                views.push_back(make_view(patch, cfg, rng, rot));
            }
            // Pass 1: embeddings for the batch-level contrastive term.
            std::vector<Tensor> za, zb;
            for (std::size_t v = 0; v < views.size(); ++v) {
                const Encoding enc = model.encode(split_modalities(views[v].input));
                (v % 2 == 0 ? za : zb).push_back(heads.forward(enc).embedding);
            }
            const ContrastiveResult con = contrastive_loss(za, zb, ssl.temperature);
            // Pass 2: per-view losses and the full backward.
            for (auto* p : trainable) p->zero_grad();
            double inp = 0.0, rot = 0.0;
            for (std::size_t v = 0; v < views.size(); ++v) {
                const Encoding enc = model.encode(split_modalities(views[v].input));
                const SslHeads::Outputs o = heads.forward(enc);
                LossResult li = inpainting_loss(o.recon, views[v].target, views[v].mask);
                LossResult lr_ = rotation_loss(o.rotation, views[v].rotation);
                inp += li.value;
                rot += lr_.value;
                correct += argmax(o.rotation) == views[v].rotation;
                ++seen;
                for (auto& g : li.grad.data()) g *= ssl.weight_inpaint * inv_views;
                for (auto& g : lr_.grad.data()) g *= ssl.weight_rotation * inv_views;
                Tensor ge = (v % 2 == 0 ? con.grad_a : con.grad_b)[v / 2];
                for (auto& g : ge.data()) g *= ssl.weight_contrastive;
                model.backward_encode(heads.backward(li.grad, lr_.grad, ge));
            }
            opt.step(trainable, lr);
            inp *= inv_views;
            rot *= inv_views;
            s_inp += inp;
            s_rot += rot;
            s_con += con.value;
            s_loss += ssl.weight_inpaint * inp + ssl.weight_rotation * rot + ssl.weight_contrastive * con.value;
        }
        const double nb = static_cast<double>(batches);
        r.loss.push_back(s_loss / nb);
        r.inpaint.push_back(s_inp / nb);
        r.rotation.push_back(s_rot / nb);
        r.contrastive.push_back(s_con / nb);
        r.train_rotation_acc.push_back(static_cast<double>(correct) / static_cast<double>(seen));
        r.lr.push_back(lr);

        // Held-out rotation accuracy on a fixed set of views: one crop per
        // case, every rotation, no intensity augmentation.
        double held = std::numeric_limits<double>::quiet_NaN();
        if (!hold_idx.empty()) {
            SeededRng eval_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
            std::size_t ok = 0, total = 0;
            for (auto i : hold_idx) {
                const Tensor patch = crop_stacked(data.volumes[i], cfg.patch, eval_rng);
                for (std::size_t k = 0; k < ssl.rotations; ++k) {
                    const SslView v = make_view(patch, cfg, eval_rng, static_cast<int>(k), false);
                    const Encoding enc = model.encode(split_modalities(v.input));
                    ok += argmax(heads.forward(enc).rotation) == k;
                    ++total;
                }
            }
            held = static_cast<double>(ok) / static_cast<double>(total);
        }
        r.heldout_rotation_acc.push_back(held);
        model.clear_cache();

        Checkpoint ck;
        put_config(ck, cfg);
        ck.meta["run.kind"] = "pretrain";
        ck.meta["run.epoch"] = std::to_string(epoch + 1);
        store_model(ck, model);
        for (const auto& p : heads.params()) ck.put(Blob::tensor("param." + p.id, p.value));
        opt.store(ck);
        ck.put(Blob::text("run.rng", master.state()));
        ck.put(Blob::reals("run.loss", r.loss));
        ck.put(Blob::reals("run.inpaint", r.inpaint));
        ck.put(Blob::reals("run.rotation", r.rotation));
        ck.put(Blob::reals("run.contrastive", r.contrastive));
        ck.put(Blob::reals("run.train_rotation_acc", r.train_rotation_acc));
        ck.put(Blob::reals("run.heldout_rotation_acc", r.heldout_rotation_acc));
        ck.put(Blob::reals("run.lr", r.lr));
        write_checkpoint(r.checkpoint, ck);

        std::string tsv = "epoch\tloss\tinpaint\trotation\tcontrastive\ttrain_rot_acc\theldout_rot_acc\tlr\n";
        for (std::size_t e = 0; e < r.loss.size(); ++e) {
            tsv += std::to_string(e + 1) + "\t" + real_text(r.loss[e]) + "\t" + real_text(r.inpaint[e]) + "\t" +
                   real_text(r.rotation[e]) + "\t" + real_text(r.contrastive[e]) + "\t" +
                   real_text(r.train_rotation_acc[e]) + "\t" + real_text(r.heldout_rotation_acc[e]) + "\t" +
                   real_text(r.lr[e]) + "\n";
        }
        write_text(out / "pretrain_epochs.tsv", tsv);

        char line[200];
        std::snprintf(line, sizeof line,
                      "epoch %zu/%zu  loss %.5f  inpaint %.5f  rotation %.5f  contrastive %.5f  rot_acc %.3f/%.3f",
                      epoch + 1, T, r.loss.back(), r.inpaint.back(), r.rotation.back(), r.contrastive.back(),
                      r.train_rotation_acc.back(), held);
        say(opts.log, line);
    }
    r.epochs_completed = r.loss.size();
    return r;
}

// --- file commands -----------------------------------------------------------

CaseManifest cmd_generate_data(const Config& cfg, std::size_t n, const fs::path& out_dir)
{
    return generate_dataset(cfg.phantom, n, out_dir, cfg.seed);
}

namespace {

Tensor labels_to_grid(const LabelGrid& g)
{
    Tensor t({g.shape[0], g.shape[1], g.shape[2]});
    for (std::size_t i = 0; i < g.size(); ++i) t[i] = g.labels[i];
    return t;
}

}  // namespace

std::vector<std::string> cmd_predict(const Config& cfg, const fs::path& checkpoint, const fs::path& manifest_path,
                                     const fs::path& out_dir)
{
    const Checkpoint ck = read_checkpoint(checkpoint);
    Model model = load_model(ck, LoadMode::Full);
    const ModelConfig& mc = model.config();
    cfg.patch.check_divisible(mc.num_levels);
    const auto regions = parse_regions(cfg.regions);
    const CaseManifest manifest = load_manifest_file(manifest_path, mc.num_modalities);
    if (manifest.entries.empty()) throw Error(ErrorCode::EmptyManifest, "manifest lists no cases");
    fs::create_directories(out_dir);
    std::vector<std::string> ids;
    for (const auto& e : manifest.entries) {
        const Volume v = zscore_normalize(load_case(manifest, e, false));
        const Prediction p = predict_case(model, v, cfg.patch, cfg.predict_overlap, regions);
        write_nifti_file(out_dir / (e.case_id + "_labels.nii"), labels_to_grid(p.labels), v.spacing_mm,
                         NiftiDatatype::Int16);
        for (std::size_t g = 0; g < regions.size(); ++g) {
            write_nifti_file(out_dir / (e.case_id + "_" + regions[g].name + ".nii"), labels_to_grid(p.region_masks[g]),
                             v.spacing_mm, NiftiDatatype::Int16);
        }
        write_nifti_file(out_dir / (e.case_id + "_lesion.nii"), labels_to_grid(p.lesion_mask), v.spacing_mm,
                         NiftiDatatype::Int16);
        ids.push_back(e.case_id);
    }
    return ids;
}

MetricsReport cmd_evaluate(const Config& cfg, const fs::path& pred_dir, const fs::path& gt_manifest,
                           const fs::path& out_dir)
{
    const auto regions = parse_regions(cfg.regions);
    const CaseManifest manifest = load_manifest_file(gt_manifest, cfg.model.num_modalities);
    if (manifest.entries.empty()) throw Error(ErrorCode::EmptyManifest, "manifest lists no cases");
    std::vector<CaseMetrics> cases;
    for (const auto& e : manifest.entries) {
        const fs::path pred_path = pred_dir / (e.case_id + "_labels.nii");
        if (!fs::exists(pred_path)) throw Error(ErrorCode::MissingCase, "no prediction for case " + e.case_id);
        if (!e.mask_path) throw Error(ErrorCode::MissingCase, "case " + e.case_id + " has no ground-truth mask");
        ManifestEntry pe;
        pe.case_id = e.case_id;
        pe.modality_paths = {pred_path.string()};
        pe.mask_path = pred_path.string();
        CaseManifest pm;
        const LabelGrid pred = *load_case(pm, pe, true).mask;
        ManifestEntry ge = e;
        ge.modality_paths = {*e.mask_path};
        const LabelGrid gt = *load_case(manifest, ge, true).mask;
        cases.push_back(evaluate_case(pred, gt, regions, e.case_id));
    }
    MetricsReport report = aggregate(std::move(cases), regions);
    fs::create_directories(out_dir);
    write_text(out_dir / "metrics.kv", format_report_kv(report));
    write_text(out_dir / "metrics.txt", format_report_table(report));
    return report;
}

}  // namespace modfuse
