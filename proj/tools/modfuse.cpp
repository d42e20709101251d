// Command line front end: generate-data, pretrain, train, predict, evaluate.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "modfuse/error.hpp"
#include "modfuse/pipeline.hpp"

namespace fs = std::filesystem;
using namespace modfuse;

namespace {

constexpr int exit_config = 2;
constexpr int exit_data = 3;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, Common& c, bool out_required)
{
    sub->add_option("--config", c.config, "config file of 'section.key = value' lines")->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "overrides run.seed");
    auto* o = sub->add_option("--out", c.out, "output directory");
    if (out_required) o->required();
    sub->add_option("--set", c.overrides, "extra 'key=value' overrides, applied after the file")->take_all();
}

Config resolve(const Common& c)
{
    std::string text;
    if (!c.config.empty()) {
        const auto bytes = read_file_bytes(c.config);
        text.assign(bytes.begin(), bytes.end());
    }
    auto kv = parse_config_text(text);
    for (const auto& o : c.overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw Error(ErrorCode::ConfigInvalid, "--set expects key=value, got '" + o + "'");
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t");
            const auto b = s.find_last_not_of(" \t");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        kv[trim(o.substr(0, eq))] = trim(o.substr(eq + 1));
    }
    Config cfg = Config::from_map(kv);
    // Manifest paths in a config file are taken relative to that file.
    if (!c.config.empty()) {
        const fs::path base = fs::path(c.config).parent_path();
        for (std::string* p : {&cfg.data.train_manifest, &cfg.data.pretrain_manifest}) {
            if (!p->empty() && fs::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
        }
    }
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.output_dir = c.out;
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"modfuse: multi-modality fusion segmentation on 3-D volumes"};
    app.require_subcommand(0, 1);
    bool show_keys = false;
    app.add_flag("--config-keys", show_keys, "print every config key with its default and exit");

    Common gen_c, pre_c, train_c, pred_c, eval_c;
    std::size_t n_cases = 50;
    std::optional<std::string> pre_init, train_init;
    bool pre_resume = false, train_resume = false;
    std::string checkpoint, manifest, pred_dir;

    auto* gen = app.add_subcommand("generate-data", "write a synthetic phantom dataset and manifest");
    add_common(gen, gen_c, true);
    gen->add_option("--n", n_cases, "number of cases")->check(CLI::PositiveNumber);

    auto* pre = app.add_subcommand("pretrain", "self-supervised encoder pretraining");
    add_common(pre, pre_c, false);
    pre->add_option("--manifest", manifest, "overrides data.pretrain_manifest");
    pre->add_option("--init", pre_init, "start from this checkpoint's encoders");
    pre->add_flag("--resume", pre_resume, "continue from <out>/pretrain.ckpt");

    auto* train = app.add_subcommand("train", "supervised segmentation training");
    add_common(train, train_c, false);
    train->add_option("--manifest", manifest, "overrides data.train_manifest");
    train->add_option("--init", train_init, "initialise encoders from a pretraining checkpoint");
    train->add_flag("--resume", train_resume, "continue from <out>/last.ckpt");

    auto* pred = app.add_subcommand("predict", "sliding-window inference over a manifest");
    add_common(pred, pred_c, true);
    pred->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    pred->add_option("--manifest", manifest, "cases to segment")->required();

    auto* eval = app.add_subcommand("evaluate", "score predictions against ground truth");
    add_common(eval, eval_c, true);
    eval->add_option("--pred", pred_dir, "directory holding <id>_labels.nii files")->required();
    eval->add_option("--manifest", manifest, "ground-truth manifest")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : exit_config;
    }
    if (show_keys) {
        std::cout << key_help();
        return 0;
    }
    if (app.get_subcommands().empty()) {
        std::cerr << app.help();
        return exit_config;
    }

    try {
        if (*gen) {
            const Config cfg = resolve(gen_c);
            const CaseManifest m = cmd_generate_data(cfg, n_cases, cfg.output_dir);
            std::cout << "wrote " << m.entries.size() << " cases to " << cfg.output_dir << "\n";
        } else if (*pre) {
            Config cfg = resolve(pre_c);
            if (!manifest.empty()) cfg.data.pretrain_manifest = manifest;
            PretrainOptions o;
            if (pre_init) o.init = *pre_init;
            o.resume = pre_resume;
            o.log = &std::cout;
            const auto r = cmd_pretrain(cfg, o);
            std::cout << "checkpoint " << r.checkpoint.string() << "\n";
        } else if (*train) {
            Config cfg = resolve(train_c);
            if (!manifest.empty()) cfg.data.train_manifest = manifest;
            TrainOptions o;
            if (train_init) o.init = *train_init;
            o.resume = train_resume;
            o.log = &std::cout;
            const auto r = cmd_train(cfg, o);
            std::printf("best val DSC %.6f at epoch %zu\n", r.best_dsc, r.best_epoch);
        } else if (*pred) {
            const Config cfg = resolve(pred_c);
            const auto ids = cmd_predict(cfg, checkpoint, manifest, cfg.output_dir);
            std::cout << "predicted " << ids.size() << " cases into " << cfg.output_dir << "\n";
        } else if (*eval) {
            const Config cfg = resolve(eval_c);
            const MetricsReport r = cmd_evaluate(cfg, pred_dir, manifest, cfg.output_dir);
            std::cout << format_report_table(r);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return is_config_error(e.code()) ? exit_config : exit_data;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_data;
    }
    return 0;
}
