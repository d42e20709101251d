#include "modfuse/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

#include "modfuse/error.hpp"
#include "modfuse/metrics.hpp"

namespace modfuse {

Optimizer OptimConfig::make() const
{
    Optimizer o;
    o.kind = kind;
    o.sgd.momentum = momentum;
    o.sgd.weight_decay = weight_decay;
    o.adamw.beta1 = beta1;
    o.adamw.beta2 = beta2;
    o.adamw.eps = eps;
    o.adamw.weight_decay = weight_decay;
    return o;
}

SslSettings::SslSettings()
{
    optim.kind = OptimizerKind::AdamW;
    optim.schedule.kind = ScheduleKind::Cosine;
    // At 1e-3 the contrastive gradients (scaled by 1/tau) swamp rotation in
    // AdamW's second-moment estimate and rotation stays near chance.
    optim.schedule.eta0 = 3e-3;
    optim.weight_decay = 1e-2;
}

namespace {

std::string trim(std::string_view s)
{
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string_view::npos) return {};
    const auto b = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(a, b - a + 1));
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const char* expected)
{
    throw Error(ErrorCode::ConfigInvalid, key + ": expected " + expected + ", got '" + value + "'");
}

std::uint64_t to_u64(const std::string& key, const std::string& v)
{
    std::size_t used = 0;
    unsigned long long r = 0;
    try {
        r = std::stoull(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size() || v.front() == '-') bad(key, v, "a non-negative integer");
    return r;
}

double to_real(const std::string& key, const std::string& v)
{
    std::size_t used = 0;
    double r = 0.0;
    try {
        r = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size() || !std::isfinite(r)) bad(key, v, "a finite number");
    return r;
}

std::string real_text(double v)
{
    // Shortest text that parses back to the same double.
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::vector<std::string> split(const std::string& s, char sep)
{
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string tok;
    while (std::getline(in, tok, sep)) out.push_back(trim(tok));
    return out;
}

Extent3 to_extent(const std::string& key, const std::string& v)
{
    const auto parts = split(v, ',');
    if (parts.size() != 3) bad(key, v, "three comma-separated extents");
    Extent3 e{};
    for (std::size_t a = 0; a < 3; ++a) e[a] = to_u64(key, parts[a]);
    return e;
}

std::string extent_text(const Extent3& e)
{
    return std::to_string(e[0]) + "," + std::to_string(e[1]) + "," + std::to_string(e[2]);
}

std::vector<std::vector<double>> to_table(const std::string& key, const std::string& v)
{
    std::vector<std::vector<double>> t;
    for (const auto& row : split(v, ';')) {
        t.emplace_back();
        for (const auto& cell : split(row, ',')) t.back().push_back(to_real(key, cell));
    }
    return t;
}

std::string table_text(const std::vector<std::vector<double>>& t)
{
    std::string s;
    for (std::size_t r = 0; r < t.size(); ++r) {
        if (r) s += ';';
        for (std::size_t c = 0; c < t[r].size(); ++c) {
            if (c) s += ',';
            s += real_text(t[r][c]);
        }
    }
    return s;
}

std::array<double, 3> to_triple(const std::string& key, const std::string& v)
{
    const auto parts = split(v, ',');
    if (parts.size() != 3) bad(key, v, "three comma-separated numbers");
    return {to_real(key, parts[0]), to_real(key, parts[1]), to_real(key, parts[2])};
}

std::string triple_text(const std::array<double, 3>& t)
{
    return real_text(t[0]) + "," + real_text(t[1]) + "," + real_text(t[2]);
}

struct Binding {
    std::string key;
    std::function<std::string(const Config&)> get;
    std::function<void(Config&, const std::string&)> set;
};

template <typename Field>
void bind_size(std::vector<Binding>& b, std::string key, Field field)
{
    b.push_back({key, [field](const Config& c) { return std::to_string(field(const_cast<Config&>(c))); },
                 [field, key](Config& c, const std::string& v) { field(c) = static_cast<std::size_t>(to_u64(key, v)); }});
}

template <typename Field>
void bind_real(std::vector<Binding>& b, std::string key, Field field)
{
    b.push_back({key, [field](const Config& c) { return real_text(field(const_cast<Config&>(c))); },
                 [field, key](Config& c, const std::string& v) { field(c) = to_real(key, v); }});
}

template <typename Field>
void bind_text(std::vector<Binding>& b, std::string key, Field field)
{
    b.push_back({key, [field](const Config& c) { return std::string(field(const_cast<Config&>(c))); },
                 [field](Config& c, const std::string& v) { field(c) = v; }});
}

void bind_optim(std::vector<Binding>& b, const std::string& sec, bool ssl)
{
    auto opt = [ssl](Config& c) -> OptimConfig& { return ssl ? c.ssl.optim : c.train.optim; };
    b.push_back({sec + ".kind", [opt](const Config& c) { return std::string(to_string(opt(const_cast<Config&>(c)).kind)); },
                 [opt](Config& c, const std::string& v) { opt(c).kind = parse_optimizer_kind(v); }});
    bind_real(b, sec + ".lr", [opt](Config& c) -> double& { return opt(c).schedule.eta0; });
    b.push_back({sec + ".schedule",
                 [opt](const Config& c) {
                     return std::string(opt(const_cast<Config&>(c)).schedule.kind == ScheduleKind::Poly ? "poly" : "cosine");
                 },
                 [opt, sec](Config& c, const std::string& v) {
                     if (v == "poly") {
                         opt(c).schedule.kind = ScheduleKind::Poly;
                     } else if (v == "cosine") {
                         opt(c).schedule.kind = ScheduleKind::Cosine;
                     } else {
                         bad(sec + ".schedule", v, "poly or cosine");
                     }
                 }});
    bind_real(b, sec + ".power", [opt](Config& c) -> double& { return opt(c).schedule.power; });
    bind_real(b, sec + ".eta_min", [opt](Config& c) -> double& { return opt(c).schedule.eta_min; });
    bind_real(b, sec + ".momentum", [opt](Config& c) -> double& { return opt(c).momentum; });
    bind_real(b, sec + ".weight_decay", [opt](Config& c) -> double& { return opt(c).weight_decay; });
    bind_real(b, sec + ".beta1", [opt](Config& c) -> double& { return opt(c).beta1; });
    bind_real(b, sec + ".beta2", [opt](Config& c) -> double& { return opt(c).beta2; });
    bind_real(b, sec + ".eps", [opt](Config& c) -> double& { return opt(c).eps; });
}

const std::vector<Binding>& bindings()
{
    static const std::vector<Binding> table = [] {
        std::vector<Binding> b;
        b.push_back({"run.seed", [](const Config& c) { return std::to_string(c.seed); },
                     [](Config& c, const std::string& v) { c.seed = to_u64("run.seed", v); }});
        bind_text(b, "run.output_dir", [](Config& c) -> std::string& { return c.output_dir; });

        bind_size(b, "model.num_modalities", [](Config& c) -> std::size_t& { return c.model.num_modalities; });
        bind_size(b, "model.num_labels", [](Config& c) -> std::size_t& { return c.model.num_labels; });
        bind_size(b, "model.num_levels", [](Config& c) -> std::size_t& { return c.model.num_levels; });
        bind_size(b, "model.base_channels", [](Config& c) -> std::size_t& { return c.model.base_channels; });
        b.push_back({"model.fusion", [](const Config& c) { return std::string(to_string(c.model.fusion)); },
                     [](Config& c, const std::string& v) { c.model.fusion = parse_fusion_mode(v); }});
        b.push_back({"model.skip_fusion", [](const Config& c) { return std::string(to_string(c.model.skip_fusion)); },
                     [](Config& c, const std::string& v) { c.model.skip_fusion = parse_fusion_mode(v); }});
        b.push_back({"model.variant", [](const Config& c) { return std::string(to_string(c.model.variant)); },
                     [](Config& c, const std::string& v) { c.model.variant = parse_model_variant(v); }});

        b.push_back({"patch.size", [](const Config& c) { return extent_text(c.patch.size); },
                     [](Config& c, const std::string& v) { c.patch.size = to_extent("patch.size", v); }});

        bind_size(b, "train.batch_size", [](Config& c) -> std::size_t& { return c.train.batch_size; });
        bind_size(b, "train.epochs", [](Config& c) -> std::size_t& { return c.train.epochs; });
        bind_real(b, "train.val_fraction", [](Config& c) -> double& { return c.train.val_fraction; });
        bind_real(b, "train.foreground_prob", [](Config& c) -> double& { return c.train.foreground_prob; });
        b.push_back({"train.loss",
                     [](const Config& c) {
                         return std::string(c.train.loss == SupervisedLoss::Combined ? "combined" : "soft_dice");
                     },
                     [](Config& c, const std::string& v) {
                         if (v == "combined") {
                             c.train.loss = SupervisedLoss::Combined;
                         } else if (v == "soft_dice") {
                             c.train.loss = SupervisedLoss::SoftDice;
                         } else {
                             bad("train.loss", v, "combined or soft_dice");
                         }
                     }});
        bind_size(b, "train.val_every", [](Config& c) -> std::size_t& { return c.train.val_every; });
        bind_size(b, "train.patience", [](Config& c) -> std::size_t& { return c.train.patience; });
        b.push_back({"train.init_transfer", [](const Config& c) { return std::string(to_string(c.train.init_transfer)); },
                     [](Config& c, const std::string& v) { c.train.init_transfer = parse_transfer_mode(v); }});
        bind_optim(b, "optim", false);

        bind_real(b, "loss.lambda_dice", [](Config& c) -> double& { return c.loss.lambda_dice; });
        bind_real(b, "loss.lambda_ce", [](Config& c) -> double& { return c.loss.lambda_ce; });

        bind_size(b, "ssl.epochs", [](Config& c) -> std::size_t& { return c.ssl.epochs; });
        bind_size(b, "ssl.batch_size", [](Config& c) -> std::size_t& { return c.ssl.batch_size; });
        bind_real(b, "ssl.mask_ratio", [](Config& c) -> double& { return c.ssl.mask_ratio; });
        b.push_back({"ssl.mask_block", [](const Config& c) { return extent_text(c.ssl.mask_block); },
                     [](Config& c, const std::string& v) { c.ssl.mask_block = to_extent("ssl.mask_block", v); }});
        bind_size(b, "ssl.rotations", [](Config& c) -> std::size_t& { return c.ssl.rotations; });
        bind_real(b, "ssl.temperature", [](Config& c) -> double& { return c.ssl.temperature; });
        bind_size(b, "ssl.embedding_dim", [](Config& c) -> std::size_t& { return c.ssl.embedding_dim; });
        bind_real(b, "ssl.weight_inpaint", [](Config& c) -> double& { return c.ssl.weight_inpaint; });
        bind_real(b, "ssl.weight_rotation", [](Config& c) -> double& { return c.ssl.weight_rotation; });
        bind_real(b, "ssl.weight_contrastive", [](Config& c) -> double& { return c.ssl.weight_contrastive; });
        bind_real(b, "ssl.holdout_fraction", [](Config& c) -> double& { return c.ssl.holdout_fraction; });
        bind_optim(b, "ssl_optim", true);

        b.push_back({"augment.flip_prob", [](const Config& c) { return triple_text(c.augment.flip_prob); },
                     [](Config& c, const std::string& v) { c.augment.flip_prob = to_triple("augment.flip_prob", v); }});
        bind_real(b, "augment.rotate_prob", [](Config& c) -> double& { return c.augment.rotate_prob; });
        bind_real(b, "augment.scale_prob", [](Config& c) -> double& { return c.augment.scale_prob; });
        bind_real(b, "augment.scale_amount", [](Config& c) -> double& { return c.augment.scale_amount; });
        bind_real(b, "augment.noise_prob", [](Config& c) -> double& { return c.augment.noise_prob; });
        bind_real(b, "augment.noise_sigma", [](Config& c) -> double& { return c.augment.noise_sigma; });

        bind_text(b, "data.train_manifest", [](Config& c) -> std::string& { return c.data.train_manifest; });
        bind_text(b, "data.pretrain_manifest", [](Config& c) -> std::string& { return c.data.pretrain_manifest; });

        b.push_back({"phantom.extent", [](const Config& c) { return extent_text(c.phantom.extent); },
                     [](Config& c, const std::string& v) { c.phantom.extent = to_extent("phantom.extent", v); }});
        bind_size(b, "phantom.num_modalities", [](Config& c) -> std::size_t& { return c.phantom.num_modalities; });
        bind_size(b, "phantom.num_labels", [](Config& c) -> std::size_t& { return c.phantom.num_labels; });
        bind_size(b, "phantom.lesions_min", [](Config& c) -> std::size_t& { return c.phantom.lesions_min; });
        bind_size(b, "phantom.lesions_max", [](Config& c) -> std::size_t& { return c.phantom.lesions_max; });
        bind_real(b, "phantom.radius_min", [](Config& c) -> double& { return c.phantom.radius_min; });
        bind_real(b, "phantom.radius_max", [](Config& c) -> double& { return c.phantom.radius_max; });
        bind_real(b, "phantom.noise_sigma", [](Config& c) -> double& { return c.phantom.noise_sigma; });
        bind_size(b, "phantom.anatomy_layers", [](Config& c) -> std::size_t& { return c.phantom.anatomy_layers; });
        bind_real(b, "phantom.anatomy_step", [](Config& c) -> double& { return c.phantom.anatomy_step; });
        b.push_back({"phantom.lesion_mean", [](const Config& c) { return table_text(c.phantom.lesion_mean); },
                     [](Config& c, const std::string& v) { c.phantom.lesion_mean = to_table("phantom.lesion_mean", v); }});
        b.push_back({"phantom.hidden", [](const Config& c) { return table_text(c.phantom.hidden); },
                     [](Config& c, const std::string& v) { c.phantom.hidden = to_table("phantom.hidden", v); }});
        b.push_back({"phantom.spacing_mm", [](const Config& c) { return triple_text(c.phantom.spacing_mm); },
                     [](Config& c, const std::string& v) { c.phantom.spacing_mm = to_triple("phantom.spacing_mm", v); }});

        bind_text(b, "eval.regions", [](Config& c) -> std::string& { return c.regions; });
        bind_real(b, "predict.overlap", [](Config& c) -> double& { return c.predict_overlap; });
        return b;
    }();
    return table;
}

void check_unit(const char* key, double v, bool open_low, bool open_high)
{
    const bool ok = (open_low ? v > 0.0 : v >= 0.0) && (open_high ? v < 1.0 : v <= 1.0);
    if (!ok) throw Error(ErrorCode::ConfigInvalid, std::string(key) + " = " + real_text(v) + " is out of range");
}

}  // namespace

void Config::validate() const
{
    model.validate();
    patch.check_divisible(model.num_levels);
    if (train.batch_size < 1) throw Error(ErrorCode::ConfigInvalid, "train.batch_size must be >= 1");
    if (train.epochs < 1) throw Error(ErrorCode::ConfigInvalid, "train.epochs must be >= 1");
    if (train.val_every < 1) throw Error(ErrorCode::ConfigInvalid, "train.val_every must be >= 1");
    check_unit("train.val_fraction", train.val_fraction, true, true);
    check_unit("train.foreground_prob", train.foreground_prob, false, false);
    loss.validate();
    for (const OptimConfig* o : {&train.optim, &ssl.optim}) {
        ScheduleSpec s = o->schedule;
        s.validate();
        if (!(o->momentum >= 0.0 && o->momentum < 1.0)) throw Error(ErrorCode::ConfigInvalid, "momentum must lie in [0,1)");
        if (!(o->weight_decay >= 0.0)) throw Error(ErrorCode::ConfigInvalid, "weight_decay must be >= 0");
        check_unit("beta1", o->beta1, false, true);
        check_unit("beta2", o->beta2, false, true);
        if (!(o->eps > 0.0)) throw Error(ErrorCode::ConfigInvalid, "eps must be > 0");
    }
    if (ssl.epochs < 1) throw Error(ErrorCode::ConfigInvalid, "ssl.epochs must be >= 1");
    if (ssl.batch_size < 2) throw Error(ErrorCode::ConfigInvalid, "ssl.batch_size must be >= 2 for contrastive coding");
    check_unit("ssl.mask_ratio", ssl.mask_ratio, true, true);
    for (std::size_t a = 0; a < 3; ++a) {
        if (ssl.mask_block[a] < 1 || ssl.mask_block[a] > patch.size[a]) {
            throw Error(ErrorCode::ConfigInvalid, "ssl.mask_block must fit inside patch.size");
        }
    }
    if (ssl.rotations < 1 || ssl.rotations > 4) throw Error(ErrorCode::ConfigInvalid, "ssl.rotations must lie in [1,4]");
    if (ssl.rotations > 1 && patch.size[1] != patch.size[2]) {
        throw Error(ErrorCode::ConfigInvalid, "axial rotation needs patch height == width");
    }
    if (!(ssl.temperature > 0.0)) throw Error(ErrorCode::ConfigInvalid, "ssl.temperature must be > 0");
    if (ssl.embedding_dim < 2) throw Error(ErrorCode::ConfigInvalid, "ssl.embedding_dim must be >= 2");
    for (double w : {ssl.weight_inpaint, ssl.weight_rotation, ssl.weight_contrastive}) {
        if (!(w >= 0.0)) throw Error(ErrorCode::ConfigInvalid, "ssl task weights must be >= 0");
    }
    check_unit("ssl.holdout_fraction", ssl.holdout_fraction, false, true);
    for (double p : augment.flip_prob) check_unit("augment.flip_prob", p, false, false);
    check_unit("augment.rotate_prob", augment.rotate_prob, false, false);
    check_unit("augment.scale_prob", augment.scale_prob, false, false);
    check_unit("augment.scale_amount", augment.scale_amount, false, true);
    check_unit("augment.noise_prob", augment.noise_prob, false, false);
    if (!(augment.noise_sigma >= 0.0)) throw Error(ErrorCode::ConfigInvalid, "augment.noise_sigma must be >= 0");
    check_unit("predict.overlap", predict_overlap, false, true);
    const auto regs = parse_regions(regions);
    for (const auto& r : regs) {
        for (auto l : r.labels) {
            if (static_cast<std::size_t>(l) >= model.num_labels) {
                throw Error(ErrorCode::ConfigInvalid, "region " + r.name + " uses label " + std::to_string(l) +
                                                          " outside the model's label range");
            }
        }
    }
}

std::map<std::string, std::string> Config::to_map() const
{
    std::map<std::string, std::string> kv;
    for (const auto& b : bindings()) kv[b.key] = b.get(*this);
    return kv;
}

Config Config::from_map(const std::map<std::string, std::string>& kv)
{
    Config c;
    for (const auto& [key, value] : kv) {
        const Binding* found = nullptr;
        for (const auto& b : bindings()) {
            if (b.key == key) {
                found = &b;
                break;
            }
        }
        if (!found) throw Error(ErrorCode::ConfigInvalid, "unknown config key '" + key + "'");
        found->set(c, value);
    }
    return c;
}

std::map<std::string, std::string> parse_config_text(std::string_view text)
{
    std::map<std::string, std::string> kv;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw Error(ErrorCode::ConfigInvalid, "config line " + std::to_string(line_no) + " has no '='");
        }
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (key.find('.') == std::string::npos) {
            throw Error(ErrorCode::ConfigInvalid, "config line " + std::to_string(line_no) + ": key '" + key +
                                                      "' is not of the form section.key");
        }
        if (!kv.emplace(key, value).second) {
            throw Error(ErrorCode::ConfigInvalid, "config line " + std::to_string(line_no) + ": duplicate key " + key);
        }
    }
    return kv;
}

Config load_config(std::string_view text)
{
    Config c = Config::from_map(parse_config_text(text));
    c.validate();
    return c;
}

Config load_config_file(const std::filesystem::path& path)
{
    const auto bytes = read_file_bytes(path);
    try {
        return load_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    } catch (const Error& e) {
        throw Error(e.code(), path.string() + ": " + e.what());
    }
}

std::string format_config(const Config& cfg)
{
    std::string s;
    for (const auto& [k, v] : cfg.to_map()) s += k + " = " + v + "\n";
    return s;
}

std::string key_help()
{
    return format_config(Config{});
}

}  // namespace modfuse
