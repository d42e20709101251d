#include "modfuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <sstream>

#include "modfuse/error.hpp"
#include "modfuse/nifti.hpp"

namespace modfuse {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

Blob Blob::tensor(std::string name, const Tensor& t)
{
    Blob b;
    b.name = std::move(name);
    b.type = BlobType::F64;
    b.extents.assign(t.shape().begin(), t.shape().end());
    b.f64 = t.values();
    return b;
}

Blob Blob::reals(std::string name, std::vector<double> values)
{
    Blob b;
    b.name = std::move(name);
    b.type = BlobType::F64;
    b.extents = {values.size()};
    b.f64 = std::move(values);
    return b;
}

Blob Blob::text(std::string name, std::string value)
{
    Blob b;
    b.name = std::move(name);
    b.type = BlobType::Bytes;
    b.extents = {value.size()};
    b.bytes = std::move(value);
    return b;
}

Tensor Blob::as_tensor() const
{
    if (type != BlobType::F64) throw Error(ErrorCode::BadHeader, "blob " + name + " is not a real tensor");
    if (f64.empty()) return Tensor();
    return Tensor(Shape(extents.begin(), extents.end()), f64);
}

const Blob* Checkpoint::find(const std::string& name) const
{
    for (const auto& b : blobs) {
        if (b.name == name) return &b;
    }
    return nullptr;
}

const Blob& Checkpoint::get(const std::string& name) const
{
    const Blob* b = find(name);
    if (!b) throw Error(ErrorCode::MissingParam, "checkpoint has no entry named " + name);
    return *b;
}

void Checkpoint::put(Blob blob)
{
    for (auto& b : blobs) {
        if (b.name == blob.name) {
            b = std::move(blob);
            return;
        }
    }
    blobs.push_back(std::move(blob));
}

namespace {

const char magic[4] = {'M', 'F', 'C', 'K'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T v)
{
    const auto at = out.size();
    out.resize(at + sizeof(T));
    std::memcpy(out.data() + at, &v, sizeof(T));
}

void put_bytes(std::vector<std::uint8_t>& out, const void* p, std::size_t n)
{
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
}

class Cursor {
public:
    explicit Cursor(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    bool done() const { return pos_ == bytes_.size(); }

    template <typename T>
    T get(const char* what)
    {
        T v;
        std::memcpy(&v, take(sizeof(T), what), sizeof(T));
        return v;
    }

    const std::uint8_t* take(std::size_t n, const char* what)
    {
        if (bytes_.size() - pos_ < n) {
            throw Error(ErrorCode::TruncatedData, std::string("checkpoint ends inside ") + what + " at byte " +
                                                      std::to_string(pos_));
        }
        const auto* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

std::string format_meta(const std::map<std::string, std::string>& meta)
{
    std::string s;
    for (const auto& [k, v] : meta) s += k + " = " + v + "\n";
    return s;
}

std::map<std::string, std::string> parse_meta(const std::string& text)
{
    std::map<std::string, std::string> meta;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) throw Error(ErrorCode::BadHeader, "malformed checkpoint config line: " + line);
        meta[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return meta;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck)
{
    std::vector<std::uint8_t> out;
    put_bytes(out, magic, 4);
    put<std::uint32_t>(out, ck.version);
    const std::string cfg = format_meta(ck.meta);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
    put_bytes(out, cfg.data(), cfg.size());
    for (const auto& b : ck.blobs) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(b.name.size()));
        put_bytes(out, b.name.data(), b.name.size());
        put<std::uint8_t>(out, static_cast<std::uint8_t>(b.type));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(b.extents.size()));
        std::uint64_t count = 1;
        for (auto e : b.extents) {
            put<std::uint64_t>(out, e);
            count *= e;
        }
        switch (b.type) {
        case BlobType::F64:
            if (b.f64.size() != count) throw Error(ErrorCode::InvalidArgument, "blob " + b.name + " extent mismatch");
            put_bytes(out, b.f64.data(), b.f64.size() * sizeof(double));
            break;
        case BlobType::I64:
            if (b.i64.size() != count) throw Error(ErrorCode::InvalidArgument, "blob " + b.name + " extent mismatch");
            put_bytes(out, b.i64.data(), b.i64.size() * sizeof(std::int64_t));
            break;
        case BlobType::Bytes:
            if (b.bytes.size() != count) throw Error(ErrorCode::InvalidArgument, "blob " + b.name + " extent mismatch");
            put_bytes(out, b.bytes.data(), b.bytes.size());
            break;
        }
    }
    return out;
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes)
{
    Cursor c(bytes);
    if (std::memcmp(c.take(4, "magic"), magic, 4) != 0) throw Error(ErrorCode::BadMagic, "not an MFCK checkpoint");
    Checkpoint ck;
    ck.version = c.get<std::uint32_t>("version");
    if (ck.version != checkpoint_version) {
        throw Error(ErrorCode::VersionMismatch, "checkpoint version " + std::to_string(ck.version) + ", reader supports " +
                                                    std::to_string(checkpoint_version));
    }
    const auto cfg_len = c.get<std::uint32_t>("config length");
    const auto* cfg = c.take(cfg_len, "config block");
    ck.meta = parse_meta(std::string(reinterpret_cast<const char*>(cfg), cfg_len));
    while (!c.done()) {
        Blob b;
        const auto name_len = c.get<std::uint32_t>("blob name length");
        const auto* name = c.take(name_len, "blob name");
        b.name.assign(reinterpret_cast<const char*>(name), name_len);
        const auto type = c.get<std::uint8_t>("blob type");
        if (type > 2) throw Error(ErrorCode::UnsupportedDatatype, "blob " + b.name + " has type code " + std::to_string(type));
        b.type = static_cast<BlobType>(type);
        const auto rank = c.get<std::uint32_t>("blob rank");
        if (rank > 8) throw Error(ErrorCode::BadHeader, "blob " + b.name + " has rank " + std::to_string(rank));
        std::uint64_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            b.extents.push_back(c.get<std::uint64_t>("blob extents"));
            count *= b.extents.back();
        }
        if (count > bytes.size()) throw Error(ErrorCode::TruncatedData, "blob " + b.name + " larger than the file");
        switch (b.type) {
        case BlobType::F64:
            b.f64.resize(count);
            std::memcpy(b.f64.data(), c.take(count * sizeof(double), "blob data"), count * sizeof(double));
            break;
        case BlobType::I64:
            b.i64.resize(count);
            std::memcpy(b.i64.data(), c.take(count * sizeof(std::int64_t), "blob data"), count * sizeof(std::int64_t));
            break;
        case BlobType::Bytes: {
            const auto* p = c.take(count, "blob data");
            b.bytes.assign(reinterpret_cast<const char*>(p), count);
            break;
        }
        }
        ck.blobs.push_back(std::move(b));
    }
    return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck)
{
    // Write then rename, so an interrupted run never leaves a torn checkpoint.
    const auto bytes = serialize_checkpoint(ck);
    auto tmp = path;
    tmp += ".tmp";
    write_file_bytes(tmp, bytes);
    std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path)
{
    const auto bytes = read_file_bytes(path);
    try {
        return parse_checkpoint(bytes);
    } catch (const Error& e) {
        throw Error(e.code(), path.string() + ": " + e.what());
    }
}

void store_model(Checkpoint& ck, const Model& model)
{
    for (const auto& [k, v] : model.config().to_map()) ck.meta[k] = v;
    for (const auto& p : model.params()) ck.put(Blob::tensor("param." + p.id, p.value));
}

const char* to_string(TransferMode m) noexcept
{
    return m == TransferMode::Replicate ? "replicate" : "per_modality";
}

TransferMode parse_transfer_mode(const std::string& s)
{
    if (s == "replicate") return TransferMode::Replicate;
    if (s == "per_modality") return TransferMode::PerModality;
    throw Error(ErrorCode::ConfigInvalid, "unknown transfer mode '" + s + "' (per_modality | replicate)");
}

ModelConfig stored_model_config(const Checkpoint& ck)
{
    std::map<std::string, std::string> kv;
    for (const auto& [k, v] : ck.meta) {
        if (k.rfind("model.", 0) == 0) kv[k] = v;
    }
    try {
        return ModelConfig::from_map(kv);
    } catch (const Error& e) {
        throw Error(ErrorCode::BadHeader, std::string("checkpoint model config: ") + e.what());
    }
}

namespace {

void copy_param(Param& dst, const Blob& src)
{
    const Tensor t = src.as_tensor();
    if (t.shape() != dst.value.shape()) {
        throw Error(ErrorCode::ConfigMismatch, "parameter " + dst.id + " has shape " + shape_string(dst.value.shape()) +
                                                   ", checkpoint holds " + shape_string(t.shape()));
    }
    dst.value = t;
}

}  // namespace

void load_encoders(Model& model, const Checkpoint& ck, TransferMode transfer)
{
    for (auto& p : model.params()) {
        if (!is_encoder_param(p.id)) continue;
        std::string src = p.id;
        if (transfer == TransferMode::Replicate) {
            src = encoder_prefix(0) + p.id.substr(p.id.find('.') + 1);
        }
        const Blob* b = ck.find("param." + src);
        if (!b) throw Error(ErrorCode::MissingParam, "checkpoint lacks encoder parameter " + src);
        copy_param(p, *b);
    }
}

Model load_model(const Checkpoint& ck, LoadMode mode, const ModelConfig* expected, SeededRng* rng,
                 TransferMode transfer)
{
    const ModelConfig stored = stored_model_config(ck);
    if (mode == LoadMode::Full) {
        if (expected && !(*expected == stored)) {
            std::string diff;
            const auto a = expected->to_map();
            const auto b = stored.to_map();
            for (const auto& [k, v] : a) {
                if (b.at(k) != v) diff += " " + k + " (expected " + v + ", stored " + b.at(k) + ")";
            }
            throw Error(ErrorCode::ConfigMismatch, "checkpoint config differs:" + diff);
        }
        SeededRng scratch(0);
        Model model(stored, scratch);
        for (auto& p : model.params()) {
            const Blob* b = ck.find("param." + p.id);
            if (!b) throw Error(ErrorCode::MissingParam, "checkpoint lacks parameter " + p.id);
            copy_param(p, *b);
        }
        return model;
    }
    if (!expected || !rng) throw Error(ErrorCode::InvalidArgument, "encoder-only load needs a target config and rng");
    if (expected->base_channels != stored.base_channels || expected->num_levels != stored.num_levels ||
        expected->encoder_in_channels() != stored.encoder_in_channels()) {
        throw Error(ErrorCode::ConfigMismatch, "encoder topology differs (base_channels, num_levels or input channels)");
    }
    Model model(*expected, *rng);
    load_encoders(model, ck, transfer);
    return model;
}

}  // namespace modfuse
