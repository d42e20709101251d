#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "modfuse/model.hpp"
#include "modfuse/tensor.hpp"

namespace modfuse {

inline constexpr std::uint32_t checkpoint_version = 1;

enum class BlobType : std::uint8_t { F64 = 0, I64 = 1, Bytes = 2 };

struct Blob {
    std::string name;
    BlobType type = BlobType::F64;
    std::vector<std::uint64_t> extents;
    std::vector<double> f64;
    std::vector<std::int64_t> i64;
    std::string bytes;

    static Blob tensor(std::string name, const Tensor& t);
    static Blob reals(std::string name, std::vector<double> values);
    static Blob text(std::string name, std::string value);
    Tensor as_tensor() const;

    friend bool operator==(const Blob&, const Blob&) = default;
};

// Container layout: "MFCK", u32 version, u32 config length + UTF-8 config
// block ("key = value" lines), then blobs until end of file. Each blob is
// u32 name length, name, u8 type, u32 rank, u64 extents, little-endian data.
struct Checkpoint {
    std::uint32_t version = checkpoint_version;
    std::map<std::string, std::string> meta;
    std::vector<Blob> blobs;

    const Blob* find(const std::string& name) const;
    const Blob& get(const std::string& name) const;  // MissingParam when absent
    void put(Blob blob);                             // replaces a blob of the same name

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Parameters are stored as "param.<id>"; the model config goes into meta.
void store_model(Checkpoint& ck, const Model& model);

enum class LoadMode { Full, EncodersOnly };
// PerModality copies encoder m from source encoder m; Replicate copies source
// encoder 0 into every target encoder.
enum class TransferMode { PerModality, Replicate };

const char* to_string(TransferMode m) noexcept;
TransferMode parse_transfer_mode(const std::string& s);

// Full: rebuilds the stored model bit-exactly; `expected` (when given) must
// match the stored config. EncodersOnly: builds a fresh `target` model from
// rng and overwrites its encoder parameters from the checkpoint.
Model load_model(const Checkpoint& ck, LoadMode mode, const ModelConfig* expected = nullptr,
                 SeededRng* rng = nullptr, TransferMode transfer = TransferMode::PerModality);

// Copies encoder tensors from ck into model (used by load_model and by trainers
// that initialise from a pretraining checkpoint).
void load_encoders(Model& model, const Checkpoint& ck, TransferMode transfer);

ModelConfig stored_model_config(const Checkpoint& ck);

}  // namespace modfuse
