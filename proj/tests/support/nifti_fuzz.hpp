#pragma once
// Header manipulation helpers for the NIfTI tests. Offsets are restated here
// from the NIfTI-1 layout rather than taken from the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "modfuse/error.hpp"
#include "modfuse/nifti.hpp"
#include "modfuse/rng.hpp"

namespace fuzz {

using Bytes = std::vector<std::uint8_t>;

inline void reverse_at(Bytes& b, std::size_t off, std::size_t n)
{
    std::reverse(b.begin() + long(off), b.begin() + long(off + n));
}

inline std::int16_t read_i16(const Bytes& b, std::size_t off)
{
    std::int16_t v;
    std::memcpy(&v, b.data() + off, 2);
    return v;
}

// Re-encodes a little-endian file written by the library as big-endian.
inline Bytes byte_swap(Bytes b)
{
    const std::int16_t datatype = read_i16(b, 70);
    const std::size_t width = datatype == 4 ? 2 : datatype == 16 ? 4 : 8;
    reverse_at(b, 0, 4);                                   // sizeof_hdr
    for (std::size_t i = 0; i < 8; ++i) reverse_at(b, 40 + 2 * i, 2);   // dim
    reverse_at(b, 70, 2);                                  // datatype
    reverse_at(b, 72, 2);                                  // bitpix
    for (std::size_t i = 0; i < 8; ++i) reverse_at(b, 76 + 4 * i, 4);   // pixdim
    reverse_at(b, 108, 4);                                 // vox_offset
    reverse_at(b, 112, 4);                                 // scl_slope
    reverse_at(b, 116, 4);                                 // scl_inter
    for (std::size_t off = 352; off + width <= b.size(); off += width) reverse_at(b, off, width);
    return b;
}

struct CorruptionReport {
    std::size_t attempts = 0;
    std::vector<std::string> accepted;  // descriptions of corruptions that parsed
};

inline void attempt(const Bytes& bad, const std::string& what, CorruptionReport& r)
{
    ++r.attempts;
    try {
        modfuse::read_nifti(bad);
        if (r.accepted.size() < 20) r.accepted.push_back(what);
    } catch (const modfuse::Error&) {
    }
}

template <typename T>
void set_field(Bytes& b, std::size_t off, T v)
{
    std::memcpy(b.data() + off, &v, sizeof(T));
}

// Mutates one interpreted header field at a time: sizeof_hdr, dim[0..3],
// datatype, bitpix, vox_offset and each magic byte. Every 16-bit field is
// swept over all 65535 other values; the 32-bit fields get edge values plus
// `random_draws` random ones.
inline CorruptionReport corrupt_every_field(const Bytes& good, modfuse::SeededRng& rng, int random_draws)
{
    CorruptionReport r;
    const std::size_t i16_fields[] = {40, 42, 44, 46, 70, 72};
    for (std::size_t off : i16_fields) {
        const std::int16_t orig = read_i16(good, off);
        Bytes b = good;
        for (int v = std::numeric_limits<std::int16_t>::min(); v <= std::numeric_limits<std::int16_t>::max(); ++v) {
            if (v == orig) continue;
            set_field<std::int16_t>(b, off, std::int16_t(v));
            attempt(b, "int16 at " + std::to_string(off) + " = " + std::to_string(v), r);
        }
    }
    {
        std::vector<std::int32_t> vals = {0, -1, 1, 347, 349, 540, 1543503872, std::numeric_limits<std::int32_t>::min(),
                                          std::numeric_limits<std::int32_t>::max()};
        for (int i = 0; i < random_draws; ++i) vals.push_back(std::int32_t(rng.next_u64()));
        for (auto v : vals) {
            if (v == 348) continue;
            Bytes b = good;
            set_field<std::int32_t>(b, 0, v);
            attempt(b, "sizeof_hdr = " + std::to_string(v), r);
        }
    }
    {
        std::vector<float> vals = {0.0f, -352.0f, 351.0f, 352.5f, 353.0f, 356.0f, 1e9f,
                                   std::numeric_limits<float>::quiet_NaN(), std::numeric_limits<float>::infinity()};
        for (int i = 0; i < random_draws; ++i) vals.push_back(float(rng.uniform(-1e6, 1e6)));
        for (auto v : vals) {
            if (v == 352.0f) continue;
            Bytes b = good;
            set_field<float>(b, 108, v);
            attempt(b, "vox_offset = " + std::to_string(v), r);
        }
    }
    for (std::size_t k = 0; k < 4; ++k) {
        for (int v = 0; v < 256; ++v) {
            if (v == good[344 + k]) continue;
            Bytes b = good;
            b[344 + k] = std::uint8_t(v);
            attempt(b, "magic[" + std::to_string(k) + "] = " + std::to_string(v), r);
        }
    }
    return r;
}

}  // namespace fuzz
