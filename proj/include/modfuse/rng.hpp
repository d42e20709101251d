#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace modfuse {

// Seeded pseudo-random source. Distributions are constructed per draw so the
// engine state alone determines every future value; that state round-trips
// through state()/set_state() and is what checkpoints persist.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed = 0);

    std::uint64_t next_u64();
    // Uniform integer in [0, n).
    std::size_t uniform_index(std::size_t n);
    // Uniform integer in [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
    double uniform(double lo = 0.0, double hi = 1.0);
    double normal(double mean = 0.0, double stddev = 1.0);
    bool bernoulli(double p);

    // Seed for a child generator (per worker, per epoch, per case).
    std::uint64_t derive_seed() { return next_u64(); }

    std::string state() const;
    void set_state(const std::string& text);

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace modfuse
