#include "modfuse/rng.hpp"

#include <sstream>

#include "modfuse/error.hpp"

namespace modfuse {

SeededRng::SeededRng(std::uint64_t seed) : engine_(seed) {}

std::uint64_t SeededRng::next_u64()
{
    return engine_();
}

std::size_t SeededRng::uniform_index(std::size_t n)
{
    if (n == 0) throw Error(ErrorCode::InvalidArgument, "uniform_index over an empty range");
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    return dist(engine_);
}

std::int64_t SeededRng::uniform_int(std::int64_t lo, std::int64_t hi)
{
    if (hi < lo) throw Error(ErrorCode::InvalidArgument, "uniform_int with hi < lo");
    std::uniform_int_distribution<std::int64_t> dist(lo, hi);
    return dist(engine_);
}

double SeededRng::uniform(double lo, double hi)
{
    std::uniform_real_distribution<double> dist(lo, hi);
    return dist(engine_);
}

double SeededRng::normal(double mean, double stddev)
{
    std::normal_distribution<double> dist(mean, stddev);
    return dist(engine_);
}

bool SeededRng::bernoulli(double p)
{
    if (p <= 0.0) return false;
    if (p >= 1.0) return true;
    return uniform() < p;
}

std::string SeededRng::state() const
{
    std::ostringstream out;
    out << engine_;
    return out.str();
}

void SeededRng::set_state(const std::string& text)
{
    std::istringstream in(text);
    in >> engine_;
    if (in.fail()) throw Error(ErrorCode::InvalidArgument, "malformed RNG state");
}

}  // namespace modfuse
