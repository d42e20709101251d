#include <doctest.h>

#include <atomic>
#include <set>

#include "modfuse/error.hpp"
#include "modfuse/parallel.hpp"
#include "modfuse/rng.hpp"
#include "modfuse/tensor.hpp"

using namespace modfuse;

TEST_CASE("tensor shape and indexing")
{
    Tensor t({2, 3, 4});
    CHECK(t.size() == 24);
    CHECK(t.rank() == 3);
    CHECK(t.inner_size() == 12);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = double(i);
    // Multi-index access is the row-major flat lookup.
    for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 3; ++b)
            for (std::size_t c = 0; c < 4; ++c) CHECK(t.at({a, b, c}) == double((a * 3 + b) * 4 + c));
    const auto idx = t.unflatten(17);
    CHECK(idx == std::vector<std::size_t>{1, 1, 1});
    CHECK(t.flat_index(idx) == 17);
}

TEST_CASE("tensor rejects bad shapes")
{
    CHECK_THROWS_AS(Tensor({2, 0, 3}), Error);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>(3)), Error);
    CHECK_THROWS_AS(Tensor({1, 1, 1, 1, 1, 1}), Error);
    Tensor t({2, 2});
    CHECK_THROWS_AS(t.at({2, 0}), Error);
    CHECK_THROWS_AS(t.reshaped({3}), Error);
}

TEST_CASE("tensor helpers")
{
    Tensor a({3}, std::vector<double>{1, 2, 3});
    Tensor b({3}, std::vector<double>{4, 5, 6});
    CHECK(dot(a, b) == 32.0);
    CHECK(sum(a) == 6.0);
    CHECK(max_abs_diff(a, b) == 3.0);
    axpy(a, b, 2.0);
    CHECK(a == Tensor({3}, std::vector<double>{9, 12, 15}));
    CHECK_THROWS_AS(axpy(a, Tensor({2})), Error);
}

TEST_CASE("rng is deterministic and its state round-trips")
{
    SeededRng a(7), b(7);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    const std::string s = a.state();
    std::vector<double> first;
    for (int i = 0; i < 20; ++i) first.push_back(a.normal());
    SeededRng c(999);
    c.set_state(s);
    for (int i = 0; i < 20; ++i) CHECK(c.normal() == first[std::size_t(i)]);
    CHECK_THROWS_AS(c.set_state("not a state"), Error);
}

TEST_CASE("rng draws stay in range")
{
    SeededRng r(3);
    std::set<std::size_t> seen;
    for (int i = 0; i < 2000; ++i) {
        const auto k = r.uniform_index(5);
        CHECK(k < 5);
        seen.insert(k);
        const auto v = r.uniform_int(-2, 2);
        CHECK((v >= -2 && v <= 2));
        const double u = r.uniform(1.0, 2.0);
        CHECK((u >= 1.0 && u < 2.0));
    }
    CHECK(seen.size() == 5);
    // Certain outcomes consume no draws.
    SeededRng p(5), q(5);
    CHECK(p.bernoulli(1.0));
    CHECK_FALSE(p.bernoulli(0.0));
    CHECK(p.next_u64() == q.next_u64());
}

TEST_CASE("parallel_for covers every index once at any worker count")
{
    const std::size_t keep = num_threads();
    for (std::size_t w : {1u, 2u, 5u}) {
        set_num_threads(w);
        std::vector<std::atomic<int>> hits(97);
        parallel_for(hits.size(), [&](std::size_t i) { hits[i]++; });
        for (auto& h : hits) CHECK(h.load() == 1);
    }
    set_num_threads(2);
    CHECK_THROWS_AS(parallel_for(10, [](std::size_t i) {
                        if (i == 3) throw Error(ErrorCode::InvalidArgument, "boom");
                    }),
                    Error);
    set_num_threads(keep);
}

TEST_CASE("error carries its code")
{
    const Error e(ErrorCode::ConfigInvalid, "bad");
    CHECK(e.code() == ErrorCode::ConfigInvalid);
    CHECK(std::string(to_string(ErrorCode::TruncatedData)) == "TruncatedData");
    CHECK(is_config_error(ErrorCode::ConfigInvalid));
    CHECK_FALSE(is_config_error(ErrorCode::TruncatedData));
}
