#include <doctest.h>

#include <cmath>

#include "modfuse/error.hpp"
#include "modfuse/optim.hpp"
#include "oracles.hpp"

using namespace modfuse;

namespace {

ScheduleSpec spec(ScheduleKind k, double eta0, double T, double eta_min = 0.0)
{
    ScheduleSpec s;
    s.kind = k;
    s.eta0 = eta0;
    s.total_epochs = T;
    s.eta_min = eta_min;
    return s;
}

std::vector<Param> scalar_param(double v, double g)
{
    std::vector<Param> p;
    p.emplace_back("x", Tensor({1}, v));
    p[0].grad = Tensor({1}, g);
    return p;
}

}  // namespace

TEST_CASE("poly schedule")
{
    const auto s = spec(ScheduleKind::Poly, 1e-2, 200);
    CHECK(poly_lr(0, s) == 1e-2);
    CHECK(poly_lr(200, s) == 0.0);
    CHECK(std::abs(poly_lr(100, s) - 5.3589e-3) < 1e-7);
    CHECK(std::abs(poly_lr(100, s) - 1e-2 * std::pow(0.5, 0.9)) < 1e-15);
    for (double t : {-1.0, 200.5}) {
        try {
            poly_lr(t, s);
            FAIL("accepted epoch " << t);
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::EpochOutOfRange);
        }
    }
}

TEST_CASE("cosine schedule")
{
    const auto s = spec(ScheduleKind::Cosine, 3e-4, 50, 1e-6);
    CHECK(std::abs(cosine_lr(0, s) - 3e-4) < 1e-18);
    CHECK(std::abs(cosine_lr(50, s) - 1e-6) < 1e-18);
    CHECK(std::abs(cosine_lr(25, spec(ScheduleKind::Cosine, 3e-4, 50)) - 1.5e-4) < 1e-15);
    CHECK_THROWS_AS(cosine_lr(51, s), Error);
}

TEST_CASE("schedules decrease strictly")
{
    for (auto kind : {ScheduleKind::Poly, ScheduleKind::Cosine}) {
        const auto s = spec(kind, 1e-2, 100, 1e-4);
        double prev = s.at(0);
        for (int t = 1; t <= 100; ++t) {
            const double cur = s.at(t);
            CHECK(cur < prev);
            prev = cur;
        }
    }
    CHECK_THROWS_AS(spec(ScheduleKind::Poly, 0.0, 10).validate(), Error);
    CHECK_THROWS_AS(spec(ScheduleKind::Poly, 1e-2, 0.5).validate(), Error);
}

TEST_CASE("sgd hand-traced steps")
{
    SgdState st;
    st.momentum = 0.0;
    st.weight_decay = 0.0;
    auto p = scalar_param(1.0, 1.0);
    sgd_step(p, st, 0.1);
    CHECK(std::abs(p[0].value[0] - 0.9) < 1e-15);

    SgdState z;
    z.weight_decay = 0.0;
    auto q = scalar_param(0.5, 0.0);
    sgd_step(q, z, 0.1);
    CHECK(q[0].value[0] == 0.5);

    // Constant gradient 1, mu = 0.95: buf1 = 1, buf2 = 1.95.
    SgdState m;
    m.weight_decay = 0.0;
    auto r = scalar_param(2.0, 1.0);
    sgd_step(r, m, 0.1);
    sgd_step(r, m, 0.1);
    CHECK(std::abs(m.buffers.at("x")[0] - 1.95) < 1e-15);
    CHECK(std::abs(r[0].value[0] - (2.0 - 0.1 * (1.0 + 1.95))) < 1e-15);

    // Coupled decay adds wd * value to the gradient.
    SgdState d;
    d.momentum = 0.0;
    d.weight_decay = 0.5;
    auto w = scalar_param(2.0, 0.0);
    sgd_step(w, d, 0.1);
    CHECK(std::abs(w[0].value[0] - (2.0 - 0.1 * 1.0)) < 1e-15);
}

TEST_CASE("sgd on a quadratic follows the heavy-ball recurrence")
{
    // f(x) = 0.5 |x|^2 from x0 = 1, lr 0.1, mu 0.95. The iterate decays like
    // sqrt(0.95)^k with oscillation; |x| stays below 1e-3 only from step 266 on.
    SgdState st;
    st.weight_decay = 0.0;
    std::vector<Param> p;
    p.emplace_back("x", Tensor({1}, 1.0));
    double x = 1.0, buf = 0.0;
    for (int k = 1; k <= 400; ++k) {
        p[0].grad = p[0].value;
        sgd_step(p, st, 0.1);
        buf = 0.95 * buf + x;
        x -= 0.1 * buf;
        CHECK(std::abs(p[0].value[0] - x) <= 1e-15);
        if (k >= 266) CHECK(std::abs(p[0].value[0]) < 1e-3);
    }
    CHECK(std::abs(p[0].value[0]) < 1e-4);
}

TEST_CASE("adamw first step and decoupled decay")
{
    for (double g : {1.0, -3.0, 250.0}) {
        AdamWState st;
        st.weight_decay = 0.0;
        auto p = scalar_param(0.3, g);
        adamw_step(p, st, 1e-3);
        const double delta = p[0].value[0] - 0.3;
        CHECK(std::abs(delta + 1e-3 * (g > 0 ? 1 : -1)) < 1e-3 * 1e-3);
        CHECK(st.t == 1);
    }
    AdamWState st;
    st.weight_decay = 0.01;
    auto p = scalar_param(4.0, 0.0);
    adamw_step(p, st, 0.1);
    CHECK(std::abs(p[0].value[0] - 4.0 * (1.0 - 0.1 * 0.01)) < 1e-15);
}

TEST_CASE("adamw moments stay finite over random steps")
{
    SeededRng rng(0);
    AdamWState st;
    std::vector<Param> p;
    p.emplace_back("w", oracle::random_tensor({16}, rng));
    for (int i = 0; i < 1000; ++i) {
        p[0].grad = oracle::random_tensor({16}, rng, -100, 100);
        adamw_step(p, st, 1e-3);
    }
    for (double v : st.v.at("w").data()) CHECK((std::isfinite(v) && v >= 0.0));
    for (double m : st.m.at("w").data()) CHECK(std::isfinite(m));
    CHECK(st.t == 1000);
}

TEST_CASE("optimizer state round-trips through a checkpoint")
{
    for (auto kind : {OptimizerKind::Sgd, OptimizerKind::AdamW}) {
        SeededRng rng(3);
        std::vector<Param> a;
        a.emplace_back("p.a", oracle::random_tensor({3, 2}, rng));
        a.emplace_back("p.b", oracle::random_tensor({5}, rng));
        Optimizer opt;
        opt.kind = kind;
        for (int i = 0; i < 3; ++i) {
            for (auto& p : a) p.grad = oracle::random_tensor(p.value.shape(), rng);
            opt.step(a, 1e-2);
        }
        Checkpoint ck;
        opt.store(ck);
        const auto bytes = serialize_checkpoint(ck);
        Optimizer back;
        back.kind = kind;
        back.restore(parse_checkpoint(bytes));
        CHECK(back.kind == kind);
        Checkpoint again;
        back.store(again);
        CHECK(serialize_checkpoint(again) == bytes);

        // Continuing from the restored state matches continuing the original.
        auto b = a;
        for (auto& p : a) p.grad = oracle::random_tensor(p.value.shape(), rng);
        for (std::size_t i = 0; i < a.size(); ++i) b[i].grad = a[i].grad;
        opt.step(a, 1e-2);
        back.step(b, 1e-2);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].value == b[i].value);
    }
    Optimizer wrong;
    wrong.kind = OptimizerKind::AdamW;
    Checkpoint sgd_ck;
    Optimizer{}.store(sgd_ck);
    CHECK_THROWS_AS(wrong.restore(sgd_ck), Error);
    CHECK(parse_optimizer_kind("adamw") == OptimizerKind::AdamW);
    CHECK_THROWS_AS(parse_optimizer_kind("rmsprop"), Error);
}
