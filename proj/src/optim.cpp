#include "modfuse/optim.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <vector>

#include "modfuse/error.hpp"

namespace modfuse {

void ScheduleSpec::validate() const
{
    if (!(total_epochs >= 1.0)) throw Error(ErrorCode::ConfigInvalid, "schedule needs total_epochs >= 1");
    if (!(eta0 > 0.0)) throw Error(ErrorCode::ConfigInvalid, "schedule needs eta0 > 0");
    if (!(eta_min >= 0.0)) throw Error(ErrorCode::ConfigInvalid, "schedule needs eta_min >= 0");
}

double ScheduleSpec::at(double epoch) const
{
    return kind == ScheduleKind::Poly ? poly_lr(epoch, *this) : cosine_lr(epoch, *this);
}

namespace {

void check_epoch(double t, const ScheduleSpec& s)
{
    s.validate();
    if (!(t >= 0.0 && t <= s.total_epochs)) {
        std::ostringstream msg;
        msg << "epoch " << t << " outside [0, " << s.total_epochs << "]";
        throw Error(ErrorCode::EpochOutOfRange, msg.str());
    }
}

}  // namespace

double poly_lr(double t, const ScheduleSpec& s)
{
    check_epoch(t, s);
    return s.eta0 * std::pow(1.0 - t / s.total_epochs, s.power);
}

double cosine_lr(double t, const ScheduleSpec& s)
{
    check_epoch(t, s);
    return s.eta_min + 0.5 * (s.eta0 - s.eta_min) * (1.0 + std::cos(std::numbers::pi * t / s.total_epochs));
}

namespace {

Tensor& slot(std::map<std::string, Tensor>& m, const Param& p)
{
    auto it = m.find(p.id);
    if (it == m.end()) it = m.emplace(p.id, Tensor(p.value.shape(), 0.0)).first;
    return it->second;
}

}  // namespace

namespace {

std::vector<Param*> pointers(std::span<Param> params)
{
    std::vector<Param*> out;
    for (auto& p : params) out.push_back(&p);
    return out;
}

}  // namespace

void sgd_step(std::span<Param> params, SgdState& state, double lr)
{
    sgd_step(pointers(params), state, lr);
}

void adamw_step(std::span<Param> params, AdamWState& state, double lr)
{
    adamw_step(pointers(params), state, lr);
}

void sgd_step(std::span<Param* const> params, SgdState& state, double lr)
{
    for (Param* pp : params) {
        Param& p = *pp;
        Tensor& buf = slot(state.buffers, p);
        double* v = p.value.ptr();
        const double* g = p.grad.ptr();
        double* b = buf.ptr();
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double gd = g[i] + state.weight_decay * v[i];
            b[i] = state.momentum * b[i] + gd;
            v[i] -= lr * b[i];
        }
    }
}

void adamw_step(std::span<Param* const> params, AdamWState& state, double lr)
{
    ++state.t;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (Param* pp : params) {
        Param& p = *pp;
        Tensor& m = slot(state.m, p);
        Tensor& v = slot(state.v, p);
        double* x = p.value.ptr();
        const double* g = p.grad.ptr();
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            x[i] -= lr * state.weight_decay * x[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
        }
    }
}

const char* to_string(OptimizerKind k) noexcept
{
    return k == OptimizerKind::AdamW ? "adamw" : "sgd";
}

OptimizerKind parse_optimizer_kind(const std::string& s)
{
    if (s == "sgd") return OptimizerKind::Sgd;
    if (s == "adamw") return OptimizerKind::AdamW;
    throw Error(ErrorCode::ConfigInvalid, "unknown optimizer '" + s + "' (sgd | adamw)");
}

void Optimizer::step(std::span<Param> params, double lr)
{
    step(pointers(params), lr);
}

void Optimizer::step(std::span<Param* const> params, double lr)
{
    if (kind == OptimizerKind::Sgd) {
        sgd_step(params, sgd, lr);
    } else {
        adamw_step(params, adamw, lr);
    }
}

void Optimizer::store(Checkpoint& ck) const
{
    ck.meta["optim.kind"] = to_string(kind);
    if (kind == OptimizerKind::Sgd) {
        for (const auto& [id, t] : sgd.buffers) ck.put(Blob::tensor("optim.sgd.momentum." + id, t));
    } else {
        ck.meta["optim.adamw.t"] = std::to_string(adamw.t);
        for (const auto& [id, t] : adamw.m) ck.put(Blob::tensor("optim.adamw.m." + id, t));
        for (const auto& [id, t] : adamw.v) ck.put(Blob::tensor("optim.adamw.v." + id, t));
    }
}

void Optimizer::restore(const Checkpoint& ck)
{
    const auto it = ck.meta.find("optim.kind");
    if (it == ck.meta.end()) throw Error(ErrorCode::MissingParam, "checkpoint has no optimizer state");
    if (parse_optimizer_kind(it->second) != kind) {
        throw Error(ErrorCode::ConfigMismatch, "checkpoint optimizer is " + it->second + ", config asks for " +
                                                   to_string(kind));
    }
    auto take = [&](const std::string& prefix, std::map<std::string, Tensor>& into) {
        into.clear();
        for (const auto& b : ck.blobs) {
            if (b.name.rfind(prefix, 0) == 0) into[b.name.substr(prefix.size())] = b.as_tensor();
        }
    };
    if (kind == OptimizerKind::Sgd) {
        take("optim.sgd.momentum.", sgd.buffers);
    } else {
        adamw.t = std::stoull(ck.meta.at("optim.adamw.t"));
        take("optim.adamw.m.", adamw.m);
        take("optim.adamw.v.", adamw.v);
    }
}

}  // namespace modfuse
