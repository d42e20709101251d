#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "modfuse/checkpoint.hpp"
#include "modfuse/layers.hpp"

namespace modfuse {

enum class ScheduleKind { Poly, Cosine };

struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::Poly;
    double eta0 = 1e-2;
    double total_epochs = 500;
    double power = 0.9;
    double eta_min = 0.0;

    void validate() const;
    double at(double epoch) const;
};

// eta0 * (1 - t/T)^power
double poly_lr(double t, const ScheduleSpec& s);
// eta_min + (eta0 - eta_min) * (1 + cos(pi t / T)) / 2
double cosine_lr(double t, const ScheduleSpec& s);

struct SgdState {
    double momentum = 0.95;
    double weight_decay = 3e-5;
    std::map<std::string, Tensor> buffers;
};

// Coupled decay: g' = grad + wd * value; buf = mu * buf + g'; value -= lr * buf.
void sgd_step(std::span<Param> params, SgdState& state, double lr);

struct AdamWState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
    std::uint64_t t = 0;
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
};

// Decoupled decay value -= lr * wd * value, then the bias-corrected Adam step.
void adamw_step(std::span<Param> params, AdamWState& state, double lr);

void sgd_step(std::span<Param* const> params, SgdState& state, double lr);
void adamw_step(std::span<Param* const> params, AdamWState& state, double lr);

enum class OptimizerKind { Sgd, AdamW };
const char* to_string(OptimizerKind k) noexcept;
OptimizerKind parse_optimizer_kind(const std::string& s);

struct Optimizer {
    OptimizerKind kind = OptimizerKind::Sgd;
    SgdState sgd;
    AdamWState adamw;

    void step(std::span<Param> params, double lr);
    // One step over several parameter groups (AdamW advances t once).
    void step(std::span<Param* const> params, double lr);
    // Blobs "optim.sgd.momentum.<id>", "optim.adamw.m.<id>", "optim.adamw.v.<id>"
    // plus the step counter and hyperparameters in meta.
    void store(Checkpoint& ck) const;
    void restore(const Checkpoint& ck);
};

}  // namespace modfuse
