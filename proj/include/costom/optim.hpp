#pragma once

#include "costom/autodiff.hpp"

#include <span>
#include <vector>

namespace costom {

struct AdamWConfig {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.01f;
};

/// Decoupled weight decay Adam over a fixed list of parameter tensors.
class AdamW {
public:
    AdamW(std::vector<ad::Tensor*> params, AdamWConfig cfg = {});

    /// grads[i] matches params[i]; a missing gradient counts as zero.
    void step(std::span<const ad::Tensor* const> grads, float lr);
    long steps_taken() const { return t_; }

private:
    std::vector<ad::Tensor*> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<float>> m_, v_;
    long t_ = 0;
};

/// Linear schedule: optional warmup to peak, then linear decay to zero at total_steps.
float linear_lr(float peak, long step, long total_steps, long warmup_steps = 0);

}  // namespace costom
