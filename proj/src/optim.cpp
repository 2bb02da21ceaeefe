#include "costom/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace costom {

AdamW::AdamW(std::vector<ad::Tensor*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const ad::Tensor* p : params_) {
        m_.emplace_back(p->size(), 0.0f);
        v_.emplace_back(p->size(), 0.0f);
    }
}

void AdamW::step(std::span<const ad::Tensor* const> grads, float lr) {
    if (grads.size() != params_.size()) throw std::invalid_argument("AdamW: gradient count does not match parameters");
    ++t_;
    const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i]->data;
        auto& m = m_[i];
        auto& v = v_[i];
        const ad::Tensor* g = grads[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            const float gk = g != nullptr ? g->data[k] : 0.0f;
            m[k] = cfg_.beta1 * m[k] + (1.0f - cfg_.beta1) * gk;
            v[k] = cfg_.beta2 * v[k] + (1.0f - cfg_.beta2) * gk * gk;
            const float mhat = m[k] / bc1;
            const float vhat = v[k] / bc2;
            p[k] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[k]);
        }
    }
}

float linear_lr(float peak, long step, long total_steps, long warmup_steps) {
    if (total_steps <= 0) return peak;
    if (warmup_steps > 0 && step < warmup_steps) {
        return peak * static_cast<float>(step + 1) / static_cast<float>(warmup_steps);
    }
    const long span = std::max<long>(1, total_steps - warmup_steps);
    const float frac = static_cast<float>(step - warmup_steps) / static_cast<float>(span);
    return peak * std::max(0.0f, 1.0f - frac);
}

}  // namespace costom
