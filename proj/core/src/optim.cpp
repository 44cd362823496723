#include "mergeforge/optim.hpp"

#include <cmath>

#include "mergeforge/errors.hpp"

namespace mergeforge {

Adam::Adam(AdamConfig config, size_t n) : config_(config), m_(n, 0.0), v_(n, 0.0) {
    if (config_.lr <= 0.0) throw ContractViolation("Adam learning rate must be positive");
}

void Adam::step(std::span<double> params, std::span<const double> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
        throw ContractViolation("Adam buffer size mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
        v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g * g;
        const double mhat = m_[i] / bc1;
        const double vhat = v_[i] / bc2;
        params[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
}

}  // namespace mergeforge
