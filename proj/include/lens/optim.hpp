// SPDX-License-Identifier: Apache-2.0
#ifndef LENS_OPTIM_HPP
#define LENS_OPTIM_HPP

#include <cmath>
#include <stdexcept>

#include "lens/types.hpp"

namespace lens {

// Linear warmup to lr_max, then cosine decay to zero at total_steps.
// With warmup, step 0 yields exactly zero.
inline double cosine_warmup_lr(std::int64_t step, std::int64_t total_steps,
                               double warmup_ratio, double lr_max) {
    if (total_steps < 1) throw std::invalid_argument("cosine_warmup_lr: total_steps < 1");
    if (warmup_ratio < 0.0 || warmup_ratio >= 1.0)
        throw std::invalid_argument("cosine_warmup_lr: warmup_ratio must be in [0, 1)");
    const auto warmup_steps =
        static_cast<std::int64_t>(warmup_ratio * static_cast<double>(total_steps));
    if (warmup_steps > 0 && step < warmup_steps)
        return lr_max * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const auto span = static_cast<double>(total_steps - warmup_steps);
    double progress = span > 0.0 ? static_cast<double>(step - warmup_steps) / span : 1.0;
    progress = std::min(progress, 1.0);
    return lr_max * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// Adam over a flat parameter vector. Indices below `frozen_prefix` are never
// touched, so frozen parameters stay bit-identical even with stale momentum.
template <class Scalar>
class Adam {
public:
    Adam(Index n_params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(static_cast<Scalar>(beta1)),
          beta2_(static_cast<Scalar>(beta2)),
          eps_(static_cast<Scalar>(eps)),
          m_(Vec<Scalar>::Zero(n_params)),
          v_(Vec<Scalar>::Zero(n_params)) {}

    void step(Vec<Scalar>& params, const Vec<Scalar>& grads, double lr,
              Index frozen_prefix = 0) {
        if (params.size() != m_.size() || grads.size() != m_.size())
            throw std::invalid_argument("Adam: size mismatch");
        ++t_;
        const Scalar bc1 = Scalar(1) - std::pow(beta1_, static_cast<Scalar>(t_));
        const Scalar bc2 = Scalar(1) - std::pow(beta2_, static_cast<Scalar>(t_));
        const Scalar alpha = static_cast<Scalar>(lr);
        for (Index i = frozen_prefix; i < params.size(); ++i) {
            const Scalar g = grads(i);
            m_(i) = beta1_ * m_(i) + (Scalar(1) - beta1_) * g;
            v_(i) = beta2_ * v_(i) + (Scalar(1) - beta2_) * g * g;
            const Scalar mhat = m_(i) / bc1;
            const Scalar vhat = v_(i) / bc2;
            params(i) -= alpha * mhat / (std::sqrt(vhat) + eps_);
        }
    }

    std::int64_t steps_taken() const { return t_; }

private:
    Scalar beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    Vec<Scalar> m_, v_;
};

} // namespace lens

#endif
