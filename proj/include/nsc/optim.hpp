#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace nsc {

// Adam with decoupled weight decay over a flat parameter vector.
struct AdamW {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    void init(std::size_t n) {
        m_.assign(n, 0.0);
        v_.assign(n, 0.0);
        t_ = 0;
    }

    void step(std::span<double> params, std::span<const double> grads) {
        if (params.size() != m_.size() || grads.size() != m_.size())
            throw std::invalid_argument("AdamW: parameter count changed after init");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            double g = grads[i];
            m_[i] = beta1 * m_[i] + (1.0 - beta1) * g;
            v_[i] = beta2 * v_[i] + (1.0 - beta2) * g * g;
            double mhat = m_[i] / bc1;
            double vhat = v_[i] / bc2;
            params[i] -= lr * mhat / (std::sqrt(vhat) + eps) + lr * weight_decay * params[i];
        }
    }

private:
    std::vector<double> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace nsc
