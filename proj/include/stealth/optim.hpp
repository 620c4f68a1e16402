#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace stealth {

// Adaptive-moment gradient descent over one flat parameter vector.
// Moment buffers are part of the optimizer state and serialize with it.
class Adam {
 public:
    Adam() = default;
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::vector<double>& params, const std::vector<double>& grads) {
        if (params.size() != grads.size())
            throw std::invalid_argument("optimizer: param/grad size mismatch");
        if (m_.empty()) {
            m_.assign(params.size(), 0.0);
            v_.assign(params.size(), 0.0);
        } else if (m_.size() != params.size()) {
            throw std::invalid_argument("optimizer: parameter count changed");
        }
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, (double)t_);
        const double c2 = 1.0 - std::pow(beta2_, (double)t_);
        for (size_t i = 0; i < params.size(); ++i) {
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
            const double mhat = m_[i] / c1;
            const double vhat = v_[i] / c2;
            params[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }

    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }
    std::int64_t steps_taken() const { return t_; }
    const std::vector<double>& m() const { return m_; }
    const std::vector<double>& v() const { return v_; }

    // Checkpoint restore.
    void restore(std::vector<double> m, std::vector<double> v, std::int64_t t) {
        if (m.size() != v.size())
            throw std::invalid_argument("optimizer: moment size mismatch");
        m_ = std::move(m);
        v_ = std::move(v);
        t_ = t;
    }

 private:
    double lr_ = 0.001;
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    std::vector<double> m_, v_;
    std::int64_t t_ = 0;
};

}  // namespace stealth
