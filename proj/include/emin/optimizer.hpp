#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "emin/common.hpp"

namespace emin {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Learning rate decays linearly from base_lr to 0 over total_steps; the final
// step uses exactly 0.
struct LinearSchedule {
  double base_lr = 1e-3;
  std::size_t total_steps = 1;

  double at(std::size_t step) const {
    if (total_steps <= 1) return step == 0 ? base_lr : 0.0;
    if (step >= total_steps) return 0.0;
    return base_lr * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps - 1));
  }
};

// Decoupled weight decay Adam with bias correction.
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::size_t n, AdamWConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grads, double lr) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw UsageError("optimizer state dimension mismatch");
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      const double g = grads[i];
      if (!std::isfinite(g))
        throw NumericalError("non-finite gradient at coordinate " + std::to_string(i));
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m_[i] / bc1;
      const double vhat = v_[i] / bc2;
      params[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * params[i]);
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  std::size_t step_count() const { return step_; }
  std::vector<double>& moment1() { return m_; }
  std::vector<double>& moment2() { return v_; }
  const std::vector<double>& moment1() const { return m_; }
  const std::vector<double>& moment2() const { return v_; }
  void restore(std::vector<double> m, std::vector<double> v, std::size_t steps) {
    m_ = std::move(m);
    v_ = std::move(v);
    step_ = steps;
  }

 private:
  AdamWConfig cfg_;
  std::vector<double> m_, v_;
  std::size_t step_ = 0;
};

}  // namespace emin
