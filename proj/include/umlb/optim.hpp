#pragma once

// Pluggable update rules. Plain gradient descent realizes the literal masked
// update equation; AdamW matches the reported training protocol. State is
// keyed by parameter name so an optimizer can serve block-wise or full-model
// updates alike.

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "umlb/tensor.hpp"
#include "umlb/util.hpp"

namespace umlb {

template <typename T>
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void apply(const std::string& key, Tensor<T>& param, const T* grad) = 0;
  virtual void reset() {}
  virtual double learning_rate() const = 0;
};

template <typename T>
class SgdOptimizer final : public Optimizer<T> {
 public:
  explicit SgdOptimizer(double lr) : lr_(lr) {
    if (lr < 0.0) throw InvalidInput("sgd: learning rate must be nonnegative");
  }

  void apply(const std::string&, Tensor<T>& param, const T* grad) override {
    const T a = static_cast<T>(lr_);
    for (size_t i = 0; i < param.data.size(); ++i) param.data[i] -= a * grad[i];
  }

  double learning_rate() const override { return lr_; }

 private:
  double lr_;
};

template <typename T>
class AdamWOptimizer final : public Optimizer<T> {
 public:
  AdamWOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                 double weight_decay = 0.0)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    if (lr < 0.0) throw InvalidInput("adamw: learning rate must be nonnegative");
  }

  void apply(const std::string& key, Tensor<T>& param, const T* grad) override {
    State& s = states_[key];
    if (s.m.size() != param.numel()) {
      s.m.assign(param.numel(), T(0));
      s.v.assign(param.numel(), T(0));
      s.t = 0;
    }
    ++s.t;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(s.t));
    for (size_t i = 0; i < param.data.size(); ++i) {
      double gi = static_cast<double>(grad[i]);
      double m = beta1_ * static_cast<double>(s.m[i]) + (1.0 - beta1_) * gi;
      double v = beta2_ * static_cast<double>(s.v[i]) + (1.0 - beta2_) * gi * gi;
      s.m[i] = static_cast<T>(m);
      s.v[i] = static_cast<T>(v);
      double update = (m / bc1) / (std::sqrt(v / bc2) + eps_);
      double p = static_cast<double>(param.data[i]);
      param.data[i] = static_cast<T>(p - lr_ * (update + weight_decay_ * p));
    }
  }

  // Moment state does not survive a mask change.
  void reset() override { states_.clear(); }

  double learning_rate() const override { return lr_; }

 private:
  struct State {
    std::vector<T> m, v;
    int64_t t = 0;
  };
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  std::unordered_map<std::string, State> states_;
};

}  // namespace umlb
