#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dfbf/autodiff.hpp"
#include "dfbf/error.hpp"

namespace dfbf {

struct SgdSettings {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// SGD with heavy-ball momentum and L2 weight decay:
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - lr * v
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Var<T>> params, SgdSettings settings)
      : params_(std::move(params)), settings_(settings) {
    if (!(settings_.lr > 0)) throw ConfigError("sgd: lr must be positive");
    if (settings_.momentum < 0 || settings_.momentum >= 1) {
      throw ConfigError("sgd: momentum must be in [0,1)");
    }
    if (settings_.weight_decay < 0) throw ConfigError("sgd: weight_decay must be >= 0");
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.shape());
  }

  const SgdSettings& settings() const noexcept { return settings_; }
  void set_lr(double lr) {
    if (!(lr > 0)) throw ConfigError("sgd: lr must be positive");
    settings_.lr = lr;
  }
  std::size_t size() const noexcept { return params_.size(); }
  const std::vector<Tensor<T>>& velocity() const noexcept { return velocity_; }

  void step() {
    // Validate everything first so a failure leaves all parameters untouched.
    for (const auto& p : params_) {
      if (!p.has_grad()) {
        throw Error("sgd: missing gradient for parameter '" + p.name() + "'");
      }
      if (!p.grad().all_finite()) {
        throw NumericError("sgd: non-finite gradient for parameter '" + p.name() + "'");
      }
    }
    const T lr = static_cast<T>(settings_.lr);
    const T mom = static_cast<T>(settings_.momentum);
    const T wd = static_cast<T>(settings_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& value = params_[i].value();
      const auto& grad = params_[i].grad();
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < value.size(); ++j) {
        v[j] = mom * v[j] + grad[j] + wd * value[j];
        value[j] -= lr * v[j];
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Var<T>> params_;
  SgdSettings settings_;
  std::vector<Tensor<T>> velocity_;
};

}  // namespace dfbf
