#include "modnet/nn/optimizer.hpp"

#include <cmath>

namespace modnet::nn {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd-momentum"; }

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd-momentum" || s == "sgd") return OptimizerKind::sgd_momentum;
  throw ConfigError("unknown optimizer '" + s + "'");
}

double OptimizerConfig::lr_at(std::int64_t step) const {
  return learning_rate * std::pow(lr_decay_factor, static_cast<double>(step / lr_decay_every));
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0,1)");
  if (weight_decay < 0) throw ConfigError("weight decay must be non-negative");
  if (lr_decay_every <= 0) throw ConfigError("lr_decay_every must be positive");
  if (!(lr_decay_factor > 0) || lr_decay_factor > 1) throw ConfigError("lr_decay_factor must lie in (0,1]");
}

OptimizerConfig OptimizerConfig::sgd(double lr, double momentum, double weight_decay, std::int64_t decay_every,
                                     double decay_factor) {
  OptimizerConfig c;
  c.kind = OptimizerKind::sgd_momentum;
  c.learning_rate = lr;
  c.momentum = momentum;
  c.weight_decay = weight_decay;
  c.lr_decay_every = decay_every;
  c.lr_decay_factor = decay_factor;
  return c;
}

OptimizerConfig OptimizerConfig::adam(double lr) {
  OptimizerConfig c;
  c.kind = OptimizerKind::adam;
  c.learning_rate = lr;
  c.momentum = 0.0;
  c.weight_decay = 0.0;
  c.lr_decay_every = 1 << 30;
  c.lr_decay_factor = 1.0;
  return c;
}

template <typename T>
void OptimizerState<T>::step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads,
                             std::int64_t step_index) {
  if (params.size() != grads.size()) throw ShapeError("optimizer: parameter/gradient count mismatch");
  if (first_.empty()) {
    first_.resize(params.size());
    second_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      first_[i].assign(params[i]->size(), T{0});
      if (config_.kind == OptimizerKind::adam) second_[i].assign(params[i]->size(), T{0});
    }
  }
  if (first_.size() != params.size()) throw ShapeError("optimizer state bound to a different tensor list");

  const T lr = static_cast<T>(config_.lr_at(step_index));
  const T wd = static_cast<T>(config_.weight_decay);
  if (config_.kind == OptimizerKind::sgd_momentum) {
    const T mom = static_cast<T>(config_.momentum);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& w = *params[i];
      const auto& g = *grads[i];
      if (g.shape() != w.shape()) throw ShapeError("optimizer: gradient shape mismatch");
      auto& v = first_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = mom * v[j] + (g[j] + wd * w[j]);
        w[j] -= lr * v[j];
      }
    }
    return;
  }

  ++adam_steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const T c1 = static_cast<T>(1.0 - std::pow(b1, static_cast<double>(adam_steps_)));
  const T c2 = static_cast<T>(1.0 - std::pow(b2, static_cast<double>(adam_steps_)));
  const T tb1 = static_cast<T>(b1), tb2 = static_cast<T>(b2), eps = static_cast<T>(config_.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = *params[i];
    const auto& g = *grads[i];
    if (g.shape() != w.shape()) throw ShapeError("optimizer: gradient shape mismatch");
    auto& m = first_[i];
    auto& s = second_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T gj = g[j] + wd * w[j];
      m[j] = tb1 * m[j] + (T{1} - tb1) * gj;
      s[j] = tb2 * s[j] + (T{1} - tb2) * gj * gj;
      const T mh = m[j] / c1, sh = s[j] / c2;
      w[j] -= lr * mh / (std::sqrt(sh) + eps);
    }
  }
}

template class OptimizerState<float>;
template class OptimizerState<double>;

}  // namespace modnet::nn
