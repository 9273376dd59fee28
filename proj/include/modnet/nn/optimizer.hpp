#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "modnet/tensor.hpp"

namespace modnet::nn {

enum class OptimizerKind { sgd_momentum, adam };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::int64_t lr_decay_every = 600;
  double lr_decay_factor = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  /// learning_rate * lr_decay_factor^floor(step / lr_decay_every)
  double lr_at(std::int64_t step) const;
  void validate() const;

  static OptimizerConfig sgd(double lr, double momentum = 0.9, double weight_decay = 1e-4,
                             std::int64_t decay_every = 600, double decay_factor = 0.1);
  static OptimizerConfig adam(double lr);
};

/// Per-tensor optimizer buffers. One state drives one fixed list of tensors.
template <typename T>
class OptimizerState {
 public:
  explicit OptimizerState(OptimizerConfig config) : config_(config) { config_.validate(); }

  const OptimizerConfig& config() const { return config_; }

  /// SGD: v <- momentum*v + (g + wd*w); w <- w - lr(t)*v.
  /// Adam: bias-corrected first/second moments, optional L2 term added to g.
  void step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads, std::int64_t step_index);

 private:
  OptimizerConfig config_;
  std::vector<std::vector<T>> first_;
  std::vector<std::vector<T>> second_;
  std::int64_t adam_steps_ = 0;
};

}  // namespace modnet::nn
