#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "modnet/tensor.hpp"

namespace modnet::nn {

enum class LayerKind { conv3x3, relu, batch_norm, max_pool2, global_avg_pool, flatten, linear };

std::string to_string(LayerKind kind);

/// One stage of a sequential model. `in`/`out` are channels for conv and
/// batch norm, features for linear; unused by parameter-free layers.
struct LayerSpec {
  LayerKind kind;
  std::string name;
  std::size_t in = 0;
  std::size_t out = 0;
};

struct Architecture {
  std::size_t input_channels = 0;
  std::size_t input_height = 0;
  std::size_t input_width = 0;
  std::vector<LayerSpec> layers;

  Shape input_shape() const { return {input_channels, input_height, input_width}; }
  std::size_t num_classes() const;
};

enum class ParamRole { weight, bias, bn_scale, bn_shift, running_mean, running_var };

std::string to_string(ParamRole role);
ParamRole param_role_from_string(const std::string& s);

inline bool is_trainable(ParamRole r) { return r != ParamRole::running_mean && r != ParamRole::running_var; }
/// Masks cover conv/linear weight tensors only.
inline bool is_maskable(ParamRole r) { return r == ParamRole::weight; }

template <typename T>
struct NamedTensor {
  std::string name;
  ParamRole role;
  Tensor<T> value;
};

/// Ordered named tensors of a model, including batch-norm running statistics
/// (which are carried along but never trained).
template <typename T>
class ParameterSet {
 public:
  void add(std::string name, ParamRole role, Tensor<T> value);

  std::size_t size() const noexcept { return entries_.size(); }
  std::vector<NamedTensor<T>>& entries() noexcept { return entries_; }
  const std::vector<NamedTensor<T>>& entries() const noexcept { return entries_; }
  NamedTensor<T>& operator[](std::size_t i) { return entries_[i]; }
  const NamedTensor<T>& operator[](std::size_t i) const { return entries_[i]; }

  std::optional<std::size_t> find(const std::string& name) const;
  const Tensor<T>& at(const std::string& name) const;
  Tensor<T>& at(const std::string& name);

  std::vector<std::size_t> maskable_indices() const;
  std::vector<std::string> maskable_names() const;
  std::vector<Shape> maskable_shapes() const;
  std::size_t maskable_count() const;

  /// Distinct layer prefixes ("conv1", "fc", ...) in order of appearance.
  std::vector<std::string> groups() const;

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.role, e.value.template cast<U>());
    out.step_count = step_count;
    return out;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.entries_.size() != b.entries_.size() || a.step_count != b.step_count) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const auto& x = a.entries_[i];
      const auto& y = b.entries_[i];
      if (x.name != y.name || x.role != y.role || !(x.value == y.value)) return false;
    }
    return true;
  }

  std::uint64_t step_count = 0;

 private:
  std::vector<NamedTensor<T>> entries_;
};

/// Frozen copy of a model's initial parameters (w_0 in the MRM recipe).
template <typename T>
struct InitSnapshot {
  ParameterSet<T> params;
  std::uint64_t seed = 0;

  static InitSnapshot take(const ParameterSet<T>& p, std::uint64_t seed) { return {p, seed}; }
  ParameterSet<T> restore() const { return params; }
};

/// Per-maskable-layer multipliers, aligned with ParameterSet::maskable_indices().
template <typename T>
using MaskMultipliers = std::vector<Tensor<T>>;

/// Non-deduced so callers can pass nullptr for "no mask".
template <typename T>
using MaskArg = const std::type_identity_t<MaskMultipliers<T>>*;

struct ConvNetOptions {
  std::array<std::size_t, 3> widths{64, 128, 256};
  std::size_t image_size = 32;
};

Architecture convnet_architecture(std::size_t input_channels, std::size_t num_classes,
                                  const ConvNetOptions& options = {});

/// Fan-in scaled uniform init for conv/linear, unit/zero batch norm.
template <typename T>
ParameterSet<T> init_parameters(const Architecture& arch, std::uint64_t seed);

/// Three conv blocks (conv3x3 -> ReLU -> batch norm -> 2x2 max-pool), global
/// average pooling and a final linear layer.
template <typename T>
std::pair<Architecture, ParameterSet<T>> build_convnet(std::size_t input_channels, std::size_t num_classes,
                                                        std::uint64_t seed, const ConvNetOptions& options = {});

/// Batch statistics (train) or running statistics (eval) for batch norm.
enum class Mode { train, eval };

template <typename T>
struct Gradients {
  std::vector<Tensor<T>> params;  // aligned with ParameterSet entries; zero for running stats
  std::vector<Tensor<T>> mask;    // aligned with maskable layers; empty unless requested

  static Gradients zeros_like(const ParameterSet<T>& p, bool with_mask);
  void scale(T factor);
};

template <typename T>
struct TraceData;

/// Everything the backward pass needs from one forward pass.
template <typename T>
class Trace {
 public:
  Trace();
  ~Trace();
  Trace(Trace&&) noexcept;
  Trace& operator=(Trace&&) noexcept;

  const Tensor<T>& scores() const;
  TraceData<T>& data() { return *data_; }
  const TraceData<T>& data() const { return *data_; }

 private:
  std::unique_ptr<TraceData<T>> data_;
};

void check_mask_shapes(const std::vector<Shape>& expected, const std::vector<Shape>& given);

/// Class scores, one row per batch item. An absent mask is the identity mask.
template <typename T>
Tensor<T> forward(const Architecture& arch, const ParameterSet<T>& params, MaskArg<T> mask,
                  const Tensor<T>& batch, Mode mode = Mode::eval);

template <typename T>
Trace<T> forward_trace(const Architecture& arch, const ParameterSet<T>& params, MaskArg<T> mask,
                       const Tensor<T>& batch, Mode mode = Mode::train);

/// Accumulates d(loss)/d(params) and, when `grads.mask` is non-empty,
/// d(loss)/d(mask multipliers) into `grads`.
template <typename T>
void backward(const Trace<T>& trace, const Tensor<T>& dscores, Gradients<T>& grads);

/// running <- momentum * running + (1 - momentum) * batch statistic.
template <typename T>
void update_running_stats(ParameterSet<T>& params, const Trace<T>& trace, double momentum = 0.9);

template <typename T>
struct ScoreLoss {
  T value{};
  Tensor<T> dscores;
};

template <typename T>
using LossFn = std::function<ScoreLoss<T>(const Tensor<T>& scores, std::span<const int> labels)>;

template <typename T>
struct LossAndGrads {
  T loss{};
  Gradients<T> grads;
};

/// Loss and gradients w.r.t. raw weights (mask held constant).
template <typename T>
LossAndGrads<T> loss_and_grads(const Architecture& arch, const ParameterSet<T>& params,
                               MaskArg<T> mask, const Tensor<T>& batch, std::span<const int> labels,
                               const LossFn<T>& loss_fn, std::int64_t step = 0, bool with_mask_grads = false);

}  // namespace modnet::nn
