#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "modnet/nn/network.hpp"

namespace modnet::mask {

/// Per-layer logits pi, one tensor per maskable weight of a ParameterSet.
template <typename T>
struct MaskLogits {
  std::vector<std::string> names;
  std::vector<Tensor<T>> layers;

  std::vector<Shape> shapes() const;
  std::size_t total() const;
  /// Throws ShapeError unless names and shapes match the maskable weights of `params`.
  template <typename P>
  void check_congruent(const nn::ParameterSet<P>& params) const {
    if (names != params.maskable_names() || shapes() != params.maskable_shapes()) {
      throw ShapeError("mask logits are not congruent with the parameter set");
    }
  }
};

template <typename T, typename P>
MaskLogits<T> init_logits(const nn::ParameterSet<P>& params, double initial_logit = 0.0) {
  MaskLogits<T> out;
  out.names = params.maskable_names();
  for (const auto& s : params.maskable_shapes()) out.layers.emplace_back(s, static_cast<T>(initial_logit));
  return out;
}

/// Relaxed sample sigma((pi + g) / tau), entries strictly inside (0,1).
template <typename T>
struct RelaxedMask {
  std::vector<Tensor<T>> layers;
  double temperature = 1.0;
};

/// Logistic noise g = log u - log(1-u), u ~ Uniform(0,1), one per logit entry.
template <typename T>
std::vector<Tensor<T>> sample_logistic_noise(const std::vector<Shape>& shapes, std::mt19937_64& rng);

template <typename T>
RelaxedMask<T> relax(const MaskLogits<T>& logits, const std::vector<Tensor<T>>& noise, double temperature);

template <typename T>
RelaxedMask<T> gumbel_sigmoid_sample(const MaskLogits<T>& logits, double temperature, std::mt19937_64& rng);

/// Forward value 1[s > 0.5].
template <typename T>
nn::MaskMultipliers<T> straight_through(const RelaxedMask<T>& relaxed);

/// d(loss)/d(pi) given d(loss)/d(multiplier), treating the hard value as the relaxed sample:
/// dm * s(1-s)/tau.
template <typename T>
std::vector<Tensor<T>> straight_through_backward(const RelaxedMask<T>& relaxed,
                                                 const std::vector<Tensor<T>>& dmask);

struct BinaryMask {
  std::vector<std::string> names;
  std::vector<Tensor<std::uint8_t>> layers;

  std::vector<Shape> shapes() const;
  std::size_t total() const;
  std::size_t ones() const;

  template <typename T>
  nn::MaskMultipliers<T> multipliers() const {
    nn::MaskMultipliers<T> out;
    for (const auto& l : layers) out.push_back(l.template cast<T>());
    return out;
  }

  static BinaryMask filled(const std::vector<std::string>& names, const std::vector<Shape>& shapes, bool value);
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

/// 1 iff pi > 0; pi == 0 maps to 0.
template <typename T>
BinaryMask harden(const MaskLogits<T>& logits);

/// alpha * sum of raw logits.
template <typename T>
double sparsity_penalty(const MaskLogits<T>& logits, double alpha);

/// Adds the penalty gradient (alpha per entry) to `grads`.
template <typename T>
void add_sparsity_grad(std::vector<Tensor<T>>& grads, double alpha);

double keep_ratio(const BinaryMask& m);
std::vector<double> per_layer_keep_ratio(const BinaryMask& m);

BinaryMask mask_intersect(const BinaryMask& a, const BinaryMask& b);
BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b);
BinaryMask mask_complement(const BinaryMask& a);

/// Exactly floor(ratio * total) ones, uniformly over all entries jointly.
BinaryMask random_mask_global(const std::vector<std::string>& names, const std::vector<Shape>& shapes, double ratio,
                              std::mt19937_64& rng);

/// Same ones count as `reference` in every layer, positions uniform within the layer.
BinaryMask random_mask_layerwise(const BinaryMask& reference, std::mt19937_64& rng);

/// Keeps the floor(ratio * total) globally largest |w|; ties by (layer, entry) ascending.
template <typename T>
BinaryMask magnitude_mask(const nn::ParameterSet<T>& params, double ratio);

struct MaskMeta {
  std::uint64_t seed = 0;
  std::string run_id;
};

void export_mask(const BinaryMask& mask, const std::filesystem::path& dir, const MaskMeta& meta = {});
void export_logits(const MaskLogits<float>& logits, const std::filesystem::path& dir, const MaskMeta& meta = {});

struct ImportedMask {
  std::string kind;  // "binary" or "logits"
  std::optional<BinaryMask> binary;
  std::optional<MaskLogits<float>> logits;
  MaskMeta meta;

  /// The binary mask, hardening logits when needed.
  BinaryMask as_binary() const;
};

ImportedMask import_mask(const std::filesystem::path& dir);

/// sigmoid(pi) of one layer as a 2-D grid: rows = output units, cols = everything else.
void write_heatmap_csv(const MaskLogits<float>& logits, const std::string& layer, const std::filesystem::path& path);

}  // namespace modnet::mask
