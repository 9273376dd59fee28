#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "modnet/tensor.hpp"

namespace modnet::data {

/// Grayscale images in [0,1] with their digit labels.
struct GrayImages {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> pixels;  // count * rows * cols
  std::vector<int> labels;
};

/// Reads an IDX3 image file (magic 0x00000803) and IDX1 label file
/// (magic 0x00000801). Pixels are scaled by 1/255.
GrayImages load_mnist_idx(const std::filesystem::path& image_path, const std::filesystem::path& label_path);

using Rgb = std::array<int, 3>;

struct ColorPalette {
  std::vector<Rgb> colors;

  static ColorPalette standard();
  void validate() const;
};

/// class -> color/background index, plus one bias coefficient per environment.
/// The first `num_seen` environments are training environments.
struct BiasSpec {
  std::vector<int> mapping;
  std::vector<double> bias_coefficients;
  std::size_t num_seen = 2;

  std::size_t num_environments() const { return bias_coefficients.size(); }
  void validate() const;

  /// Identity mapping, coefficients (1.0, 0.9) seen and 0.0 out-domain.
  static BiasSpec full_colored_mnist();
};

bool is_permutation_of_classes(std::span<const int> mapping);

enum class Provenance { seen, out_domain, probe_split, eval_split };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

enum class LabelChannel { class_label, color_label };

/// One environment: images N x C x H x W in [0,1], class labels, and the
/// semantic color/background labels used only for analysis.
struct EnvironmentDataset {
  int env_id = 0;
  bool seen = false;
  Provenance provenance = Provenance::seen;
  double bias_coefficient = 0.0;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<float> images;
  std::vector<int> class_labels;
  std::vector<int> color_labels;
  std::vector<std::size_t> source_index;

  std::size_t size() const { return class_labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  bool has_color_labels() const { return color_labels.size() == class_labels.size() && !color_labels.empty(); }
  const std::vector<int>& labels(LabelChannel ch) const {
    return ch == LabelChannel::class_label ? class_labels : color_labels;
  }

  template <typename T>
  Tensor<T> gather(std::span<const std::size_t> idx) const {
    Tensor<T> out({idx.size(), channels, height, width});
    const std::size_t sz = image_size();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const float* src = images.data() + idx[k] * sz;
      std::copy(src, src + sz, out.data() + k * sz);
    }
    return out;
  }

  EnvironmentDataset subset(std::span<const std::size_t> idx) const;
};

/// Fraction of items whose color label equals mapping(class label).
double mapped_fraction(const EnvironmentDataset& env, std::span<const int> mapping);

/// 28x28 gray -> 3x32x32, symmetric zero padding, channel c = gray * rgb[c]/255.
std::vector<float> colorize(std::span<const float> gray, std::size_t rows, std::size_t cols, const Rgb& rgb,
                            std::size_t out_size = 32);

/// Splits (optionally the first `limit` of a seeded shuffle of) the images
/// evenly across the spec's environments. Exactly floor(p*n) items per
/// environment receive the mapped color; the rest draw uniformly from all
/// ten colors.
std::vector<EnvironmentDataset> build_full_colored_mnist(const GrayImages& mnist, const BiasSpec& spec,
                                                         const ColorPalette& palette, std::uint64_t seed,
                                                         std::size_t limit = 0);

/// Foreground objects with a binary object mask, or background scenes.
struct ImageBank {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> images;             // count * channels * height * width
  std::vector<std::uint8_t> object_masks;  // count * height * width, foregrounds only
  std::vector<int> labels;

  std::size_t count() const { return labels.size(); }
};

enum class BackgroundMode { palette, scene };

struct BackgroundSource {
  BackgroundMode mode = BackgroundMode::palette;
  ColorPalette palette = ColorPalette::standard();
  ImageBank scenes;  // scene mode: labels are background classes 0..9
};

/// Pastes each foreground object onto a background chosen by the bias rule.
std::vector<EnvironmentDataset> composite_object_background(const ImageBank& foregrounds,
                                                            const BackgroundSource& backgrounds,
                                                            const BiasSpec& spec, std::size_t height,
                                                            std::size_t width, std::uint64_t seed);

/// Ten procedurally drawn shape classes with per-item jitter, for exercising
/// the compositor without external assets.
ImageBank synthetic_shape_bank(std::size_t per_class, std::size_t size, std::uint64_t seed);

struct SplitPair {
  EnvironmentDataset in_split;
  EnvironmentDataset out_split;
};

/// Class-stratified seeded split; in_split gets round(fraction * N) items.
SplitPair split_out_domain(const EnvironmentDataset& env, double fraction, std::uint64_t seed);

/// New mapping with no class keeping its previous color; coefficients unchanged.
BiasSpec rearrange_bias(const BiasSpec& spec, std::uint64_t seed);

/// meta.json plus per-environment images (float32) and labels (uint8).
void save_datasets(const std::vector<EnvironmentDataset>& envs, const BiasSpec& spec, std::uint64_t seed,
                   const std::filesystem::path& dir);

struct LoadedDatasets {
  std::vector<EnvironmentDataset> envs;
  BiasSpec spec;
  std::uint64_t seed = 0;
};

LoadedDatasets load_datasets(const std::filesystem::path& dir);

/// splitmix64-style mixing of (seed, a, b) into an independent stream seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace modnet::data
