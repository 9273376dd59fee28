#include "modnet/mask/mask.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "modnet/io.hpp"

namespace modnet::mask {

namespace {

void check_same_shapes(const BinaryMask& a, const BinaryMask& b) {
  if (a.shapes() != b.shapes()) throw ShapeError("mask shapes differ");
}

template <typename F>
BinaryMask combine(const BinaryMask& a, const BinaryMask& b, F f) {
  check_same_shapes(a, b);
  BinaryMask out = a;
  for (std::size_t l = 0; l < a.layers.size(); ++l)
    for (std::size_t i = 0; i < a.layers[l].size(); ++i)
      out.layers[l][i] = static_cast<std::uint8_t>(f(a.layers[l][i] != 0, b.layers[l][i] != 0));
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

io::json shapes_json(const std::vector<std::string>& names, const std::vector<Shape>& shapes, const std::string& ext) {
  io::json layers = io::json::array();
  for (std::size_t l = 0; l < names.size(); ++l) {
    layers.push_back({{"name", names[l]}, {"shape", shapes[l]}, {"file", names[l] + ext}});
  }
  return layers;
}

}  // namespace

template <typename T>
std::vector<Shape> MaskLogits<T>::shapes() const {
  std::vector<Shape> s;
  for (const auto& l : layers) s.push_back(l.shape());
  return s;
}

template <typename T>
std::size_t MaskLogits<T>::total() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.size();
  return n;
}

template <typename T>
std::vector<Tensor<T>> sample_logistic_noise(const std::vector<Shape>& shapes, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Tensor<T>> out;
  for (const auto& s : shapes) {
    Tensor<T> g(s);
    for (auto& v : g.values()) {
      double u = unit(rng);
      while (u <= 0.0) u = unit(rng);
      v = static_cast<T>(std::log(u) - std::log1p(-u));
    }
    out.push_back(std::move(g));
  }
  return out;
}

template <typename T>
RelaxedMask<T> relax(const MaskLogits<T>& logits, const std::vector<Tensor<T>>& noise, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("Gumbel-sigmoid temperature must be positive");
  if (noise.size() != logits.layers.size()) throw ShapeError("noise does not match logits");
  RelaxedMask<T> out;
  out.temperature = temperature;
  // Clamp away from {0,1} so the relaxed value stays strictly inside the interval.
  const double lo = std::is_same_v<T, float> ? 1e-7 : 1e-15;
  for (std::size_t l = 0; l < logits.layers.size(); ++l) {
    const auto& pi = logits.layers[l];
    if (noise[l].shape() != pi.shape()) throw ShapeError("noise does not match logits");
    Tensor<T> s(pi.shape());
    for (std::size_t i = 0; i < pi.size(); ++i) {
      const double v = sigmoid((static_cast<double>(pi[i]) + noise[l][i]) / temperature);
      s[i] = static_cast<T>(std::clamp(v, lo, 1.0 - lo));
    }
    out.layers.push_back(std::move(s));
  }
  return out;
}

template <typename T>
RelaxedMask<T> gumbel_sigmoid_sample(const MaskLogits<T>& logits, double temperature, std::mt19937_64& rng) {
  if (!(temperature > 0.0)) throw ConfigError("Gumbel-sigmoid temperature must be positive");
  return relax(logits, sample_logistic_noise<T>(logits.shapes(), rng), temperature);
}

template <typename T>
nn::MaskMultipliers<T> straight_through(const RelaxedMask<T>& relaxed) {
  nn::MaskMultipliers<T> out;
  for (const auto& l : relaxed.layers) {
    Tensor<T> m(l.shape());
    for (std::size_t i = 0; i < l.size(); ++i) m[i] = l[i] > T(0.5) ? T{1} : T{0};
    out.push_back(std::move(m));
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> straight_through_backward(const RelaxedMask<T>& relaxed,
                                                 const std::vector<Tensor<T>>& dmask) {
  if (dmask.size() != relaxed.layers.size()) throw ShapeError("mask gradient does not match relaxed mask");
  const T inv_tau = static_cast<T>(1.0 / relaxed.temperature);
  std::vector<Tensor<T>> out;
  for (std::size_t l = 0; l < dmask.size(); ++l) {
    const auto& s = relaxed.layers[l];
    if (dmask[l].shape() != s.shape()) throw ShapeError("mask gradient does not match relaxed mask");
    Tensor<T> d(s.shape());
    for (std::size_t i = 0; i < s.size(); ++i) d[i] = dmask[l][i] * s[i] * (T{1} - s[i]) * inv_tau;
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<Shape> BinaryMask::shapes() const {
  std::vector<Shape> s;
  for (const auto& l : layers) s.push_back(l.shape());
  return s;
}

std::size_t BinaryMask::total() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.size();
  return n;
}

std::size_t BinaryMask::ones() const {
  std::size_t n = 0;
  for (const auto& l : layers)
    for (auto v : l.values()) n += v != 0;
  return n;
}

BinaryMask BinaryMask::filled(const std::vector<std::string>& names, const std::vector<Shape>& shapes, bool value) {
  if (names.size() != shapes.size()) throw ShapeError("mask names and shapes differ in length");
  BinaryMask m;
  m.names = names;
  for (const auto& s : shapes) m.layers.emplace_back(s, static_cast<std::uint8_t>(value));
  return m;
}

template <typename T>
BinaryMask harden(const MaskLogits<T>& logits) {
  BinaryMask m;
  m.names = logits.names;
  for (const auto& l : logits.layers) {
    Tensor<std::uint8_t> b(l.shape());
    for (std::size_t i = 0; i < l.size(); ++i) b[i] = l[i] > T{0} ? 1 : 0;
    m.layers.push_back(std::move(b));
  }
  return m;
}

template <typename T>
double sparsity_penalty(const MaskLogits<T>& logits, double alpha) {
  if (alpha == 0.0) return 0.0;
  double s = 0.0;
  for (const auto& l : logits.layers)
    for (auto v : l.values()) s += v;
  return alpha * s;
}

template <typename T>
void add_sparsity_grad(std::vector<Tensor<T>>& grads, double alpha) {
  const T a = static_cast<T>(alpha);
  for (auto& g : grads)
    for (auto& v : g.values()) v += a;
}

double keep_ratio(const BinaryMask& m) {
  const auto n = m.total();
  return n == 0 ? 0.0 : static_cast<double>(m.ones()) / static_cast<double>(n);
}

std::vector<double> per_layer_keep_ratio(const BinaryMask& m) {
  std::vector<double> out;
  for (const auto& l : m.layers) {
    const auto ones = std::count_if(l.values().begin(), l.values().end(), [](auto v) { return v != 0; });
    out.push_back(static_cast<double>(ones) / static_cast<double>(l.size()));
  }
  return out;
}

BinaryMask mask_intersect(const BinaryMask& a, const BinaryMask& b) {
  return combine(a, b, [](bool x, bool y) { return x && y; });
}

BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b) {
  return combine(a, b, [](bool x, bool y) { return x || y; });
}

BinaryMask mask_complement(const BinaryMask& a) {
  BinaryMask out = a;
  for (auto& l : out.layers)
    for (auto& v : l.values()) v = v ? 0 : 1;
  return out;
}

BinaryMask random_mask_global(const std::vector<std::string>& names, const std::vector<Shape>& shapes, double ratio,
                              std::mt19937_64& rng) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("keep ratio must lie in [0,1]");
  auto m = BinaryMask::filled(names, shapes, false);
  const std::size_t total = m.total();
  const auto keep = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(total) + 1e-9));
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  // Partial Fisher-Yates: the first `keep` slots are a uniform subset.
  for (std::size_t i = 0; i < keep; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, total - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  std::vector<std::size_t> offsets{0};
  for (const auto& l : m.layers) offsets.push_back(offsets.back() + l.size());
  for (std::size_t k = 0; k < keep; ++k) {
    const std::size_t flat = order[k];
    const auto l = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin()) - 1;
    m.layers[l][flat - offsets[l]] = 1;
  }
  return m;
}

BinaryMask random_mask_layerwise(const BinaryMask& reference, std::mt19937_64& rng) {
  BinaryMask out = reference;
  for (auto& l : out.layers) {
    auto vals = l.values();
    const auto ones = static_cast<std::size_t>(std::count_if(vals.begin(), vals.end(), [](auto v) { return v != 0; }));
    std::fill(vals.begin(), vals.end(), 0);
    std::fill(vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(ones), 1);
    std::shuffle(vals.begin(), vals.end(), rng);
  }
  return out;
}

template <typename T>
BinaryMask magnitude_mask(const nn::ParameterSet<T>& params, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("keep ratio must lie in [0,1]");
  auto m = BinaryMask::filled(params.maskable_names(), params.maskable_shapes(), false);
  struct Entry {
    double mag;
    std::size_t layer, index;
  };
  std::vector<Entry> entries;
  const auto idx = params.maskable_indices();
  for (std::size_t l = 0; l < idx.size(); ++l) {
    const auto& w = params[idx[l]].value;
    for (std::size_t i = 0; i < w.size(); ++i) entries.push_back({std::abs(static_cast<double>(w[i])), l, i});
  }
  const auto keep = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(entries.size()) + 1e-9));
  auto better = [](const Entry& a, const Entry& b) {
    if (a.mag != b.mag) return a.mag > b.mag;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.index < b.index;
  };
  if (keep < entries.size()) {
    std::nth_element(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(keep), entries.end(), better);
  }
  for (std::size_t k = 0; k < keep; ++k) m.layers[entries[k].layer][entries[k].index] = 1;
  return m;
}

void export_mask(const BinaryMask& mask, const std::filesystem::path& dir, const MaskMeta& meta) {
  std::filesystem::create_directories(dir);
  for (std::size_t l = 0; l < mask.layers.size(); ++l) {
    io::write_u8(dir / (mask.names[l] + ".bin"), mask.layers[l].values());
  }
  io::write_json(dir / "manifest.json", {{"format", "modnet-mask"},
                                         {"kind", "binary"},
                                         {"dtype", "uint8"},
                                         {"seed", meta.seed},
                                         {"run_id", meta.run_id},
                                         {"layers", shapes_json(mask.names, mask.shapes(), ".bin")}});
}

void export_logits(const MaskLogits<float>& logits, const std::filesystem::path& dir, const MaskMeta& meta) {
  std::filesystem::create_directories(dir);
  for (std::size_t l = 0; l < logits.layers.size(); ++l) {
    io::write_f32(dir / (logits.names[l] + ".bin"), logits.layers[l].values());
  }
  io::write_json(dir / "manifest.json", {{"format", "modnet-mask"},
                                         {"kind", "logits"},
                                         {"dtype", "float32"},
                                         {"byte_order", "little"},
                                         {"seed", meta.seed},
                                         {"run_id", meta.run_id},
                                         {"layers", shapes_json(logits.names, logits.shapes(), ".bin")}});
}

BinaryMask ImportedMask::as_binary() const { return binary ? *binary : harden(*logits); }

ImportedMask import_mask(const std::filesystem::path& dir) {
  const auto manifest = io::read_json(dir / "manifest.json");
  ImportedMask out;
  try {
    out.kind = manifest.at("kind").get<std::string>();
    out.meta.seed = manifest.at("seed").get<std::uint64_t>();
    out.meta.run_id = manifest.at("run_id").get<std::string>();
    if (out.kind != "binary" && out.kind != "logits") throw FormatError("unknown mask kind '" + out.kind + "'");
    BinaryMask b;
    MaskLogits<float> lg;
    for (const auto& layer : manifest.at("layers")) {
      const auto name = layer.at("name").get<std::string>();
      const auto shape = layer.at("shape").get<Shape>();
      const auto file = dir / layer.at("file").get<std::string>();
      if (shape.empty()) throw FormatError("layer " + name + " has an empty shape");
      const auto n = shape_size(shape);
      if (out.kind == "binary") {
        auto v = io::read_u8(file, n, "mask layer " + name);
        for (auto x : v)
          if (x > 1) throw FormatError("mask layer " + name + " holds a value other than 0/1");
        b.names.push_back(name);
        b.layers.emplace_back(shape, std::move(v));
      } else {
        lg.names.push_back(name);
        lg.layers.emplace_back(shape, io::read_f32(file, n, "logit layer " + name));
      }
    }
    if (out.kind == "binary") {
      out.binary = std::move(b);
    } else {
      out.logits = std::move(lg);
    }
  } catch (const io::json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  } catch (const ShapeError& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
  return out;
}

void write_heatmap_csv(const MaskLogits<float>& logits, const std::string& layer, const std::filesystem::path& path) {
  const auto it = std::find(logits.names.begin(), logits.names.end(), layer);
  if (it == logits.names.end()) throw ConfigError("no mask layer named '" + layer + "'");
  const auto& t = logits.layers[static_cast<std::size_t>(it - logits.names.begin())];
  const std::size_t rows = t.shape()[0], cols = t.size() / rows;
  std::string text;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (c) text += ',';
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", sigmoid(t[r * cols + c]));
      text += buf;
    }
    text += '\n';
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  io::write_text(path, text);
}

#define MODNET_INSTANTIATE(T)                                                                                      \
  template struct MaskLogits<T>;                                                                                   \
  template std::vector<Tensor<T>> sample_logistic_noise<T>(const std::vector<Shape>&, std::mt19937_64&);           \
  template RelaxedMask<T> relax<T>(const MaskLogits<T>&, const std::vector<Tensor<T>>&, double);                   \
  template RelaxedMask<T> gumbel_sigmoid_sample<T>(const MaskLogits<T>&, double, std::mt19937_64&);                \
  template nn::MaskMultipliers<T> straight_through<T>(const RelaxedMask<T>&);                                      \
  template std::vector<Tensor<T>> straight_through_backward<T>(const RelaxedMask<T>&,                              \
                                                               const std::vector<Tensor<T>>&);                     \
  template BinaryMask harden<T>(const MaskLogits<T>&);                                                             \
  template double sparsity_penalty<T>(const MaskLogits<T>&, double);                                               \
  template void add_sparsity_grad<T>(std::vector<Tensor<T>>&, double);                                             \
  template BinaryMask magnitude_mask<T>(const nn::ParameterSet<T>&, double);

MODNET_INSTANTIATE(float)
MODNET_INSTANTIATE(double)

#undef MODNET_INSTANTIATE

}  // namespace modnet::mask
