#include "modnet/nn/network.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace modnet::nn {

namespace {

constexpr double kBatchNormEps = 1e-5;

#ifdef __GLIBC__
// Activation buffers are a few MB each and reallocated every step; keeping them
// on the heap instead of fresh mmaps avoids a page-fault storm.
const bool kMallocTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif

// Sum and sum of squared deviations in double with eight fixed lanes, so the
// result does not depend on buffer alignment.
template <typename T>
double lane_sum(const T* x, std::size_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) acc[l] += x[i + l];
  double s = 0;
  for (; i < n; ++i) s += x[i];
  for (int l = 0; l < 8; ++l) s += acc[l];
  return s;
}

template <typename T>
double lane_sq_dev(const T* x, std::size_t n, double mean) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) {
      const double d = x[i + l] - mean;
      acc[l] += d * d;
    }
  double s = 0;
  for (; i < n; ++i) s += (x[i] - mean) * (x[i] - mean);
  for (int l = 0; l < 8; ++l) s += acc[l];
  return s;
}

template <typename T>
double lane_dot(const T* x, const T* y, std::size_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) acc[l] += static_cast<double>(x[i + l]) * y[i + l];
  double s = 0;
  for (; i < n; ++i) s += static_cast<double>(x[i]) * y[i];
  for (int l = 0; l < 8; ++l) s += acc[l];
  return s;
}

// Leaves elements uninitialized on resize; every buffer below is fully
// written before it is read.
template <typename T>
struct UninitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = UninitAllocator<U>;
  };
  UninitAllocator() = default;
  template <typename U>
  UninitAllocator(const UninitAllocator<U>&) noexcept {}
  template <typename U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

template <typename T>
using Buf = std::vector<T, UninitAllocator<T>>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Activations are stored channel-major: [c][n][h][w]. A channel's values for
// the whole batch are contiguous, so batch norm is a row reduction and a
// 3x3 conv over the batch is a single GEMM.
template <typename T>
struct Act {
  std::size_t c = 0, n = 0, h = 0, w = 0;
  Buf<T> v;

  std::size_t plane() const { return h * w; }
  std::size_t row() const { return n * h * w; }
};

}  // namespace

template <typename T>
struct LayerCache {
  std::size_t in_c = 0, in_n = 0, in_h = 0, in_w = 0;
  Buf<T> saved;            // conv: im2col matrix; linear: input; relu: output; bn: xhat
  std::vector<T> weight_eff;     // conv/linear: mask * weight
  std::vector<T> inv_std;        // bn
  std::vector<T> batch_mean;     // bn
  std::vector<T> batch_var;      // bn, unbiased
  std::vector<std::uint32_t> argmax;  // max-pool
  std::ptrdiff_t weight_index = -1;
  std::ptrdiff_t bias_index = -1;
  std::ptrdiff_t mask_index = -1;
  std::ptrdiff_t scale_index = -1;
  std::ptrdiff_t shift_index = -1;
  std::ptrdiff_t mean_index = -1;
  std::ptrdiff_t var_index = -1;
};

template <typename T>
struct TraceData {
  const Architecture* arch = nullptr;
  const ParameterSet<T>* params = nullptr;
  const MaskMultipliers<T>* mask = nullptr;
  Mode mode = Mode::train;
  std::vector<LayerCache<T>> layers;
  Tensor<T> scores;
};

template <typename T>
Trace<T>::Trace() : data_(std::make_unique<TraceData<T>>()) {}
template <typename T>
Trace<T>::~Trace() = default;
template <typename T>
Trace<T>::Trace(Trace&&) noexcept = default;
template <typename T>
Trace<T>& Trace<T>::operator=(Trace&&) noexcept = default;
template <typename T>
const Tensor<T>& Trace<T>::scores() const {
  return data_->scores;
}

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv3x3: return "conv3x3";
    case LayerKind::relu: return "relu";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::max_pool2: return "max_pool2";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::linear: return "linear";
  }
  return "?";
}

std::string to_string(ParamRole role) {
  switch (role) {
    case ParamRole::weight: return "weight";
    case ParamRole::bias: return "bias";
    case ParamRole::bn_scale: return "bn_scale";
    case ParamRole::bn_shift: return "bn_shift";
    case ParamRole::running_mean: return "running_mean";
    case ParamRole::running_var: return "running_var";
  }
  return "?";
}

ParamRole param_role_from_string(const std::string& s) {
  for (auto r : {ParamRole::weight, ParamRole::bias, ParamRole::bn_scale, ParamRole::bn_shift,
                 ParamRole::running_mean, ParamRole::running_var}) {
    if (to_string(r) == s) return r;
  }
  throw FormatError("unknown parameter role '" + s + "'");
}

std::size_t Architecture::num_classes() const {
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    if (it->kind == LayerKind::linear) return it->out;
  }
  throw ConfigError("architecture has no linear output layer");
}

// ---------------------------------------------------------------------------
// ParameterSet

template <typename T>
void ParameterSet<T>::add(std::string name, ParamRole role, Tensor<T> value) {
  if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  entries_.push_back({std::move(name), role, std::move(value)});
}

template <typename T>
std::optional<std::size_t> ParameterSet<T>::find(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  return std::nullopt;
}

template <typename T>
const Tensor<T>& ParameterSet<T>::at(const std::string& name) const {
  auto i = find(name);
  if (!i) throw ConfigError("no parameter named '" + name + "'");
  return entries_[*i].value;
}

template <typename T>
Tensor<T>& ParameterSet<T>::at(const std::string& name) {
  auto i = find(name);
  if (!i) throw ConfigError("no parameter named '" + name + "'");
  return entries_[*i].value;
}

template <typename T>
std::vector<std::size_t> ParameterSet<T>::maskable_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (is_maskable(entries_[i].role)) out.push_back(i);
  }
  return out;
}

template <typename T>
std::vector<std::string> ParameterSet<T>::maskable_names() const {
  std::vector<std::string> out;
  for (auto i : maskable_indices()) out.push_back(entries_[i].name);
  return out;
}

template <typename T>
std::vector<Shape> ParameterSet<T>::maskable_shapes() const {
  std::vector<Shape> out;
  for (auto i : maskable_indices()) out.push_back(entries_[i].value.shape());
  return out;
}

template <typename T>
std::size_t ParameterSet<T>::maskable_count() const {
  std::size_t n = 0;
  for (auto i : maskable_indices()) n += entries_[i].value.size();
  return n;
}

template <typename T>
std::vector<std::string> ParameterSet<T>::groups() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) {
    auto prefix = e.name.substr(0, e.name.find('.'));
    if (std::find(out.begin(), out.end(), prefix) == out.end()) out.push_back(prefix);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Construction

Architecture convnet_architecture(std::size_t input_channels, std::size_t num_classes,
                                  const ConvNetOptions& options) {
  if (input_channels < 1) throw ConfigError("convnet needs at least one input channel");
  if (num_classes < 2) throw ConfigError("convnet needs at least two classes, got " + std::to_string(num_classes));
  if (options.image_size < 8 || options.image_size % 8 != 0) {
    throw ConfigError("convnet image size must be a positive multiple of 8, got " +
                      std::to_string(options.image_size));
  }
  for (auto w : options.widths) {
    if (w == 0) throw ConfigError("convnet widths must be positive");
  }
  Architecture arch;
  arch.input_channels = input_channels;
  arch.input_height = options.image_size;
  arch.input_width = options.image_size;
  std::size_t in = input_channels;
  for (std::size_t b = 0; b < 3; ++b) {
    const auto idx = std::to_string(b + 1);
    const auto out = options.widths[b];
    arch.layers.push_back({LayerKind::conv3x3, "conv" + idx, in, out});
    arch.layers.push_back({LayerKind::relu, "", 0, 0});
    arch.layers.push_back({LayerKind::batch_norm, "bn" + idx, out, out});
    arch.layers.push_back({LayerKind::max_pool2, "", 0, 0});
    in = out;
  }
  arch.layers.push_back({LayerKind::global_avg_pool, "", 0, 0});
  arch.layers.push_back({LayerKind::linear, "fc", in, num_classes});
  return arch;
}

template <typename T>
ParameterSet<T> init_parameters(const Architecture& arch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  auto uniform = [&](Shape shape, double bound) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(bound * unit(rng));
    return t;
  };
  ParameterSet<T> p;
  for (const auto& l : arch.layers) {
    switch (l.kind) {
      case LayerKind::conv3x3: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(l.in * 9));
        p.add(l.name + ".weight", ParamRole::weight, uniform({l.out, l.in, 3, 3}, bound));
        p.add(l.name + ".bias", ParamRole::bias, uniform({l.out}, bound));
        break;
      }
      case LayerKind::linear: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
        p.add(l.name + ".weight", ParamRole::weight, uniform({l.out, l.in}, bound));
        p.add(l.name + ".bias", ParamRole::bias, uniform({l.out}, bound));
        break;
      }
      case LayerKind::batch_norm:
        p.add(l.name + ".scale", ParamRole::bn_scale, Tensor<T>({l.out}, T{1}));
        p.add(l.name + ".shift", ParamRole::bn_shift, Tensor<T>({l.out}, T{0}));
        p.add(l.name + ".running_mean", ParamRole::running_mean, Tensor<T>({l.out}, T{0}));
        p.add(l.name + ".running_var", ParamRole::running_var, Tensor<T>({l.out}, T{1}));
        break;
      default:
        break;
    }
  }
  return p;
}

template <typename T>
std::pair<Architecture, ParameterSet<T>> build_convnet(std::size_t input_channels, std::size_t num_classes,
                                                        std::uint64_t seed, const ConvNetOptions& options) {
  auto arch = convnet_architecture(input_channels, num_classes, options);
  auto params = init_parameters<T>(arch, seed);
  return {std::move(arch), std::move(params)};
}

// ---------------------------------------------------------------------------
// Gradients

template <typename T>
Gradients<T> Gradients<T>::zeros_like(const ParameterSet<T>& p, bool with_mask) {
  Gradients g;
  g.params.reserve(p.size());
  for (const auto& e : p.entries()) g.params.emplace_back(e.value.shape(), T{0});
  if (with_mask) {
    for (auto i : p.maskable_indices()) g.mask.emplace_back(p[i].value.shape(), T{0});
  }
  return g;
}

template <typename T>
void Gradients<T>::scale(T factor) {
  for (auto& t : params)
    for (auto& v : t.values()) v *= factor;
  for (auto& t : mask)
    for (auto& v : t.values()) v *= factor;
}

void check_mask_shapes(const std::vector<Shape>& expected, const std::vector<Shape>& given) {
  if (expected.size() != given.size()) {
    throw ShapeError("mask has " + std::to_string(given.size()) + " layers, model has " +
                     std::to_string(expected.size()) + " maskable layers");
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (expected[i] != given[i]) {
      throw ShapeError("mask layer " + std::to_string(i) + " has shape " + shape_string(given[i]) +
                       ", weight has " + shape_string(expected[i]));
    }
  }
}

// ---------------------------------------------------------------------------
// Forward / backward kernels

namespace {

template <typename T>
void im2col3x3(const Act<T>& in, Buf<T>& col) {
  const std::size_t H = in.h, W = in.w, N = in.n, row_len = in.row();
  col.resize(in.c * 9 * row_len);
  for (std::size_t ci = 0; ci < in.c; ++ci) {
    const T* src = in.v.data() + ci * row_len;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* dst = col.data() + ((ci * 3 + ky) * 3 + kx) * row_len;
        const int dy = ky - 1, dx = kx - 1;
        const std::size_t x0 = dx < 0 ? 1 : 0;
        const std::size_t x1 = dx > 0 ? W - 1 : W;
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t y = 0; y < H; ++y) {
            const long sy = static_cast<long>(y) + dy;
            T* drow = dst + (n * H + y) * W;
            if (sy < 0 || sy >= static_cast<long>(H)) {
              std::fill(drow, drow + W, T{0});
              continue;
            }
            const T* srow = src + (n * H + sy) * W;
            std::memcpy(drow + x0, srow + x0 + dx, (x1 - x0) * sizeof(T));
            if (dx < 0) drow[0] = T{0};
            if (dx > 0) drow[W - 1] = T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im3x3(const Buf<T>& col, Act<T>& out) {
  const std::size_t H = out.h, W = out.w, N = out.n, row_len = out.row();
  std::fill(out.v.begin(), out.v.end(), T{0});
  for (std::size_t ci = 0; ci < out.c; ++ci) {
    T* dst = out.v.data() + ci * row_len;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* src = col.data() + ((ci * 3 + ky) * 3 + kx) * row_len;
        const int dy = ky - 1, dx = kx - 1;
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t y = 0; y < H; ++y) {
            const long sy = static_cast<long>(y) + dy;
            if (sy < 0 || sy >= static_cast<long>(H)) continue;
            T* __restrict drow = dst + (n * H + sy) * W;
            const T* __restrict srow = src + (n * H + y) * W;
            const std::size_t x0 = dx < 0 ? 1 : 0;
            const std::size_t x1 = dx > 0 ? W - 1 : W;
            for (std::size_t x = x0; x < x1; ++x) drow[x + dx] += srow[x];
          }
        }
      }
    }
  }
}

// Fixed summation order; Eigen's vectorized reductions peel by address
// alignment, which would make results depend on where buffers land.
template <typename T>
void add_row_sums(const T* g, std::size_t rows, std::size_t cols, Tensor<T>& out) {
  for (std::size_t r = 0; r < rows; ++r) out[r] += static_cast<T>(lane_sum(g + r * cols, cols));
}

template <typename T>
std::vector<T> effective_weight(const Tensor<T>& w, const Tensor<T>* m) {
  std::vector<T> out(w.storage());
  if (m) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*m)[i];
  }
  return out;
}

template <typename T>
Act<T> to_channel_major(const Tensor<T>& batch, const Architecture& arch) {
  const auto& s = batch.shape();
  if (s.size() != 4 || s[1] != arch.input_channels || s[2] != arch.input_height || s[3] != arch.input_width) {
    throw ShapeError("batch shape " + shape_string(s) + " does not match model input [N," +
                     std::to_string(arch.input_channels) + "," + std::to_string(arch.input_height) + "," +
                     std::to_string(arch.input_width) + "]");
  }
  Act<T> a{s[1], s[0], s[2], s[3], {}};
  a.v.resize(batch.size());
  const std::size_t plane = a.plane();
  for (std::size_t n = 0; n < a.n; ++n)
    for (std::size_t c = 0; c < a.c; ++c)
      std::memcpy(a.v.data() + (c * a.n + n) * plane, batch.data() + (n * a.c + c) * plane, plane * sizeof(T));
  return a;
}

template <typename T>
std::ptrdiff_t index_of(const ParameterSet<T>& p, const std::string& name) {
  auto i = p.find(name);
  if (!i) throw ConfigError("model parameters lack '" + name + "'");
  return static_cast<std::ptrdiff_t>(*i);
}

template <typename T>
std::ptrdiff_t mask_slot(const ParameterSet<T>& p, std::ptrdiff_t weight_index) {
  auto idx = p.maskable_indices();
  auto it = std::find(idx.begin(), idx.end(), static_cast<std::size_t>(weight_index));
  return it - idx.begin();
}

template <typename T>
void run_forward(TraceData<T>& td, const Tensor<T>& batch, bool keep) {
  const auto& arch = *td.arch;
  const auto& params = *td.params;
  const auto* mask = td.mask;
  if (mask) check_mask_shapes(params.maskable_shapes(), [&] {
      std::vector<Shape> s;
      for (const auto& t : *mask) s.push_back(t.shape());
      return s;
    }());

  Act<T> a = to_channel_major(batch, arch);
  td.layers.assign(arch.layers.size(), {});

  for (std::size_t li = 0; li < arch.layers.size(); ++li) {
    const auto& spec = arch.layers[li];
    auto& cache = td.layers[li];
    cache.in_c = a.c;
    cache.in_n = a.n;
    cache.in_h = a.h;
    cache.in_w = a.w;
    switch (spec.kind) {
      case LayerKind::conv3x3: {
        if (a.c != spec.in) throw ShapeError(spec.name + ": expected " + std::to_string(spec.in) + " channels");
        cache.weight_index = index_of(params, spec.name + ".weight");
        cache.bias_index = index_of(params, spec.name + ".bias");
        cache.mask_index = mask_slot(params, cache.weight_index);
        const Tensor<T>* m = mask ? &(*mask)[cache.mask_index] : nullptr;
        cache.weight_eff = effective_weight(params[cache.weight_index].value, m);
        Buf<T> col;
        im2col3x3(a, col);
        const std::size_t K = spec.in * 9, R = a.row();
        Act<T> out{spec.out, a.n, a.h, a.w, Buf<T>(spec.out * R)};
        ConstMatMap<T> wm(cache.weight_eff.data(), spec.out, K);
        ConstMatMap<T> cm(col.data(), K, R);
        MatMap<T> om(out.v.data(), spec.out, R);
        om.noalias() = wm * cm;
        const auto& b = params[cache.bias_index].value;
        for (std::size_t c = 0; c < spec.out; ++c) om.row(c).array() += b[c];
        if (keep) cache.saved = std::move(col);
        a = std::move(out);
        break;
      }
      case LayerKind::relu: {
        for (auto& v : a.v) v = v > T{0} ? v : T{0};
        if (keep) cache.saved = a.v;
        break;
      }
      case LayerKind::batch_norm: {
        if (a.c != spec.out) throw ShapeError(spec.name + ": channel mismatch");
        cache.scale_index = index_of(params, spec.name + ".scale");
        cache.shift_index = index_of(params, spec.name + ".shift");
        cache.mean_index = index_of(params, spec.name + ".running_mean");
        cache.var_index = index_of(params, spec.name + ".running_var");
        const auto& gamma = params[cache.scale_index].value;
        const auto& beta = params[cache.shift_index].value;
        const std::size_t R = a.row();
        cache.inv_std.assign(a.c, T{0});
        if (td.mode == Mode::train) {
          cache.batch_mean.assign(a.c, T{0});
          cache.batch_var.assign(a.c, T{0});
          if (keep) cache.saved.resize(a.v.size());
          for (std::size_t c = 0; c < a.c; ++c) {
            T* x = a.v.data() + c * R;
            const double mean = lane_sum(x, R) / R;
            const double sq = lane_sq_dev(x, R, mean);
            const double var = sq / R;
            const T inv = static_cast<T>(1.0 / std::sqrt(var + kBatchNormEps));
            cache.inv_std[c] = inv;
            cache.batch_mean[c] = static_cast<T>(mean);
            cache.batch_var[c] = static_cast<T>(R > 1 ? sq / (R - 1) : var);
            const T mu = static_cast<T>(mean), g = gamma[c], be = beta[c];
            T* xh = keep ? cache.saved.data() + c * R : nullptr;
            for (std::size_t i = 0; i < R; ++i) {
              const T h = (x[i] - mu) * inv;
              if (xh) xh[i] = h;
              x[i] = g * h + be;
            }
          }
        } else {
          const auto& rm = params[cache.mean_index].value;
          const auto& rv = params[cache.var_index].value;
          for (std::size_t c = 0; c < a.c; ++c) {
            const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + kBatchNormEps));
            const T scale = gamma[c] * inv, shift = beta[c] - rm[c] * scale;
            T* x = a.v.data() + c * R;
            for (std::size_t i = 0; i < R; ++i) x[i] = x[i] * scale + shift;
          }
        }
        break;
      }
      case LayerKind::max_pool2: {
        if (a.h % 2 || a.w % 2) throw ShapeError("max-pool needs even spatial size");
        const std::size_t oh = a.h / 2, ow = a.w / 2;
        Act<T> out{a.c, a.n, oh, ow, Buf<T>(a.c * a.n * oh * ow)};
        if (keep) cache.argmax.resize(out.v.size());
        for (std::size_t p = 0; p < a.c * a.n; ++p) {
          const T* src = a.v.data() + p * a.plane();
          T* dst = out.v.data() + p * out.plane();
          std::uint32_t* am = keep ? cache.argmax.data() + p * out.plane() : nullptr;
          for (std::size_t y = 0; y < oh; ++y) {
            const std::size_t r0 = 2 * y * a.w, r1 = r0 + a.w;
            for (std::size_t x = 0; x < ow; ++x) {
              std::size_t best = r0 + 2 * x;
              if (src[r0 + 2 * x + 1] > src[best]) best = r0 + 2 * x + 1;
              if (src[r1 + 2 * x] > src[best]) best = r1 + 2 * x;
              if (src[r1 + 2 * x + 1] > src[best]) best = r1 + 2 * x + 1;
              dst[y * ow + x] = src[best];
              if (am) am[y * ow + x] = static_cast<std::uint32_t>(best);
            }
          }
        }
        a = std::move(out);
        break;
      }
      case LayerKind::global_avg_pool: {
        Act<T> out{a.c, a.n, 1, 1, Buf<T>(a.c * a.n)};
        const std::size_t P = a.plane();
        for (std::size_t p = 0; p < a.c * a.n; ++p) {
          T s = 0;
          for (std::size_t i = 0; i < P; ++i) s += a.v[p * P + i];
          out.v[p] = s / static_cast<T>(P);
        }
        a = std::move(out);
        break;
      }
      case LayerKind::flatten: {
        const std::size_t F = a.c * a.plane();
        Act<T> out{F, a.n, 1, 1, Buf<T>(F * a.n)};
        for (std::size_t c = 0; c < a.c; ++c)
          for (std::size_t n = 0; n < a.n; ++n)
            for (std::size_t i = 0; i < a.plane(); ++i)
              out.v[(c * a.plane() + i) * a.n + n] = a.v[(c * a.n + n) * a.plane() + i];
        a = std::move(out);
        break;
      }
      case LayerKind::linear: {
        if (a.h != 1 || a.w != 1 || a.c != spec.in) {
          throw ShapeError(spec.name + ": expected " + std::to_string(spec.in) + " input features");
        }
        cache.weight_index = index_of(params, spec.name + ".weight");
        cache.bias_index = index_of(params, spec.name + ".bias");
        cache.mask_index = mask_slot(params, cache.weight_index);
        const Tensor<T>* m = mask ? &(*mask)[cache.mask_index] : nullptr;
        cache.weight_eff = effective_weight(params[cache.weight_index].value, m);
        Act<T> out{spec.out, a.n, 1, 1, Buf<T>(spec.out * a.n)};
        ConstMatMap<T> wm(cache.weight_eff.data(), spec.out, spec.in);
        ConstMatMap<T> xm(a.v.data(), spec.in, a.n);
        MatMap<T> om(out.v.data(), spec.out, a.n);
        om.noalias() = wm * xm;
        const auto& b = params[cache.bias_index].value;
        for (std::size_t c = 0; c < spec.out; ++c) om.row(c).array() += b[c];
        if (keep) cache.saved = std::move(a.v);
        a = std::move(out);
        break;
      }
    }
  }
  if (a.h != 1 || a.w != 1) throw ShapeError("model output is not a score vector per item");
  Tensor<T> scores({a.n, a.c});
  for (std::size_t n = 0; n < a.n; ++n)
    for (std::size_t c = 0; c < a.c; ++c) scores[n * a.c + c] = a.v[c * a.n + n];
  td.scores = std::move(scores);
}

}  // namespace

template <typename T>
Tensor<T> forward(const Architecture& arch, const ParameterSet<T>& params, MaskArg<T> mask,
                  const Tensor<T>& batch, Mode mode) {
  TraceData<T> td;
  td.arch = &arch;
  td.params = &params;
  td.mask = mask;
  td.mode = mode;
  run_forward(td, batch, false);
  return std::move(td.scores);
}

template <typename T>
Trace<T> forward_trace(const Architecture& arch, const ParameterSet<T>& params, MaskArg<T> mask,
                       const Tensor<T>& batch, Mode mode) {
  Trace<T> trace;
  auto& td = trace.data();
  td.arch = &arch;
  td.params = &params;
  td.mask = mask;
  td.mode = mode;
  run_forward(td, batch, true);
  return trace;
}

template <typename T>
void backward(const Trace<T>& trace, const Tensor<T>& dscores, Gradients<T>& grads) {
  const auto& td = trace.data();
  const auto& arch = *td.arch;
  const auto& params = *td.params;
  if (td.mode != Mode::train) throw ConfigError("backward requires a train-mode trace");
  if (dscores.shape() != td.scores.shape()) throw ShapeError("score gradient shape mismatch");
  if (grads.params.size() != params.size()) throw ShapeError("gradient buffer does not match parameters");
  const bool want_mask = !grads.mask.empty();

  const std::size_t N = dscores.shape()[0], C = dscores.shape()[1];
  Act<T> g{C, N, 1, 1, Buf<T>(C * N)};
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) g.v[c * N + n] = dscores[n * C + c];

  for (std::size_t li = arch.layers.size(); li-- > 0;) {
    const auto& spec = arch.layers[li];
    const auto& cache = td.layers[li];
    const bool need_input_grad = li > 0;
    switch (spec.kind) {
      case LayerKind::linear: {
        ConstMatMap<T> gm(g.v.data(), spec.out, N);
        ConstMatMap<T> xm(cache.saved.data(), spec.in, N);
        RowMat<T> dweff = gm * xm.transpose();
        auto& gw = grads.params[cache.weight_index];
        auto& gb = grads.params[cache.bias_index];
        const auto& w = params[cache.weight_index].value;
        const Tensor<T>* m = td.mask ? &(*td.mask)[cache.mask_index] : nullptr;
        for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += m ? (*m)[i] * dweff.data()[i] : dweff.data()[i];
        if (want_mask) {
          auto& gmk = grads.mask[cache.mask_index];
          for (std::size_t i = 0; i < gmk.size(); ++i) gmk[i] += w[i] * dweff.data()[i];
        }
        add_row_sums(g.v.data(), spec.out, N, gb);
        if (need_input_grad) {
          Act<T> gi{spec.in, N, 1, 1, Buf<T>(spec.in * N)};
          ConstMatMap<T> wm(cache.weight_eff.data(), spec.out, spec.in);
          MatMap<T> gim(gi.v.data(), spec.in, N);
          gim.noalias() = wm.transpose() * gm;
          g = std::move(gi);
        }
        break;
      }
      case LayerKind::flatten: {
        Act<T> gi{cache.in_c, cache.in_n, cache.in_h, cache.in_w, Buf<T>(g.v.size())};
        const std::size_t P = gi.plane();
        for (std::size_t c = 0; c < gi.c; ++c)
          for (std::size_t n = 0; n < gi.n; ++n)
            for (std::size_t i = 0; i < P; ++i) gi.v[(c * gi.n + n) * P + i] = g.v[(c * P + i) * gi.n + n];
        g = std::move(gi);
        break;
      }
      case LayerKind::global_avg_pool: {
        Act<T> gi{cache.in_c, cache.in_n, cache.in_h, cache.in_w, {}};
        const std::size_t P = gi.plane();
        gi.v.resize(gi.c * gi.n * P);
        const T inv = T{1} / static_cast<T>(P);
        for (std::size_t p = 0; p < gi.c * gi.n; ++p) {
          const T v = g.v[p] * inv;
          std::fill(gi.v.begin() + p * P, gi.v.begin() + (p + 1) * P, v);
        }
        g = std::move(gi);
        break;
      }
      case LayerKind::max_pool2: {
        Act<T> gi{cache.in_c, cache.in_n, cache.in_h, cache.in_w, {}};
        gi.v.assign(gi.c * gi.n * gi.plane(), T{0});
        const std::size_t op = g.plane(), ip = gi.plane();
        for (std::size_t p = 0; p < gi.c * gi.n; ++p)
          for (std::size_t i = 0; i < op; ++i) gi.v[p * ip + cache.argmax[p * op + i]] += g.v[p * op + i];
        g = std::move(gi);
        break;
      }
      case LayerKind::batch_norm: {
        const std::size_t R = g.row();
        const auto& gamma = params[cache.scale_index].value;
        auto& ggamma = grads.params[cache.scale_index];
        auto& gbeta = grads.params[cache.shift_index];
        for (std::size_t c = 0; c < g.c; ++c) {
          T* dy = g.v.data() + c * R;
          const T* xh = cache.saved.data() + c * R;
          const double sum_dy = lane_sum(dy, R);
          const double sum_dy_xh = lane_dot(dy, xh, R);
          ggamma[c] += static_cast<T>(sum_dy_xh);
          gbeta[c] += static_cast<T>(sum_dy);
          const T k = gamma[c] * cache.inv_std[c];
          const T mean_dy = static_cast<T>(sum_dy / R), mean_dy_xh = static_cast<T>(sum_dy_xh / R);
          for (std::size_t i = 0; i < R; ++i) dy[i] = k * (dy[i] - mean_dy - xh[i] * mean_dy_xh);
        }
        break;
      }
      case LayerKind::relu: {
        for (std::size_t i = 0; i < g.v.size(); ++i) {
          if (!(cache.saved[i] > T{0})) g.v[i] = T{0};
        }
        break;
      }
      case LayerKind::conv3x3: {
        const std::size_t K = spec.in * 9, R = g.row();
        ConstMatMap<T> gm(g.v.data(), spec.out, R);
        ConstMatMap<T> cm(cache.saved.data(), K, R);
        RowMat<T> dweff = gm * cm.transpose();
        auto& gw = grads.params[cache.weight_index];
        auto& gb = grads.params[cache.bias_index];
        const auto& w = params[cache.weight_index].value;
        const Tensor<T>* m = td.mask ? &(*td.mask)[cache.mask_index] : nullptr;
        for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += m ? (*m)[i] * dweff.data()[i] : dweff.data()[i];
        if (want_mask) {
          auto& gmk = grads.mask[cache.mask_index];
          for (std::size_t i = 0; i < gmk.size(); ++i) gmk[i] += w[i] * dweff.data()[i];
        }
        add_row_sums(g.v.data(), spec.out, R, gb);
        if (need_input_grad) {
          Buf<T> dcol(K * R);
          ConstMatMap<T> wm(cache.weight_eff.data(), spec.out, K);
          MatMap<T> dm(dcol.data(), K, R);
          dm.noalias() = wm.transpose() * gm;
          Act<T> gi{cache.in_c, cache.in_n, cache.in_h, cache.in_w, Buf<T>(cache.in_c * R)};
          col2im3x3(dcol, gi);
          g = std::move(gi);
        }
        break;
      }
    }
  }
}

template <typename T>
void update_running_stats(ParameterSet<T>& params, const Trace<T>& trace, double momentum) {
  const auto& td = trace.data();
  if (td.mode != Mode::train) return;
  if (td.params != &params) {
    // The trace may come from a copy of these parameters; match by position.
    if (td.params->size() != params.size()) throw ShapeError("trace belongs to a different parameter set");
  }
  const T keep = static_cast<T>(momentum), take = static_cast<T>(1.0 - momentum);
  for (std::size_t li = 0; li < td.arch->layers.size(); ++li) {
    if (td.arch->layers[li].kind != LayerKind::batch_norm) continue;
    const auto& cache = td.layers[li];
    auto& rm = params[cache.mean_index].value;
    auto& rv = params[cache.var_index].value;
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm[c] = keep * rm[c] + take * cache.batch_mean[c];
      rv[c] = keep * rv[c] + take * cache.batch_var[c];
    }
  }
}

template <typename T>
LossAndGrads<T> loss_and_grads(const Architecture& arch, const ParameterSet<T>& params,
                               MaskArg<T> mask, const Tensor<T>& batch, std::span<const int> labels,
                               const LossFn<T>& loss_fn, std::int64_t step, bool with_mask_grads) {
  auto trace = forward_trace(arch, params, mask, batch, Mode::train);
  auto loss = loss_fn(trace.scores(), labels);
  if (!std::isfinite(static_cast<double>(loss.value))) throw NumericalError("non-finite loss", step);
  LossAndGrads<T> out{loss.value, Gradients<T>::zeros_like(params, with_mask_grads)};
  backward(trace, loss.dscores, out.grads);
  return out;
}

#define MODNET_INSTANTIATE(T)                                                                                    \
  template class ParameterSet<T>;                                                                                \
  template class Trace<T>;                                                                                       \
  template struct Gradients<T>;                                                                                  \
  template ParameterSet<T> init_parameters<T>(const Architecture&, std::uint64_t);                               \
  template std::pair<Architecture, ParameterSet<T>> build_convnet<T>(std::size_t, std::size_t, std::uint64_t,    \
                                                                     const ConvNetOptions&);                     \
  template Tensor<T> forward<T>(const Architecture&, const ParameterSet<T>&, const MaskMultipliers<T>*,          \
                                const Tensor<T>&, Mode);                                                         \
  template Trace<T> forward_trace<T>(const Architecture&, const ParameterSet<T>&, const MaskMultipliers<T>*,     \
                                     const Tensor<T>&, Mode);                                                    \
  template void backward<T>(const Trace<T>&, const Tensor<T>&, Gradients<T>&);                                   \
  template void update_running_stats<T>(ParameterSet<T>&, const Trace<T>&, double);                              \
  template LossAndGrads<T> loss_and_grads<T>(const Architecture&, const ParameterSet<T>&,                        \
                                             const MaskMultipliers<T>*, const Tensor<T>&, std::span<const int>,  \
                                             const LossFn<T>&, std::int64_t, bool);

MODNET_INSTANTIATE(float)
MODNET_INSTANTIATE(double)

#undef MODNET_INSTANTIATE

}  // namespace modnet::nn
