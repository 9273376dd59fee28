#include "modnet/data/biased.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "modnet/error.hpp"
#include "modnet/io.hpp"

namespace modnet::data {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& file) {
  if (b.size() < off + 4) {
    throw FormatError(file + ": truncated header at offset " + std::to_string(off) + " (file has " +
                      std::to_string(b.size()) + " bytes)");
  }
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

std::size_t biased_count(double p, std::size_t n) {
  return static_cast<std::size_t>(std::floor(p * static_cast<double>(n) + 1e-9));
}

// Assigns spurious indices for one environment: exactly floor(p*n) positions
// (seeded) follow the mapping, the others are uniform over all ten.
std::vector<int> assign_spurious(std::span<const int> classes, const BiasSpec& spec, std::size_t env,
                                 std::uint64_t seed) {
  const std::size_t n = classes.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 env_rng(derive_seed(seed, env, 0xb1a5ull));
  std::shuffle(order.begin(), order.end(), env_rng);
  std::vector<char> biased(n, 0);
  const std::size_t nb = biased_count(spec.bias_coefficients[env], n);
  for (std::size_t k = 0; k < nb; ++k) biased[order[k]] = 1;

  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (biased[i]) {
      out[i] = spec.mapping[classes[i]];
    } else {
      std::mt19937_64 item_rng(derive_seed(seed, env + 1, i));
      out[i] = static_cast<int>(item_rng() % 10);
    }
  }
  return out;
}

std::vector<std::vector<std::size_t>> partition(std::size_t total, std::size_t parts, std::uint64_t seed,
                                                std::size_t limit) {
  std::vector<std::size_t> perm(total);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0x5eedull, 0));
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t n = (limit == 0 || limit > total) ? total : limit;
  std::vector<std::vector<std::size_t>> out(parts);
  for (std::size_t e = 0; e < parts; ++e) {
    const std::size_t lo = e * n / parts, hi = (e + 1) * n / parts;
    out[e].assign(perm.begin() + lo, perm.begin() + hi);
  }
  return out;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return splitmix(splitmix(splitmix(seed) ^ a) ^ (b * 0x9e3779b97f4a7c15ull + 0x632be59bd9b4e019ull));
}

GrayImages load_mnist_idx(const std::filesystem::path& image_path, const std::filesystem::path& label_path) {
  const auto img = read_all(image_path);
  const auto lab = read_all(label_path);
  const auto img_name = image_path.filename().string();
  const auto lab_name = label_path.filename().string();
  if (img.size() < 4) throw FormatError(img_name + ": missing magic number 0x00000803 at offset 0");
  if (lab.size() < 4) throw FormatError(lab_name + ": missing magic number 0x00000801 at offset 0");
  if (auto m = be32(img, 0, img_name); m != kImageMagic) {
    throw FormatError(img_name + ": bad magic " + std::to_string(m) + " at offset 0, expected 0x00000803");
  }
  if (auto m = be32(lab, 0, lab_name); m != kLabelMagic) {
    throw FormatError(lab_name + ": bad magic " + std::to_string(m) + " at offset 0, expected 0x00000801");
  }
  GrayImages out;
  out.count = be32(img, 4, img_name);
  out.rows = be32(img, 8, img_name);
  out.cols = be32(img, 12, img_name);
  const std::size_t nlabels = be32(lab, 4, lab_name);
  if (nlabels != out.count) {
    throw FormatError("image count " + std::to_string(out.count) + " (offset 4 of " + img_name +
                      ") differs from label count " + std::to_string(nlabels) + " (offset 4 of " + lab_name + ")");
  }
  const std::size_t pix = out.count * out.rows * out.cols;
  if (img.size() < 16 + pix) {
    throw FormatError(img_name + ": truncated pixel data at offset " + std::to_string(img.size()) + ", expected " +
                      std::to_string(16 + pix) + " bytes");
  }
  if (lab.size() < 8 + nlabels) {
    throw FormatError(lab_name + ": truncated label data at offset " + std::to_string(lab.size()) + ", expected " +
                      std::to_string(8 + nlabels) + " bytes");
  }
  out.pixels.resize(pix);
  for (std::size_t i = 0; i < pix; ++i) out.pixels[i] = static_cast<float>(img[16 + i]) / 255.0f;
  out.labels.resize(nlabels);
  for (std::size_t i = 0; i < nlabels; ++i) out.labels[i] = lab[8 + i];
  return out;
}

ColorPalette ColorPalette::standard() {
  return {{{0, 100, 0},
           {188, 143, 143},
           {255, 0, 0},
           {255, 215, 0},
           {0, 255, 0},
           {65, 105, 225},
           {0, 225, 225},
           {0, 0, 255},
           {255, 20, 147},
           {160, 160, 160}}};
}

void ColorPalette::validate() const {
  if (colors.size() != 10) throw ConfigError("palette must hold exactly 10 colors, got " + std::to_string(colors.size()));
  for (const auto& c : colors)
    for (int v : c)
      if (v < 0 || v > 255) throw ConfigError("palette channel out of [0,255]: " + std::to_string(v));
}

bool is_permutation_of_classes(std::span<const int> mapping) {
  if (mapping.size() != 10) return false;
  std::array<bool, 10> seen{};
  for (int m : mapping) {
    if (m < 0 || m > 9 || seen[m]) return false;
    seen[m] = true;
  }
  return true;
}

void BiasSpec::validate() const {
  if (!is_permutation_of_classes(mapping)) throw ConfigError("bias mapping must be a bijection on {0..9}");
  if (bias_coefficients.empty()) throw ConfigError("bias spec needs at least one environment");
  for (double p : bias_coefficients)
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("bias coefficient outside [0,1]: " + std::to_string(p));
  if (num_seen == 0 || num_seen > bias_coefficients.size()) throw ConfigError("num_seen out of range");
}

BiasSpec BiasSpec::full_colored_mnist() {
  BiasSpec s;
  s.mapping.resize(10);
  std::iota(s.mapping.begin(), s.mapping.end(), 0);
  s.bias_coefficients = {1.0, 0.9, 0.0};
  s.num_seen = 2;
  return s;
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::seen: return "seen";
    case Provenance::out_domain: return "out_domain";
    case Provenance::probe_split: return "probe_split";
    case Provenance::eval_split: return "eval_split";
  }
  return "?";
}

Provenance provenance_from_string(const std::string& s) {
  for (auto p : {Provenance::seen, Provenance::out_domain, Provenance::probe_split, Provenance::eval_split})
    if (to_string(p) == s) return p;
  throw FormatError("unknown provenance '" + s + "'");
}

EnvironmentDataset EnvironmentDataset::subset(std::span<const std::size_t> idx) const {
  EnvironmentDataset out;
  out.env_id = env_id;
  out.seen = seen;
  out.provenance = provenance;
  out.bias_coefficient = bias_coefficient;
  out.channels = channels;
  out.height = height;
  out.width = width;
  const std::size_t sz = image_size();
  out.images.resize(idx.size() * sz);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::copy_n(images.begin() + idx[k] * sz, sz, out.images.begin() + k * sz);
    out.class_labels.push_back(class_labels[idx[k]]);
    if (has_color_labels()) out.color_labels.push_back(color_labels[idx[k]]);
    if (!source_index.empty()) out.source_index.push_back(source_index[idx[k]]);
  }
  return out;
}

double mapped_fraction(const EnvironmentDataset& env, std::span<const int> mapping) {
  if (env.size() == 0) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < env.size(); ++i) hit += env.color_labels[i] == mapping[env.class_labels[i]];
  return static_cast<double>(hit) / static_cast<double>(env.size());
}

std::vector<float> colorize(std::span<const float> gray, std::size_t rows, std::size_t cols, const Rgb& rgb,
                            std::size_t out_size) {
  if (gray.size() != rows * cols) throw ShapeError("colorize: gray image size mismatch");
  if (rows > out_size || cols > out_size) throw ShapeError("colorize: image larger than output");
  const std::size_t top = (out_size - rows) / 2, left = (out_size - cols) / 2;
  std::vector<float> out(3 * out_size * out_size, 0.0f);
  for (std::size_t c = 0; c < 3; ++c) {
    const float tint = static_cast<float>(rgb[c]) / 255.0f;
    float* plane = out.data() + c * out_size * out_size;
    for (std::size_t y = 0; y < rows; ++y)
      for (std::size_t x = 0; x < cols; ++x) plane[(y + top) * out_size + (x + left)] = gray[y * cols + x] * tint;
  }
  return out;
}

std::vector<EnvironmentDataset> build_full_colored_mnist(const GrayImages& mnist, const BiasSpec& spec,
                                                         const ColorPalette& palette, std::uint64_t seed,
                                                         std::size_t limit) {
  palette.validate();
  spec.validate();
  if (spec.num_environments() < 2) throw ConfigError("need at least two environments");
  const auto parts = partition(mnist.count, spec.num_environments(), seed, limit);
  const std::size_t plane = mnist.rows * mnist.cols;
  std::vector<EnvironmentDataset> envs;
  for (std::size_t e = 0; e < parts.size(); ++e) {
    EnvironmentDataset env;
    env.env_id = static_cast<int>(e);
    env.seen = e < spec.num_seen;
    env.provenance = env.seen ? Provenance::seen : Provenance::out_domain;
    env.bias_coefficient = spec.bias_coefficients[e];
    env.channels = 3;
    env.height = env.width = 32;
    env.source_index = parts[e];
    for (auto src : parts[e]) env.class_labels.push_back(mnist.labels[src]);
    env.color_labels = assign_spurious(env.class_labels, spec, e, seed);
    env.images.resize(env.size() * env.image_size());
    for (std::size_t i = 0; i < env.size(); ++i) {
      auto img = colorize({mnist.pixels.data() + parts[e][i] * plane, plane}, mnist.rows, mnist.cols,
                          palette.colors[env.color_labels[i]]);
      std::copy(img.begin(), img.end(), env.images.begin() + i * env.image_size());
    }
    envs.push_back(std::move(env));
  }
  return envs;
}

namespace {

// Nearest-neighbour sample of a bank image at output pixel (y, x).
float sample_bank(const ImageBank& bank, std::size_t item, std::size_t c, std::size_t y, std::size_t x,
                  std::size_t height, std::size_t width) {
  const std::size_t sy = y * bank.height / height, sx = x * bank.width / width;
  return bank.images[((item * bank.channels + c) * bank.height + sy) * bank.width + sx];
}

}  // namespace

std::vector<EnvironmentDataset> composite_object_background(const ImageBank& foregrounds,
                                                            const BackgroundSource& backgrounds,
                                                            const BiasSpec& spec, std::size_t height,
                                                            std::size_t width, std::uint64_t seed) {
  spec.validate();
  if (foregrounds.channels != 3) throw ConfigError("foreground bank must be RGB");
  if (foregrounds.object_masks.size() != foregrounds.count() * foregrounds.height * foregrounds.width) {
    throw ConfigError("foreground bank needs one binary object mask per image");
  }
  std::array<std::vector<std::size_t>, 10> fg_by_class, bg_by_class;
  for (std::size_t i = 0; i < foregrounds.count(); ++i) fg_by_class.at(foregrounds.labels[i]).push_back(i);
  for (int c = 0; c < 10; ++c)
    if (fg_by_class[c].empty()) throw ConfigError("foreground bank has no images for class " + std::to_string(c));
  if (backgrounds.mode == BackgroundMode::palette) {
    backgrounds.palette.validate();
  } else {
    if (backgrounds.scenes.channels != 3) throw ConfigError("scene bank must be RGB");
    for (std::size_t i = 0; i < backgrounds.scenes.count(); ++i)
      bg_by_class.at(backgrounds.scenes.labels[i]).push_back(i);
    for (int c = 0; c < 10; ++c)
      if (bg_by_class[c].empty()) throw ConfigError("scene bank has no images for background class " + std::to_string(c));
  }

  const auto parts = partition(foregrounds.count(), spec.num_environments(), seed, 0);
  std::vector<EnvironmentDataset> envs;
  for (std::size_t e = 0; e < parts.size(); ++e) {
    EnvironmentDataset env;
    env.env_id = static_cast<int>(e);
    env.seen = e < spec.num_seen;
    env.provenance = env.seen ? Provenance::seen : Provenance::out_domain;
    env.bias_coefficient = spec.bias_coefficients[e];
    env.channels = 3;
    env.height = height;
    env.width = width;
    env.source_index = parts[e];
    for (auto src : parts[e]) env.class_labels.push_back(foregrounds.labels[src]);
    env.color_labels = assign_spurious(env.class_labels, spec, e, seed);
    env.images.resize(env.size() * env.image_size());
    for (std::size_t i = 0; i < env.size(); ++i) {
      const std::size_t fg = parts[e][i];
      const int bg_class = env.color_labels[i];
      std::size_t scene = 0;
      if (backgrounds.mode == BackgroundMode::scene) {
        std::mt19937_64 rng(derive_seed(seed, 0xbac6ull + e, i));
        const auto& pool = bg_by_class[bg_class];
        scene = pool[rng() % pool.size()];
      }
      float* dst = env.images.data() + i * env.image_size();
      for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
          const std::size_t my = y * foregrounds.height / height, mx = x * foregrounds.width / width;
          const bool object = foregrounds.object_masks[(fg * foregrounds.height + my) * foregrounds.width + mx] != 0;
          for (std::size_t c = 0; c < 3; ++c) {
            float v;
            if (object) {
              v = sample_bank(foregrounds, fg, c, y, x, height, width);
            } else if (backgrounds.mode == BackgroundMode::palette) {
              v = static_cast<float>(backgrounds.palette.colors[bg_class][c]) / 255.0f;
            } else {
              v = sample_bank(backgrounds.scenes, scene, c, y, x, height, width);
            }
            dst[(c * height + y) * width + x] = v;
          }
        }
      }
    }
    envs.push_back(std::move(env));
  }
  return envs;
}

ImageBank synthetic_shape_bank(std::size_t per_class, std::size_t size, std::uint64_t seed) {
  if (size < 8) throw ConfigError("shape bank images must be at least 8 pixels");
  ImageBank bank;
  bank.channels = 3;
  bank.height = bank.width = size;
  const std::size_t n = per_class * 10;
  bank.images.assign(n * 3 * size * size, 0.0f);
  bank.object_masks.assign(n * size * size, 0);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-0.12, 0.12), scale(0.55, 0.8), tone(0.75, 1.0);
  for (std::size_t k = 0; k < n; ++k) {
    const int cls = static_cast<int>(k % 10);
    bank.labels.push_back(cls);
    const double cx = 0.5 + jitter(rng), cy = 0.5 + jitter(rng), r = 0.5 * scale(rng);
    const double t = tone(rng);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double u = ((x + 0.5) / size - cx) / r, v = ((y + 0.5) / size - cy) / r;
        const double d = std::sqrt(u * u + v * v);
        bool in = false;
        switch (cls) {
          case 0: in = d < 1.0; break;                                        // disc
          case 1: in = std::abs(u) < 0.8 && std::abs(v) < 0.8; break;         // square
          case 2: in = v > -0.8 && v < 0.8 && std::abs(u) < (v + 0.8) / 2; break;  // triangle
          case 3: in = (std::abs(u) < 0.25 || std::abs(v) < 0.25) && d < 1.0; break;  // plus
          case 4: in = d < 1.0 && d > 0.6; break;                             // ring
          case 5: in = std::abs(v) < 0.3 && std::abs(u) < 1.0; break;         // horizontal bar
          case 6: in = std::abs(u) < 0.3 && std::abs(v) < 1.0; break;         // vertical bar
          case 7: in = std::abs(u) + std::abs(v) < 1.0; break;                // diamond
          case 8: in = (std::abs(u - v) < 0.35 || std::abs(u + v) < 0.35) && d < 1.1; break;  // X
          case 9: in = (std::abs(u + 0.55) < 0.3 && std::abs(v) < 0.9) || (std::abs(v - 0.6) < 0.3 && std::abs(u) < 0.85);
            break;  // L
        }
        if (!in) continue;
        bank.object_masks[(k * size + y) * size + x] = 1;
        // light striped texture so objects carry their own appearance
        const float shade = static_cast<float>(t * (0.85 + 0.15 * ((x + y) % 2)));
        for (std::size_t c = 0; c < 3; ++c) bank.images[((k * 3 + c) * size + y) * size + x] = shade;
      }
    }
  }
  return bank;
}

SplitPair split_out_domain(const EnvironmentDataset& env, double fraction, std::uint64_t seed) {
  if (env.size() < 2) throw ConfigError("cannot split an environment with fewer than 2 items");
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in (0,1)");
  const std::size_t N = env.size();
  const auto target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(N)));
  if (target == 0 || target == N) {
    throw ConfigError("split fraction " + std::to_string(fraction) + " on " + std::to_string(N) +
                      " items leaves an empty " + (target == 0 ? "in_split" : "out_split"));
  }
  std::mt19937_64 rng(derive_seed(seed, 0x5717ull, static_cast<std::uint64_t>(env.env_id)));
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < N; ++i) by_class[env.class_labels[i]].push_back(i);

  // Largest-remainder apportionment keeps each class within +-1 of fraction * count.
  struct Quota {
    int cls;
    std::size_t take;
    double remainder;
    std::uint64_t tie;
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (auto& [cls, items] : by_class) {
    std::shuffle(items.begin(), items.end(), rng);
    const double exact = fraction * static_cast<double>(items.size());
    const auto take = static_cast<std::size_t>(std::floor(exact));
    quotas.push_back({cls, take, exact - static_cast<double>(take), rng()});
    assigned += take;
  }
  std::sort(quotas.begin(), quotas.end(), [](const Quota& a, const Quota& b) {
    return a.remainder != b.remainder ? a.remainder > b.remainder : a.tie < b.tie;
  });
  for (std::size_t k = 0; assigned < target && k < quotas.size(); ++k, ++assigned) ++quotas[k].take;
  for (std::size_t k = quotas.size(); assigned > target && k-- > 0;) {
    if (quotas[k].take > 0) {
      --quotas[k].take;
      --assigned;
    }
  }

  std::vector<std::size_t> in_idx, out_idx;
  for (const auto& q : quotas) {
    const auto& items = by_class[q.cls];
    in_idx.insert(in_idx.end(), items.begin(), items.begin() + q.take);
    out_idx.insert(out_idx.end(), items.begin() + q.take, items.end());
  }
  std::sort(in_idx.begin(), in_idx.end());
  std::sort(out_idx.begin(), out_idx.end());
  SplitPair pair{env.subset(in_idx), env.subset(out_idx)};
  pair.in_split.provenance = Provenance::probe_split;
  pair.out_split.provenance = Provenance::eval_split;
  return pair;
}

BiasSpec rearrange_bias(const BiasSpec& spec, std::uint64_t seed) {
  spec.validate();
  BiasSpec out = spec;
  std::mt19937_64 rng(derive_seed(seed, 0xde7aull, 0));
  std::vector<int> perm(10);
  while (true) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    bool fixed = false;
    for (int c = 0; c < 10 && !fixed; ++c) fixed = perm[c] == spec.mapping[c];
    if (!fixed) break;
  }
  out.mapping = perm;
  return out;
}

void save_datasets(const std::vector<EnvironmentDataset>& envs, const BiasSpec& spec, std::uint64_t seed,
                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::json jenvs = io::json::array();
  for (const auto& env : envs) {
    const auto stem = "env" + std::to_string(env.env_id);
    io::write_f32(dir / (stem + "_images.bin"), env.images);
    std::vector<std::uint8_t> cls(env.class_labels.begin(), env.class_labels.end());
    std::vector<std::uint8_t> col(env.color_labels.begin(), env.color_labels.end());
    io::write_u8(dir / (stem + "_labels.bin"), cls);
    io::write_u8(dir / (stem + "_colors.bin"), col);
    jenvs.push_back({{"env_id", env.env_id},
                     {"seen", env.seen},
                     {"provenance", to_string(env.provenance)},
                     {"bias_coefficient", env.bias_coefficient},
                     {"count", env.size()},
                     {"shape", {env.channels, env.height, env.width}},
                     {"source_index", env.source_index}});
  }
  io::write_json(dir / "meta.json", {{"format", "modnet-datasets"},
                                     {"seed", seed},
                                     {"mapping", spec.mapping},
                                     {"bias_coefficients", spec.bias_coefficients},
                                     {"num_seen", spec.num_seen},
                                     {"environments", jenvs}});
}

LoadedDatasets load_datasets(const std::filesystem::path& dir) {
  auto meta = io::read_json(dir / "meta.json");
  LoadedDatasets out;
  try {
    out.seed = meta.at("seed").get<std::uint64_t>();
    out.spec.mapping = meta.at("mapping").get<std::vector<int>>();
    out.spec.bias_coefficients = meta.at("bias_coefficients").get<std::vector<double>>();
    out.spec.num_seen = meta.at("num_seen").get<std::size_t>();
    for (const auto& j : meta.at("environments")) {
      EnvironmentDataset env;
      env.env_id = j.at("env_id").get<int>();
      env.seen = j.at("seen").get<bool>();
      env.provenance = provenance_from_string(j.at("provenance").get<std::string>());
      env.bias_coefficient = j.at("bias_coefficient").get<double>();
      const auto shape = j.at("shape").get<std::vector<std::size_t>>();
      env.channels = shape.at(0);
      env.height = shape.at(1);
      env.width = shape.at(2);
      const auto count = j.at("count").get<std::size_t>();
      env.source_index = j.at("source_index").get<std::vector<std::size_t>>();
      const auto stem = "env" + std::to_string(env.env_id);
      env.images = io::read_f32(dir / (stem + "_images.bin"), count * env.image_size(), stem + " images");
      auto cls = io::read_u8(dir / (stem + "_labels.bin"), count, stem + " labels");
      auto col = io::read_u8(dir / (stem + "_colors.bin"), count, stem + " colors");
      env.class_labels.assign(cls.begin(), cls.end());
      env.color_labels.assign(col.begin(), col.end());
      out.envs.push_back(std::move(env));
    }
  } catch (const io::json::exception& e) {
    throw FormatError((dir / "meta.json").string() + ": " + e.what());
  }
  return out;
}

}  // namespace modnet::data
