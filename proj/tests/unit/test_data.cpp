#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "modnet/data/biased.hpp"

using namespace modnet;
using namespace modnet::data;
namespace fs = std::filesystem;

namespace {

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<unsigned char> be(std::uint32_t v) {
  return {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 8),
          static_cast<unsigned char>(v)};
}

struct IdxFixture {
  fs::path dir = fs::temp_directory_path() / "modnet_idx_fixture";
  fs::path images = dir / "img.idx";
  fs::path labels = dir / "lab.idx";
  IdxFixture() {
    fs::create_directories(dir);
    std::vector<unsigned char> img;
    for (auto v : {0x803u, 2u, 2u, 3u})
      for (auto b : be(v)) img.push_back(b);
    for (unsigned char px : {0, 51, 102, 153, 204, 255, 255, 0, 255, 0, 255, 0}) img.push_back(px);
    write_bytes(images, img);
    std::vector<unsigned char> lab;
    for (auto v : {0x801u, 2u})
      for (auto b : be(v)) lab.push_back(b);
    lab.push_back(7);
    lab.push_back(3);
    write_bytes(labels, lab);
  }
  ~IdxFixture() { fs::remove_all(dir); }
};

GrayImages synthetic_gray(std::size_t n, std::size_t side = 28) {
  GrayImages g;
  g.count = n;
  g.rows = g.cols = side;
  g.pixels.resize(n * side * side);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) g.pixels[i] = static_cast<float>((i * 37) % 256) / 255.0f;
  for (std::size_t i = 0; i < n; ++i) g.labels.push_back(static_cast<int>(i % 10));
  return g;
}

bool within_3_sigma(double frac, double p, std::size_t n) {
  const double q = p + (1 - p) / 10;
  const double sd = std::sqrt(q * (1 - q) / static_cast<double>(n));
  return std::abs(frac - q) <= 3 * sd + 1e-12;
}

}  // namespace

TEST_CASE("IDX fixture parses to exact pixel values") {
  IdxFixture f;
  auto g = load_mnist_idx(f.images, f.labels);
  CHECK(g.count == 2);
  CHECK(g.rows == 2);
  CHECK(g.cols == 3);
  CHECK(g.labels == std::vector<int>{7, 3});
  CHECK(g.pixels[0] == 0.0f);
  CHECK(g.pixels[1] == 51.0f / 255.0f);
  CHECK(g.pixels[5] == 1.0f);
  CHECK(g.pixels[11] == 0.0f);
}

TEST_CASE("IDX errors name the offending part") {
  IdxFixture f;
  write_bytes(f.dir / "empty", {});
  CHECK_THROWS_WITH_AS(load_mnist_idx(f.dir / "empty", f.labels), doctest::Contains("magic"), FormatError);
  CHECK_THROWS_WITH_AS(load_mnist_idx(f.labels, f.labels), doctest::Contains("offset 0"), FormatError);
  fs::resize_file(f.images, 20);
  CHECK_THROWS_WITH_AS(load_mnist_idx(f.images, f.labels), doctest::Contains("truncated"), FormatError);
  IdxFixture g;
  std::vector<unsigned char> lab;
  for (auto v : {0x801u, 3u})
    for (auto b : be(v)) lab.push_back(b);
  lab.insert(lab.end(), {1, 2, 3});
  write_bytes(g.labels, lab);
  CHECK_THROWS_WITH_AS(load_mnist_idx(g.images, g.labels), doctest::Contains("offset 4"), FormatError);
}

TEST_CASE("MNIST on disk, when present, has matching image and label counts") {
  const char* env = std::getenv("MODNET_DATA_DIR");
  fs::path dir = env ? fs::path(env) / "mnist" : fs::path(MODNET_SOURCE_DIR) / "data" / "mnist";
  if (!fs::exists(dir / "train-images-idx3-ubyte")) return;
  auto g = load_mnist_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  CHECK(g.count == g.labels.size());
  CHECK(g.rows == 28);
  CHECK(g.cols == 28);
  if (g.count == 60000) CHECK(g.pixels.size() == 60000u * 784u);
}

TEST_CASE("default palette") {
  auto p = ColorPalette::standard();
  REQUIRE(p.colors.size() == 10);
  CHECK(p.colors[0] == Rgb{0, 100, 0});
  CHECK(p.colors[4] == Rgb{0, 255, 0});
  CHECK(p.colors[9] == Rgb{160, 160, 160});
  ColorPalette bad{{{1, 2, 3}}};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("colorize pads symmetrically and tints by intensity") {
  std::vector<float> zero(28 * 28, 0.0f);
  for (float v : colorize(zero, 28, 28, {255, 0, 0})) CHECK(v == 0.0f);

  std::vector<float> one(28 * 28, 0.0f);
  one[5 * 28 + 7] = 1.0f;
  auto img = colorize(one, 28, 28, {255, 0, 0});
  const std::size_t at = (5 + 2) * 32 + (7 + 2);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(img[i] == (i == at ? 1.0f : 0.0f));

  auto g = synthetic_gray(1);
  auto green = colorize(g.pixels, 28, 28, ColorPalette::standard().colors[4]);
  for (std::size_t i = 0; i < 1024; ++i) {
    CHECK(green[i] == 0.0f);
    CHECK(green[2048 + i] == 0.0f);
  }
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 28; ++y)
      for (std::size_t x = 0; x < 28; ++x) CHECK(green[(c * 32 + y + 2) * 32 + x + 2] <= g.pixels[y * 28 + x]);
}

TEST_CASE("colored environments follow the bias-fraction law") {
  auto mnist = synthetic_gray(20000, 4);
  BiasSpec spec;
  spec.mapping = {3, 1, 4, 0, 5, 9, 2, 6, 8, 7};
  spec.bias_coefficients = {0.9, 0.0};
  spec.num_seen = 1;
  auto envs = build_full_colored_mnist(mnist, spec, ColorPalette::standard(), 5);
  REQUIRE(envs.size() == 2);
  CHECK(envs[0].size() == 10000);
  const double f0 = mapped_fraction(envs[0], spec.mapping), f1 = mapped_fraction(envs[1], spec.mapping);
  CHECK(std::abs(f0 - 0.91) <= 0.01);
  CHECK(std::abs(f1 - 0.10) <= 0.01);
  CHECK(within_3_sigma(f0, 0.9, 10000));
  CHECK(within_3_sigma(f1, 0.0, 10000));
  CHECK(envs[0].seen);
  CHECK_FALSE(envs[1].seen);
  CHECK(envs[1].provenance == Provenance::out_domain);

  std::set<std::size_t> seen_items;
  for (const auto& e : envs)
    for (auto i : e.source_index) CHECK(seen_items.insert(i).second);
  CHECK(seen_items.size() == 20000);
  for (const auto& e : envs)
    CHECK(std::all_of(e.images.begin(), e.images.end(), [](float v) { return v >= 0.0f && v <= 1.0f; }));
}

TEST_CASE("full colored MNIST preset: fully biased domain, reproducibility, guards") {
  auto mnist = synthetic_gray(300);
  auto spec = BiasSpec::full_colored_mnist();
  auto a = build_full_colored_mnist(mnist, spec, ColorPalette::standard(), 9);
  auto b = build_full_colored_mnist(mnist, spec, ColorPalette::standard(), 9);
  REQUIRE(a.size() == 3);
  CHECK(mapped_fraction(a[0], spec.mapping) == 1.0);
  for (std::size_t e = 0; e < 3; ++e) {
    CHECK(a[e].images == b[e].images);
    CHECK(a[e].color_labels == b[e].color_labels);
  }
  // exactly floor(0.9 * 100) items carry the mapped color by construction; random ones may add more
  CHECK(mapped_fraction(a[1], spec.mapping) >= 0.9);

  auto bad = spec;
  bad.mapping[0] = 1;
  CHECK_THROWS_AS(build_full_colored_mnist(mnist, bad, ColorPalette::standard(), 0), ConfigError);
  ColorPalette short_palette{{{0, 0, 0}}};
  CHECK_THROWS_AS(build_full_colored_mnist(mnist, spec, short_palette, 0), ConfigError);
}

TEST_CASE("compositor") {
  ImageBank fg;
  fg.height = fg.width = 4;
  for (int c = 0; c < 10; ++c) {
    fg.labels.push_back(c);
    for (int i = 0; i < 48; ++i) fg.images.push_back(0.5f);
  }
  BiasSpec spec = BiasSpec::full_colored_mnist();
  spec.bias_coefficients = {1.0, 1.0};
  spec.num_seen = 1;

  SUBCASE("all-ones object mask reproduces the foreground") {
    fg.object_masks.assign(10 * 16, 1);
    auto envs = composite_object_background(fg, {}, spec, 4, 4, 1);
    for (const auto& e : envs)
      for (float v : e.images) CHECK(v == 0.5f);
  }
  SUBCASE("all-zeros object mask reproduces the background") {
    fg.object_masks.assign(10 * 16, 0);
    auto envs = composite_object_background(fg, {}, spec, 4, 4, 1);
    const auto pal = ColorPalette::standard();
    for (const auto& e : envs)
      for (std::size_t i = 0; i < e.size(); ++i)
        for (std::size_t c = 0; c < 3; ++c)
          CHECK(e.images[i * 48 + c * 16 + 5] == static_cast<float>(pal.colors[e.color_labels[i]][c]) / 255.0f);
  }
  SUBCASE("missing class is named") {
    fg.object_masks.assign(10 * 16, 1);
    fg.labels[4] = 3;
    CHECK_THROWS_WITH_AS(composite_object_background(fg, {}, spec, 4, 4, 1), doctest::Contains("class 4"),
                         ConfigError);
  }
  SUBCASE("scene backgrounds") {
    fg.object_masks.assign(10 * 16, 0);
    BackgroundSource bg;
    bg.mode = BackgroundMode::scene;
    bg.scenes.height = bg.scenes.width = 2;
    for (int c = 0; c < 10; ++c) {
      bg.scenes.labels.push_back(c);
      for (int i = 0; i < 12; ++i) bg.scenes.images.push_back(static_cast<float>(c) / 10.0f);
    }
    auto envs = composite_object_background(fg, bg, spec, 4, 4, 1);
    for (const auto& e : envs)
      for (std::size_t i = 0; i < e.size(); ++i) CHECK(e.images[i * 48] == static_cast<float>(e.color_labels[i]) / 10.0f);
  }
}

TEST_CASE("synthetic shape bank on palette backgrounds follows the bias law") {
  auto bank = synthetic_shape_bank(1000, 16, 3);
  CHECK(bank.count() == 10000);
  BiasSpec spec = BiasSpec::full_colored_mnist();
  spec.bias_coefficients = {0.8, 0.0};
  spec.num_seen = 1;
  auto envs = composite_object_background(bank, {}, spec, 16, 16, 2);
  CHECK(envs[0].size() == 5000);
  CHECK(std::abs(mapped_fraction(envs[0], spec.mapping) - 0.82) <= 0.02);
}

TEST_CASE("split_out_domain") {
  auto mnist = synthetic_gray(3000, 4);
  BiasSpec spec;
  spec.mapping = BiasSpec::full_colored_mnist().mapping;
  spec.bias_coefficients = {1.0, 0.0, 0.0};
  auto envs = build_full_colored_mnist(mnist, spec, ColorPalette::standard(), 1);
  const auto& env = envs[2];
  REQUIRE(env.size() == 1000);
  auto pair = split_out_domain(env, 0.5, 4);
  CHECK(pair.in_split.size() == 500);
  CHECK(pair.out_split.size() == 500);
  CHECK(pair.in_split.provenance == Provenance::probe_split);
  CHECK(pair.out_split.provenance == Provenance::eval_split);
  std::set<std::size_t> a(pair.in_split.source_index.begin(), pair.in_split.source_index.end());
  std::set<std::size_t> all(env.source_index.begin(), env.source_index.end());
  for (auto i : pair.out_split.source_index) {
    CHECK(a.count(i) == 0);
    a.insert(i);
  }
  CHECK(a == all);

  for (double frac : {0.5, 0.3, 0.77}) {
    auto p = split_out_domain(env, frac, 11);
    std::array<int, 10> total{}, in{};
    for (int c : env.class_labels) ++total[c];
    for (int c : p.in_split.class_labels) ++in[c];
    for (int c = 0; c < 10; ++c) CHECK(std::abs(in[c] - frac * total[c]) <= 1.0);
  }
  CHECK(split_out_domain(env, 0.5, 4).in_split.source_index == pair.in_split.source_index);

  auto ten = env.subset(std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  CHECK_THROWS_AS(split_out_domain(ten, 0.999, 0), ConfigError);
  CHECK_THROWS_AS(split_out_domain(ten, 0.0, 0), ConfigError);
  CHECK_THROWS_AS(split_out_domain(env.subset(std::vector<std::size_t>{0}), 0.5, 0), ConfigError);
}

TEST_CASE("rearrange_bias yields derangements") {
  auto spec = BiasSpec::full_colored_mnist();
  for (std::uint64_t s = 0; s < 1000; ++s) {
    auto r = rearrange_bias(spec, s);
    REQUIRE(is_permutation_of_classes(r.mapping));
    for (int c = 0; c < 10; ++c) REQUIRE(r.mapping[c] != spec.mapping[c]);
    REQUIRE(r.bias_coefficients == spec.bias_coefficients);
  }
  CHECK(rearrange_bias(spec, 7).mapping == rearrange_bias(spec, 7).mapping);
}

TEST_CASE("dataset directory round-trip") {
  auto mnist = synthetic_gray(90);
  auto spec = BiasSpec::full_colored_mnist();
  auto envs = build_full_colored_mnist(mnist, spec, ColorPalette::standard(), 2);
  const auto dir = fs::temp_directory_path() / "modnet_ds_test";
  fs::remove_all(dir);
  save_datasets(envs, spec, 2, dir);
  auto back = load_datasets(dir);
  CHECK(back.seed == 2);
  CHECK(back.spec.mapping == spec.mapping);
  REQUIRE(back.envs.size() == envs.size());
  for (std::size_t e = 0; e < envs.size(); ++e) {
    CHECK(back.envs[e].images == envs[e].images);
    CHECK(back.envs[e].class_labels == envs[e].class_labels);
    CHECK(back.envs[e].color_labels == envs[e].color_labels);
    CHECK(back.envs[e].provenance == envs[e].provenance);
  }
  fs::resize_file(dir / "env1_images.bin", 100);
  CHECK_THROWS_WITH_AS(load_datasets(dir), doctest::Contains("env1"), FormatError);
  fs::remove_all(dir);
}
