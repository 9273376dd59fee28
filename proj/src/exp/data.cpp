#include <algorithm>
#include <cstdlib>
#include <numeric>
#include <random>

#include "modnet/error.hpp"
#include "modnet/exp/experiment.hpp"

namespace modnet::exp {

Assets Assets::from_environment() {
  const char* env = std::getenv("MODNET_DATA_DIR");
  return {env && *env ? fs::path(env) : fs::path("data")};
}

data::GrayImages Assets::load_mnist() const {
  for (const auto& dir : {data_dir / "mnist", data_dir}) {
    const auto images = dir / "train-images-idx3-ubyte";
    const auto labels = dir / "train-labels-idx1-ubyte";
    if (fs::exists(images) && fs::exists(labels)) return data::load_mnist_idx(images, labels);
  }
  throw ConfigError("MNIST IDX files not found under " + data_dir.string() +
                    " (set MODNET_DATA_DIR or run tools/fetch_mnist.py)");
}

fs::path Assets::cache_dir(const DatasetConfig& d, std::uint64_t seed) const {
  return data_dir / "cache" / (io::fnv1a_hex(d.to_json().dump()) + "-seed-" + std::to_string(seed));
}

std::vector<data::EnvironmentDataset> plain_mnist_task(const data::GrayImages& mnist, std::uint64_t seed,
                                                       std::size_t limit, double test_fraction) {
  std::vector<std::size_t> order(mnist.count);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(data::derive_seed(seed, 0x91a1));
  std::shuffle(order.begin(), order.end(), rng);
  if (limit > 0 && limit < order.size()) order.resize(limit);

  data::EnvironmentDataset all;
  all.env_id = 0;
  all.seen = true;
  all.provenance = data::Provenance::out_domain;
  all.source_index = order;
  const std::size_t plane = mnist.rows * mnist.cols;
  all.images.resize(order.size() * all.image_size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    all.class_labels.push_back(mnist.labels[order[i]]);
    all.color_labels.push_back(0);
    auto img = data::colorize({mnist.pixels.data() + order[i] * plane, plane}, mnist.rows, mnist.cols, {255, 255, 255});
    std::copy(img.begin(), img.end(), all.images.begin() + i * all.image_size());
  }
  auto split = data::split_out_domain(all, 1.0 - test_fraction, seed);
  split.in_split.provenance = data::Provenance::seen;
  split.in_split.seen = true;
  split.in_split.env_id = 0;
  split.out_split.provenance = data::Provenance::eval_split;
  split.out_split.seen = false;
  split.out_split.env_id = 1;
  return {std::move(split.in_split), std::move(split.out_split)};
}

namespace {

std::vector<data::EnvironmentDataset> build_envs(const DatasetConfig& d, std::uint64_t seed,
                                                 const data::GrayImages& mnist) {
  if (d.generator == "mnist") return plain_mnist_task(mnist, seed, d.limit, d.holdout_fraction);
  return data::build_full_colored_mnist(mnist, d.bias_spec(), data::ColorPalette::standard(), seed, d.limit);
}

data::BiasSpec spec_for(const DatasetConfig& d) {
  if (d.generator == "mnist") return {d.mapping, {0.0, 0.0}, 1};
  return d.bias_spec();
}

}  // namespace

fs::path generate_data(const DatasetConfig& d, std::uint64_t seed, const Assets& assets) {
  d.validate();
  const auto dir = assets.cache_dir(d, seed);
  const auto mnist = assets.load_mnist();
  data::save_datasets(build_envs(d, seed, mnist), spec_for(d), seed, dir);
  io::write_json(dir / "dataset.json", d.to_json());
  return dir;
}

PreparedData prepare_data(const DatasetConfig& d, std::uint64_t seed, const Assets& assets,
                          const data::GrayImages* mnist) {
  d.validate();
  std::vector<data::EnvironmentDataset> envs;
  const auto cache = assets.cache_dir(d, seed);
  if (fs::exists(cache / "meta.json") && fs::exists(cache / "dataset.json") &&
      io::read_json(cache / "dataset.json") == d.to_json()) {
    envs = data::load_datasets(cache).envs;
  } else if (mnist) {
    envs = build_envs(d, seed, *mnist);
  } else {
    envs = build_envs(d, seed, assets.load_mnist());
  }

  PreparedData out;
  out.spec = spec_for(d);
  if (d.generator == "mnist") {
    out.stage.train = {std::move(envs.at(0))};
    out.stage.eval = std::move(envs.at(1));
    return out;
  }
  for (std::size_t e = 0; e < d.num_seen; ++e) out.stage.train.push_back(std::move(envs.at(e)));
  // the first out-domain environment supplies the oracle in-split and the evaluation split
  auto split = data::split_out_domain(envs.at(d.num_seen), d.holdout_fraction, seed);
  out.probe = std::move(split.in_split);
  out.stage.eval = std::move(split.out_split);
  return out;
}

}  // namespace modnet::exp
