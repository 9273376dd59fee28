#include "modnet/nn/checkpoint.hpp"

#include "modnet/io.hpp"

namespace modnet::nn {

namespace {

std::string file_for(const std::string& name) { return name + ".bin"; }

}  // namespace

template <typename T>
void save_checkpoint(const ParameterSet<T>& params, const std::filesystem::path& dir, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  io::json layers = io::json::array();
  for (const auto& e : params.entries()) {
    std::vector<float> values(e.value.storage().begin(), e.value.storage().end());
    io::write_f32(dir / file_for(e.name), values);
    layers.push_back({{"name", e.name}, {"role", to_string(e.role)}, {"shape", e.value.shape()},
                      {"file", file_for(e.name)}});
  }
  io::write_json(dir / "manifest.json", {{"format", "modnet-checkpoint"},
                                         {"dtype", "float32"},
                                         {"byte_order", "little"},
                                         {"step_count", params.step_count},
                                         {"seed", seed},
                                         {"layers", layers}});
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& dir) {
  auto manifest = io::read_json(dir / "manifest.json");
  LoadedCheckpoint<T> out;
  try {
    if (manifest.at("dtype") != "float32") throw FormatError("checkpoint dtype must be float32");
    out.seed = manifest.at("seed").get<std::uint64_t>();
    out.params.step_count = manifest.at("step_count").get<std::uint64_t>();
    for (const auto& l : manifest.at("layers")) {
      const auto name = l.at("name").get<std::string>();
      const auto shape = l.at("shape").get<Shape>();
      auto raw = io::read_f32(dir / l.at("file").get<std::string>(), shape_size(shape), "layer '" + name + "'");
      out.params.add(name, param_role_from_string(l.at("role").get<std::string>()),
                     Tensor<T>(shape, std::vector<T>(raw.begin(), raw.end())));
    }
  } catch (const io::json::exception& e) {
    throw FormatError(dir.string() + "/manifest.json: " + e.what());
  }
  return out;
}

template void save_checkpoint<float>(const ParameterSet<float>&, const std::filesystem::path&, std::uint64_t);
template void save_checkpoint<double>(const ParameterSet<double>&, const std::filesystem::path&, std::uint64_t);
template LoadedCheckpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template LoadedCheckpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace modnet::nn
