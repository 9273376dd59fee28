#pragma once

#include <cstdint>
#include <filesystem>

#include "modnet/nn/network.hpp"

namespace modnet::nn {

/// Directory with manifest.json (names, roles, shapes, dtype, step_count, seed)
/// and one little-endian float32 .bin per tensor.
template <typename T>
void save_checkpoint(const ParameterSet<T>& params, const std::filesystem::path& dir, std::uint64_t seed);

template <typename T>
struct LoadedCheckpoint {
  ParameterSet<T> params;
  std::uint64_t seed = 0;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& dir);

}  // namespace modnet::nn
