#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace modnet::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Raw little-endian float32, row-major.
void write_f32(const fs::path& path, std::span<const float> values);
std::vector<float> read_f32(const fs::path& path, std::size_t expected_count, const std::string& what);

void write_u8(const fs::path& path, std::span<const std::uint8_t> values);
std::vector<std::uint8_t> read_u8(const fs::path& path, std::size_t expected_count, const std::string& what);

json read_json(const fs::path& path);
/// Writes through a temporary file and renames, so readers never see a partial file.
void write_json(const fs::path& path, const json& value);
void write_text(const fs::path& path, const std::string& text);

/// Hex digest of a 64-bit FNV-1a hash.
std::string fnv1a_hex(const std::string& text);

}  // namespace modnet::io
