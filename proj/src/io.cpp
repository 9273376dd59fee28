#include "modnet/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "modnet/error.hpp"

namespace modnet::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

std::vector<char> slurp(const fs::path& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(what + ": cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void dump(const fs::path& path, const void* data, std::size_t bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw Error("short write to " + path.string());
}

}  // namespace

void write_f32(const fs::path& path, std::span<const float> values) {
  dump(path, values.data(), values.size_bytes());
}

std::vector<float> read_f32(const fs::path& path, std::size_t expected_count, const std::string& what) {
  auto bytes = slurp(path, what);
  if (bytes.size() != expected_count * sizeof(float)) {
    throw FormatError(what + ": expected " + std::to_string(expected_count * sizeof(float)) + " bytes in " +
                      path.filename().string() + ", found " + std::to_string(bytes.size()));
  }
  std::vector<float> out(expected_count);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

void write_u8(const fs::path& path, std::span<const std::uint8_t> values) {
  dump(path, values.data(), values.size());
}

std::vector<std::uint8_t> read_u8(const fs::path& path, std::size_t expected_count, const std::string& what) {
  auto bytes = slurp(path, what);
  if (bytes.size() != expected_count) {
    throw FormatError(what + ": expected " + std::to_string(expected_count) + " bytes in " +
                      path.filename().string() + ", found " + std::to_string(bytes.size()));
  }
  return {bytes.begin(), bytes.end()};
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& value) { write_text(path, value.dump(2) + "\n"); }

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace modnet::io
