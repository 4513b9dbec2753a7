#pragma once

// Little-endian encode/decode helpers shared by the tensor and vector file
// formats. Private to the library.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace steerlab::detail {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

template <typename T>
void put(std::vector<char>& out, T v) {
  v = to_little(v);
  const auto* p = reinterpret_cast<const char*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(std::span<const char> in, std::size_t offset) {
  T v;
  std::memcpy(&v, in.data() + offset, sizeof(T));
  return to_little(v);
}

void put_f32_payload(std::vector<char>& out, std::span<const float> values);
std::vector<float> get_f32_payload(std::span<const char> in, std::size_t offset, std::size_t count);

std::vector<char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const char> bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

// a * b * c with overflow detection; returns false on overflow.
bool checked_product(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t& out);

}  // namespace steerlab::detail
