#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace efl::io {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path);
// Writes through a sibling temp file and renames it into place.
void write_file_atomic(const fs::path& path, std::string_view contents);
std::vector<std::string> read_lines(const fs::path& path);

std::string hex64(std::uint64_t v);
std::string hash_bytes(std::string_view bytes);
std::string hash_file(const fs::path& path);

// 8-bit binary PPM (P6). Pixel values are [0,1] doubles in HWC order.
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<double> hwc;
};
void write_ppm(const fs::path& path, const RgbImage& image);
RgbImage read_ppm(const fs::path& path);
std::string encode_ppm(const RgbImage& image);

}  // namespace efl::io
