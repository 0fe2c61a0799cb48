#include "efl/io.hpp"

#include "efl/error.hpp"
#include "efl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace efl::io {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  EFL_CHECK(in.good(), Errc::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const fs::path& path, std::string_view contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    EFL_CHECK(out.good(), Errc::io, "cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    EFL_CHECK(out.good(), Errc::io, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  EFL_CHECK(in.good(), Errc::io, "cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string hash_bytes(std::string_view bytes) {
  // Two independent 64-bit lanes give a 128-bit digest.
  const std::uint64_t a = fnv1a64(bytes);
  const std::uint64_t b = splitmix64(a ^ fnv1a64(std::string(bytes) + "\x01"));
  return hex64(a) + hex64(b);
}

std::string hash_file(const fs::path& path) { return hash_bytes(read_file(path)); }

std::string encode_ppm(const RgbImage& image) {
  EFL_CHECK(image.hwc.size() == static_cast<std::size_t>(image.height) * image.width * 3, Errc::shape_mismatch,
            "ppm: pixel buffer does not match dimensions");
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.reserve(out.size() + image.hwc.size());
  for (double v : image.hwc) {
    const double c = std::clamp(v, 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  return out;
}

void write_ppm(const fs::path& path, const RgbImage& image) { write_file_atomic(path, encode_ppm(image)); }

RgbImage read_ppm(const fs::path& path) {
  const std::string bytes = read_file(path);
  std::istringstream in(bytes);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  EFL_CHECK(magic == "P6" && w > 0 && h > 0 && maxv == 255, Errc::io, "unsupported image " + path.string());
  in.get();
  const auto offset = static_cast<std::size_t>(in.tellg());
  const std::size_t n = static_cast<std::size_t>(w) * h * 3;
  EFL_CHECK(bytes.size() >= offset + n, Errc::io, "truncated image " + path.string());
  RgbImage img{h, w, std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) img.hwc[i] = static_cast<unsigned char>(bytes[offset + i]) / 255.0;
  return img;
}

}  // namespace efl::io
