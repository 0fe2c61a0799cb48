#include "efl/image.hpp"

#include "efl/error.hpp"

#include <algorithm>
#include <cmath>

namespace efl {

Image blank_image(int height, int width, double value) { return Image({3, height, width}, value); }

int image_height(const Image& img) { return img.dim(1); }
int image_width(const Image& img) { return img.dim(2); }

void check_image(const Image& img, int resolution) {
  EFL_CHECK(img.ndim() == 3 && img.dim(0) == 3, Errc::shape_mismatch, "expected [3,H,W] image, got " + img.shape_str());
  if (resolution > 0) {
    EFL_CHECK(img.dim(1) == resolution && img.dim(2) == resolution, Errc::shape_mismatch,
              "expected " + std::to_string(resolution) + "x" + std::to_string(resolution) + " image, got " +
                  img.shape_str());
  }
}

Image from_rgb(const io::RgbImage& rgb) {
  Image img = blank_image(rgb.height, rgb.width);
  const std::size_t plane = static_cast<std::size_t>(rgb.height) * rgb.width;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) img[c * plane + p] = rgb.hwc[p * 3 + c];
  return img;
}

io::RgbImage to_rgb(const Image& img) {
  check_image(img);
  io::RgbImage rgb{image_height(img), image_width(img), {}};
  const std::size_t plane = static_cast<std::size_t>(rgb.height) * rgb.width;
  rgb.hwc.resize(plane * 3);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) rgb.hwc[p * 3 + c] = img[c * plane + p];
  return rgb;
}

Image load_image(const std::filesystem::path& path) { return from_rgb(io::read_ppm(path)); }

void save_image(const std::filesystem::path& path, const Image& img) { io::write_ppm(path, to_rgb(img)); }

Image quantize8(const Image& img) {
  Image out = img;
  for (auto& v : out.storage()) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return out;
}

Image resize_bilinear(const Image& img, int height, int width) {
  check_image(img);
  const int h = image_height(img), w = image_width(img);
  if (h == height && w == width) return img;
  Image out = blank_image(height, width);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < height; ++y) {
      const double sy = std::clamp((y + 0.5) * h / height - 0.5, 0.0, h - 1.0);
      const int y0 = static_cast<int>(sy);
      const int y1 = std::min(y0 + 1, h - 1);
      const double fy = sy - y0;
      for (int x = 0; x < width; ++x) {
        const double sx = std::clamp((x + 0.5) * w / width - 0.5, 0.0, w - 1.0);
        const int x0 = static_cast<int>(sx);
        const int x1 = std::min(x0 + 1, w - 1);
        const double fx = sx - x0;
        auto at = [&](int yy, int xx) { return img[(static_cast<std::size_t>(c) * h + yy) * w + xx]; };
        out[(static_cast<std::size_t>(c) * height + y) * width + x] =
            (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
      }
    }
  return out;
}

Image hflip(const Image& img) {
  check_image(img);
  const int h = image_height(img), w = image_width(img);
  Image out = img;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out[(static_cast<std::size_t>(c) * h + y) * w + x] = img[(static_cast<std::size_t>(c) * h + y) * w + (w - 1 - x)];
  return out;
}

Image motion_blur(const Image& img, int radius) {
  check_image(img);
  if (radius <= 0) return img;
  const int h = image_height(img), w = image_width(img);
  Image out = img;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        int n = 0;
        for (int dx = -radius; dx <= radius; ++dx) {
          const int xx = std::clamp(x + dx, 0, w - 1);
          acc += img[(static_cast<std::size_t>(c) * h + y) * w + xx];
          ++n;
        }
        out[(static_cast<std::size_t>(c) * h + y) * w + x] = acc / n;
      }
  return out;
}

Image clamp01(const Image& img) {
  Image out = img;
  for (auto& v : out.storage()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

double sharpness(const Image& img) {
  check_image(img);
  const int h = image_height(img), w = image_width(img);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  auto lum = [&](int y, int x) {
    const std::size_t p = static_cast<std::size_t>(y) * w + x;
    return 0.299 * img[p] + 0.587 * img[plane + p] + 0.114 * img[2 * plane + p];
  };
  double acc = 0.0;
  for (int y = 0; y + 1 < h; ++y)
    for (int x = 0; x + 1 < w; ++x) {
      const double gx = lum(y, x + 1) - lum(y, x);
      const double gy = lum(y + 1, x) - lum(y, x);
      acc += std::sqrt(gx * gx + gy * gy);
    }
  return acc / static_cast<double>((h - 1) * (w - 1));
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  EFL_CHECK(a.size() == b.size(), Errc::shape_mismatch, "cosine: feature length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  EFL_CHECK(aa > 0.0 && bb > 0.0, Errc::numeric, "cosine similarity of a zero-norm feature vector");
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

}  // namespace efl
