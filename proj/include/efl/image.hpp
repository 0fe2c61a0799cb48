#pragma once

#include "efl/io.hpp"
#include "efl/nn/tensor.hpp"

#include <string>
#include <vector>

namespace efl {

// Images are [3, H, W] tensors with values in [0, 1]. Files on disk are HWC
// 8-bit; conversions happen only at the I/O boundary.
using Image = nn::Tensor;

Image blank_image(int height, int width, double value = 0.0);
int image_height(const Image& img);
int image_width(const Image& img);
void check_image(const Image& img, int resolution = 0);

Image from_rgb(const io::RgbImage& rgb);
io::RgbImage to_rgb(const Image& img);
Image load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const Image& img);
// Round-trips through 8-bit quantisation, matching what a saved file holds.
Image quantize8(const Image& img);

Image resize_bilinear(const Image& img, int height, int width);
Image hflip(const Image& img);
// Horizontal box filter, a stand-in for camera-motion blur.
Image motion_blur(const Image& img, int radius);
Image clamp01(const Image& img);

// Mean gradient magnitude over the luminance channel.
double sharpness(const Image& img);

// Pluggable image-to-vector map. Implementations must be deterministic.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<double> features(const Image& img) const = 0;
  virtual std::string fingerprint() const = 0;
};

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace efl
