#pragma once

#include "efl/image.hpp"
#include "efl/nn/layers.hpp"

#include <memory>
#include <span>
#include <string>
#include <vector>

namespace efl::eval {

// Fixed random conv stack (3 layers, tanh). Its weights are a pure function of
// the seed and never trained. Serves the perceptual-distance metric, the
// curation similarity filter and, through pooled statistics, FID.
class PerceptualEncoder final : public FeatureExtractor {
 public:
  explicit PerceptualEncoder(std::uint64_t seed = 0x9e1f);

  // One [C, H, W] map per layer.
  std::vector<nn::Tensor> activations(const Image& img) const;
  // Signed activations averaged over a 4x4 grid, concatenated over layers.
  std::vector<double> features(const Image& img) const override;
  // Global channel means of the two deepest layers.
  std::vector<double> distribution_features(const Image& img) const;
  std::string fingerprint() const override;

 private:
  std::vector<nn::Conv2d> layers_;
};

struct ContrastiveConfig {
  int steps = 300;
  int batch = 16;
  double lr = 2e-3;
  double temperature = 0.1;
  std::uint64_t seed = 0;
};

// Small conv net trained with InfoNCE over augmented views.
class ContrastiveImageEncoder final : public FeatureExtractor {
 public:
  static constexpr int kDim = 32;

  explicit ContrastiveImageEncoder(std::uint64_t seed = 0);

  // Unnormalised [1, kDim] embedding inside the graph.
  nn::Var embed(const nn::Var& img) const;
  std::vector<double> trunk(const Image& img) const;
  std::vector<double> features(const Image& img) const override;
  // Returns the loss of the final step.
  double train(std::span<const Image> images, const ContrastiveConfig& cfg);
  nn::ParamList params() const;
  std::string fingerprint() const override;

 private:
  std::vector<nn::Conv2d> convs_;
  nn::Linear head_;
};

// Frame-stack encoder: per-frame contrastive trunk, then a fixed temporal
// mixing into [mean, late - early], unit-normalised.
class VideoEncoder {
 public:
  static constexpr int kStackLength = 4;

  explicit VideoEncoder(ContrastiveImageEncoder frames) : frames_(std::move(frames)) {}
  std::vector<double> embed(std::span<const Image> stack) const;
  std::string fingerprint() const;

 private:
  ContrastiveImageEncoder frames_;
};

// [gen, gen, gen, gen]
std::vector<Image> egovlp_stack(const Image& frame);
// [input, input, gen, gen]
std::vector<Image> egovlp_plus_stack(const Image& input, const Image& frame);

// Retrieval captioner: returns the caption of the nearest bank image.
class NearestCaptioner {
 public:
  NearestCaptioner(std::string role, std::shared_ptr<const FeatureExtractor> extractor)
      : role_(std::move(role)), extractor_(std::move(extractor)) {}

  void add(const Image& img, std::string caption);
  // Empty when the bank is empty.
  std::string caption(const Image& img) const;
  std::size_t bank_size() const { return captions_.size(); }
  std::string fingerprint() const;

 private:
  std::string role_;
  std::shared_ptr<const FeatureExtractor> extractor_;
  std::vector<std::vector<double>> keys_;
  std::vector<std::string> captions_;
};

// Hashed character-trigram bag, unit-normalised. Blank text maps to a fixed
// unit vector no non-blank text can reach.
class TrigramTextEncoder {
 public:
  static constexpr int kDim = 512;
  std::vector<double> encode(const std::string& text) const;
  std::string fingerprint() const { return "trigram-512"; }
};

}  // namespace efl::eval
