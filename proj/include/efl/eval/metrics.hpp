#pragma once

#include "efl/data/dataset.hpp"
#include "efl/eval/extractors.hpp"

#include <json.hpp>

#include <map>
#include <span>
#include <string>
#include <vector>

namespace efl::eval {

constexpr double kPsnrCap = 100.0;

// 10 log10(1 / MSE), capped for identical images.
double psnr(const Image& a, const Image& b);

// Sum over layers of w_l * spatial mean of ||n(a) - n(b)||^2, where n() unit
// normalises the channel vector at each location. Empty weights mean all 1.
double perceptual_distance(const std::vector<nn::Tensor>& acts_a, const std::vector<nn::Tensor>& acts_b,
                           std::span<const double> layer_weights = {});
double perceptual_distance(const Image& a, const Image& b, const PerceptualEncoder& encoder);

// Frechet distance between Gaussian fits of two feature sets.
double fid(const std::vector<std::vector<double>>& real, const std::vector<std::vector<double>>& gen);

// 100 * cosine.
double contrastive_score(const std::vector<double>& a, const std::vector<double>& b);
double contrastive_image_score(const Image& gen, const Image& ref, const FeatureExtractor& extractor);
double egovlp_score(const Image& gen, const Image& ref, const VideoEncoder& encoder);
double egovlp_plus_score(const Image& input, const Image& gen, const Image& ref_input, const Image& ref_target,
                         const VideoEncoder& encoder);

struct CaptionScore {
  double score = 0.0;
  std::string caption;
  bool empty_caption = false;
};
CaptionScore caption_text_similarity(const Image& gen, const std::string& description, const NearestCaptioner& captioner,
                                     const TrigramTextEncoder& text_encoder);

struct BinAssignment {
  std::vector<double> thresholds;  // k - 1 upper edges, non-decreasing
  std::vector<int> bins;           // per input, in [0, k)
  std::vector<int> counts;
  bool degenerate = false;         // some bin ended up empty
};

// Quantile bins: edge j is the value at rank floor(j n / k) of the sorted
// input; a value lands in the number of edges it exceeds.
BinAssignment transition_time_bins(std::span<const double> deltas, int k);
BinAssignment transition_time_bins(std::span<const data::CuratedPair> pairs, int k);

struct StudySample {
  std::string key;
  std::string input_path;
  std::map<std::string, std::string> outputs;  // model -> image path
};

struct StudyPackage {
  std::vector<nlohmann::json> tasks;  // one per (sample, rater)
  nlohmann::json key;                 // task_id -> models in slot order
  std::string tasks_jsonl() const;
};

StudyPackage user_study_export(std::span<const StudySample> samples, int n_raters, std::uint64_t seed);

struct StudyResponse {
  std::string task_id;
  int picked_slot = 0;
};

// picks(model) / responses; rates sum to 1.
std::map<std::string, double> aggregate_winrates(std::span<const StudyResponse> responses, const nlohmann::json& key);

struct EvalSample {
  std::string key;
  double transition_time = 0.0;
  Image input;
  Image target;
  Image generated;
  std::string description;
};

struct EvalSuite {
  PerceptualEncoder perceptual;
  ContrastiveImageEncoder clip;
  VideoEncoder video;
  NearestCaptioner blip_b;
  NearestCaptioner blip_l;
  TrigramTextEncoder text;
};

double round4(double v);

// {metrics, bins, extractor_fingerprints, n}; numbers rounded to 4 decimals.
nlohmann::ordered_json metric_report(std::span<const EvalSample> samples, const EvalSuite& suite, int k_bins = 4);

}  // namespace efl::eval
