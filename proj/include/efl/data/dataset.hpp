#pragma once

#include "efl/config.hpp"
#include "efl/image.hpp"
#include "efl/rng.hpp"

#include <json.hpp>

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace efl::data {

enum class DatasetTag { ego4d_style, ek_style };
enum class Split { train, test };

std::string to_string(DatasetTag tag);
DatasetTag parse_dataset_tag(const std::string& s);
std::string to_string(Split split);
Split parse_split(const std::string& s);

struct Box {
  std::string object_name;
  std::array<double, 4> box{};  // normalised x0, y0, x1, y1
};

struct ActionInstance {
  std::string video_id;
  std::string action_label;
  double t_start = 0.0;  // action begins
  double t_end = 0.0;
  std::optional<double> t_pre;
  std::optional<double> t_pnr;
  std::vector<Box> boxes;
  DatasetTag dataset_tag = DatasetTag::ek_style;

  // Throws degenerate-annotation on ordering or box-range violations.
  void validate() const;
  // "(video_id, t_start)" identity used for de-duplication and ordering.
  std::string key() const;
};

nlohmann::json to_json(const ActionInstance& inst);
ActionInstance instance_from_json(const nlohmann::json& j);

struct FrameRecord {
  double time = 0.0;
  Image image;
  double aesthetic_score = 0.0;
};

struct CuratedPair {
  ActionInstance instance;
  FrameRecord input_frame;
  FrameRecord target_frame;
  double delta_in = 0.0;
  double delta_out = 0.0;
  double similarity = 0.0;
  std::string prompt;
  std::string input_frame_path;
  std::string target_frame_path;
};

struct Manifest {
  Split split = Split::train;
  std::vector<CuratedPair> entries;
  std::uint64_t seed = 0;
  std::vector<DatasetTag> source_tags;
};

struct Rejection {
  std::string key;
  std::string reason;
};

struct Offsets {
  double delta_in = 0.0;
  double delta_out = 0.0;
};

std::vector<std::string> default_prompt_templates();

struct PipelineConfig {
  int resolution = 64;
  double lambda_frac = 0.6;
  double default_delta_in = 0.25;
  double sim_lo = 0.81;
  double sim_hi = 0.97;
  int aesthetic_radius = 3;
  std::uint64_t seed = 0;
  Split split = Split::train;
  std::vector<std::string> templates = default_prompt_templates();

  static PipelineConfig from(const KeyValueConfig& kv);
};

// Ego4D-style: delta_in = t - t_pre, delta_out = t_pnr - t.
// EK-style: delta_in = default_delta_in, delta_out = lambda * (t_end - t).
Offsets compute_frame_offsets(const ActionInstance& inst, double lambda_frac, double default_delta_in);

// Highest aesthetic score within [center - radius, center + radius] clamped to
// the sequence; ties go to the frame nearest the center, then the lower index.
std::size_t select_best_frame_index(std::span<const FrameRecord> candidates, int center_index, int radius);
const FrameRecord& select_best_frame(std::span<const FrameRecord> candidates, int center_index, int radius);

bool filter_by_similarity(double similarity, double lo, double hi);
bool filter_by_similarity(const CuratedPair& pair, double lo, double hi);

double embed_similarity(const FrameRecord& a, const FrameRecord& b, const FeatureExtractor& extractor);

// Every template must contain exactly one "{action}" placeholder.
void validate_template(const std::string& tmpl);
const std::string& select_prompt_template(std::span<const std::string> templates, Rng& rng);
std::string fill_template(const std::string& tmpl, const std::string& action);

class AestheticScorer {
 public:
  virtual ~AestheticScorer() = default;
  virtual double score(const Image& img) const = 0;
};

class SharpnessScorer final : public AestheticScorer {
 public:
  double score(const Image& img) const override { return sharpness(img); }
};

// Supplies the time-ordered frames around an instance.
class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual std::vector<FrameRecord> frames(const ActionInstance& inst) const = 0;
};

struct BuildResult {
  Manifest manifest;
  std::vector<Rejection> rejections;
};

// Pure: output depends only on the inputs and config.seed. Throws
// empty-manifest when nothing survives.
BuildResult build_manifest(std::span<const ActionInstance> instances, const FrameSource& frames,
                           const FeatureExtractor& extractor, const AestheticScorer& scorer,
                           const PipelineConfig& config);

Manifest merge_manifests(const Manifest& a, const Manifest& b);

// Manifest line: {video_id, t_start, t_end, action_label, delta_in, delta_out,
// input_frame_path, target_frame_path, similarity, prompt, dataset_tag}.
std::string manifest_to_jsonl(const Manifest& m);
// Frames are not loaded; entries carry paths only.
Manifest manifest_from_jsonl(const std::string& text, Split split);
std::string rejections_to_jsonl(std::span<const Rejection> rejections);

std::string frame_file_stem(const ActionInstance& inst);

}  // namespace efl::data
