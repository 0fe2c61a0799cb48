#pragma once

#include "efl/config.hpp"
#include "efl/data/dataset.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace efl::data {

enum class CameraRegime { steady, jitter, pan };

struct SyntheticCorpusSpec {
  int n_instances = 200;
  std::uint64_t seed = 7;
  int resolution = 64;
  double fps = 8.0;
  double ego4d_fraction = 0.5;
  double pan_fraction = 0.2;
  double steady_fraction = 0.25;
  double blur_fraction = 0.25;
  double jitter_px = 1.5;

  static SyntheticCorpusSpec from(const KeyValueConfig& kv);
};

struct ShapeSpec {
  std::string noun;
  bool ellipse = false;
  double half_w = 0.1;  // normalised
  double half_h = 0.1;
  std::string color_name;
  std::array<double, 3> color{};
  double cx = 0.5;
  double cy = 0.5;
};

// Everything needed to re-render one clip at any time.
struct SceneScript {
  ActionInstance instance;
  std::string verb;
  std::array<double, 3> bg_low{};
  std::array<double, 3> bg_high{};
  std::array<double, 3> table{};
  double stripe_angle = 0.0;
  double stripe_freq = 4.0;
  double table_y = 0.55;
  std::vector<ShapeSpec> objects;  // objects[0] is acted upon
  std::array<double, 2> target_shift{};  // object displacement at t_end
  double target_scale = 1.0;             // object size factor at t_end
  std::array<double, 3> target_color{};  // object colour at t_end
  bool right_hand = true;
  CameraRegime camera = CameraRegime::steady;
  std::array<double, 2> pan{};  // camera travel over the clip, normalised
  double jitter_px = 0.0;
  double jitter_phase = 0.0;
  double clip_start = 0.0;
  double clip_end = 0.0;
  double fps = 8.0;
  std::vector<int> blurred;  // frame indices rendered with motion blur
  std::string description;   // scripted detailed description

  int frame_count() const;
  double frame_time(int index) const;
};

SceneScript make_scene(const SyntheticCorpusSpec& spec, int index);
std::vector<SceneScript> make_corpus(const SyntheticCorpusSpec& spec);

Image render_frame(const SceneScript& scene, double t, int resolution);
std::vector<FrameRecord> render_clip(const SceneScript& scene, int resolution);

// Renders on demand from scene scripts keyed by instance key.
class SyntheticFrameSource final : public FrameSource {
 public:
  SyntheticFrameSource(std::vector<SceneScript> scenes, int resolution);
  std::vector<FrameRecord> frames(const ActionInstance& inst) const override;

 private:
  std::map<std::string, SceneScript> scenes_;
  int resolution_;
};

// Raw instance store on disk:
//   instances.jsonl      one ActionInstance per line
//   frames.jsonl         {key, frames: [{time, path}]}
//   descriptions.jsonl   {key, label, text}
//   frames/<stem>/NNN.ppm
void write_raw_store(const std::filesystem::path& dir, const std::vector<SceneScript>& scenes, int resolution);
std::vector<ActionInstance> read_instances(const std::filesystem::path& dir);

class DirectoryFrameSource final : public FrameSource {
 public:
  explicit DirectoryFrameSource(std::filesystem::path dir);
  std::vector<FrameRecord> frames(const ActionInstance& inst) const override;

 private:
  std::filesystem::path dir_;
  std::map<std::string, std::vector<std::pair<double, std::string>>> index_;
};

}  // namespace efl::data
