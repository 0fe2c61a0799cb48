#pragma once

#include "efl/cond/conditioning.hpp"
#include "efl/config.hpp"
#include "efl/error.hpp"
#include "efl/ldm/diffusion.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace efl::pipeline {

namespace fs = std::filesystem;

// Exit codes of the efl binary.
enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kMissingPrerequisite = 3, kNumericFailure = 4 };
int exit_code_for(Errc code);

const char* code_version();

struct RunConfig {
  std::uint64_t seed = 7;
  fs::path work_dir = "efl_run";
  fs::path cache_file;  // default <work_dir>/cache/enrichment.jsonl

  int resolution = 64;
  int text_tokens = 32;   // N
  int image_tokens = 16;  // M
  int d_model = 64;       // D
  int d_llm = 64;

  int diffusion_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int sample_steps = 100;
  ldm::DropoutPolicy dropout;
  ldm::GuidanceScales guidance;
  cond::ConditioningMode mode = cond::ConditioningMode::desc_plus_joint;

  double test_fraction = 0.2;
  std::string enrich_backend = "fixture";  // fixture | remote
  fs::path fixture_file;                   // default <work_dir>/raw/fixtures.jsonl
  std::string enrich_endpoint;

  int vllm_epochs = 3;
  long vllm_max_steps = 0;
  double vllm_lr = 3e-3;
  int generate_max_len = 160;

  int ae_steps = 1500;
  double ae_lr = 3e-3;
  long ldm_steps = 1500;
  int ldm_batch = 8;
  double ldm_lr = 1e-4;
  bool finetune_autoencoder = false;

  int eval_contrastive_steps = 200;
  int eval_bins = 4;

  KeyValueConfig raw;  // everything as given, echoed into artifacts

  // Throws Errc::config on invalid values.
  static RunConfig from(const KeyValueConfig& kv);

  fs::path dir(const std::string& name) const { return work_dir / name; }
};

// config file, then --seed, then --override key=value in order.
RunConfig load_run_config(const fs::path& config_file, const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed);

// Exclusive lock on the work directory; a second holder gets Errc::config.
class WorkDirLock {
 public:
  explicit WorkDirLock(const fs::path& work_dir);
  ~WorkDirLock();
  WorkDirLock(const WorkDirLock&) = delete;
  WorkDirLock& operator=(const WorkDirLock&) = delete;

 private:
  fs::path path_;
};

// Provenance record written next to every stage's outputs.
struct Artifact {
  std::string stage;
  std::map<std::string, std::string> inputs;   // path relative to work_dir -> hash
  std::map<std::string, std::string> outputs;  // same
  nlohmann::ordered_json summary;

  static fs::path path_for(const RunConfig& cfg, const std::string& stage);
  nlohmann::ordered_json to_json(const RunConfig& cfg) const;
};

Artifact read_artifact(const RunConfig& cfg, const std::string& stage);
// Errc::missing_prerequisite unless the stage ran and neither its inputs nor
// its outputs changed since.
void require_fresh(const RunConfig& cfg, const std::string& stage);

// Hash of a file, or of a directory as the sorted (relative path, file hash) list.
std::string hash_path(const fs::path& p);

// Stable assignment of a video to the test split.
bool is_test_video(const std::string& video_id, double test_fraction);

struct ProbeRequest {
  fs::path frame;
  std::vector<std::string> actions;
  fs::path out_dir;  // default <work_dir>/generated/probe
};

void cmd_synthesize(const RunConfig& cfg, std::ostream& log);
void cmd_preprocess(const RunConfig& cfg, std::ostream& log);
void cmd_curate(const RunConfig& cfg, std::ostream& log);
void cmd_train_vllm(const RunConfig& cfg, std::ostream& log);
void cmd_train_ldm(const RunConfig& cfg, std::ostream& log);
void cmd_generate(const RunConfig& cfg, std::ostream& log);
void cmd_generate_probe(const RunConfig& cfg, const ProbeRequest& probe, std::ostream& log);
void cmd_evaluate(const RunConfig& cfg, std::ostream& log);

}  // namespace efl::pipeline
