#pragma once

#include "efl/cond/conditioning.hpp"
#include "efl/image.hpp"
#include "efl/nn/checkpoint.hpp"
#include "efl/nn/optim.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace efl::ldm {

using nn::Tensor;
using nn::Var;

struct NoiseSchedule {
  int T = 1000;
  std::vector<double> betas;
  std::vector<double> alpha_bars;

  static NoiseSchedule linear(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02);
  void validate() const;
  // Evenly spaced, descending from T-1 to 0.
  std::vector<int> inference_timesteps(int steps) const;
};

Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& noise, const NoiseSchedule& s);
Var forward_diffuse(const Var& z0, int t, const Tensor& noise, const NoiseSchedule& s);

Tensor standard_normal(const std::vector<int>& shape, Rng& rng);

// ---- autoencoder ----

struct AutoencoderConfig {
  int resolution = 64;
  int factor = 4;
  int latent_channels = 4;
  int width = 64;
  std::uint64_t seed = 0;

  int latent_size() const { return resolution / factor; }
  nlohmann::json to_json() const;
  static AutoencoderConfig from_json(const nlohmann::json& j);
};

struct AutoencoderTrainConfig {
  int steps = 3000;
  int batch_size = 8;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};

class Autoencoder {
 public:
  explicit Autoencoder(AutoencoderConfig cfg);

  const AutoencoderConfig& config() const { return cfg_; }

  // Unscaled maps between [3,R,R] images and [C_lat,R/f,R/f] latents.
  Var encode_raw(const Var& image) const;
  Var decode_raw(const Var& latent) const;

  // Scaled by latent_scale so training latents have unit variance.
  Tensor encode_latent(const Image& image) const;
  Image decode_latent(const Tensor& latent) const;  // clamped to [0,1]

  // Fits the reconstruction on a fixed image set, then sets latent_scale.
  double train(const std::vector<Image>& images, const AutoencoderTrainConfig& tc);
  void fit_latent_scale(const std::vector<Image>& images);

  double latent_scale = 1.0;

  nn::ParamList params() const;

  nn::Conv2d enc1, enc2, enc3, dec1, dec2, dec3, dec4;

 private:
  AutoencoderConfig cfg_;
};

// ---- cross-attention and UNet ----

struct CrossAttentionParams {
  nn::Linear wq;  // U -> D
  nn::Linear wk;  // D -> D
  nn::Linear wv;  // D -> D
};

// Row-wise softmax(Q K^T / sqrt(D)) V; keys at rows >= valid_keys are masked
// (valid_keys < 0: none). When weights is set it receives the attention matrix.
Var attention(const Var& q, const Var& k, const Var& v, int valid_keys = -1, Tensor* weights = nullptr);

// attention() with Q = U·W_Q, K = C·W_K, V = C·W_V.
Var cross_attention(const Var& u, const Var& c, const CrossAttentionParams& p, int valid_keys = -1,
                    Tensor* weights = nullptr);

struct UNetConfig {
  int latent_channels = 4;
  int base = 32;
  int time_dim = 128;
  int cond_dim = 64;  // D
  int groups = 8;
  // Adds gate·sqrt(1 − alpha_bar[t])·z_t to the head output; gate starts at 0.
  bool noise_skip = true;
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static UNetConfig from_json(const nlohmann::json& j);
};

struct ResBlock {
  nn::GroupNorm n1, n2;
  nn::Conv2d c1, c2;
  nn::Linear film_scale, film_shift;
  std::optional<nn::Conv2d> skip;
};

struct AttnBlock {
  nn::GroupNorm norm;
  CrossAttentionParams attn;
  nn::Linear out;  // D -> channels
};

class UNet {
 public:
  explicit UNet(UNetConfig cfg);

  const UNetConfig& config() const { return cfg_; }

  // Noise estimate for z_t given the input-frame latent, timestep and
  // conditioning rows. Rows of c at index >= valid_rows are ignored.
  Var predict(const Var& z_t, const Var& z_input, int t, const Var& c, int valid_rows = -1) const;
  Tensor predict(const Tensor& z_t, const Tensor& z_input, int t, const Tensor& c) const;

  nn::ParamList params() const;

  nn::Linear time1, time2;
  nn::Conv2d conv_in;
  ResBlock res0;
  AttnBlock attn0;
  nn::Conv2d down;
  ResBlock res1;
  AttnBlock attn1;
  nn::Conv2d up;
  ResBlock res2;
  AttnBlock attn2;
  nn::GroupNorm norm_out;
  nn::Conv2d conv_out;  // zero-initialised
  Var skip_gate;        // [C_lat], zero-initialised

 private:
  UNetConfig cfg_;
  std::vector<double> skip_coef_;
  Var time_embedding(int t) const;
  Var res_block(const ResBlock& b, const Var& x, const Var& temb) const;
  Var attn_block(const AttnBlock& b, const Var& x, const Var& c, int valid_rows) const;
};

// ---- condition dropout and guidance ----

struct DropoutPolicy {
  double p_img_only = 0.05;
  double p_cond_only = 0.05;
  double p_both = 0.05;
  void validate() const;
};

enum class DropoutCase { keep, img_only_null, cond_only_null, both_null };
std::string to_string(DropoutCase c);
DropoutCase sample_dropout(const DropoutPolicy& policy, Rng& rng);

struct GuidanceScales {
  double s_x = 7.5;
  double s_c = 1.5;
};

// e(∅,∅) + s_x·(e(X,∅) − e(∅,∅)) + s_c·(e(X,C) − e(X,∅)), no clamping.
Tensor cfg_combine(const Tensor& e_null, const Tensor& e_image, const Tensor& e_full, const GuidanceScales& s);
Tensor cfg_score(const UNet& unet, const Tensor& z_t, const Tensor& z_input, int t, const Tensor& c,
                 const Tensor& c_null, const GuidanceScales& s);

// ---- training ----

struct TrainItem {
  std::string key;
  Tensor z_input, z_target;                      // scaled latents
  std::optional<Tensor> z_input_flip, z_target_flip;  // horizontal-flip views
  std::string text;                              // description or label for ψ
  std::optional<Tensor> h_i;
  std::optional<vllm::TextEmbedding> h_t;
  // Pixel frames; required only when the autoencoder is finetuned.
  std::optional<Image> x_image, y_image;
};

struct LdmTrainConfig {
  double lr = 1e-4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  int batch_size = 8;
  long steps = 2000;
  long warmup = 0;
  bool cosine = false;
  bool hflip = true;
  bool finetune_autoencoder = false;
  DropoutPolicy dropout;
  cond::ConditioningMode mode = cond::ConditioningMode::desc_plus_joint;
  std::uint64_t seed = 0;
};

struct StepReport {
  double loss = 0.0;
  std::vector<DropoutCase> cases;
  std::vector<int> timesteps;
};

class LdmTrainer {
 public:
  // ae is needed only with finetune_autoencoder.
  LdmTrainer(UNet& unet, cond::Conditioner& conditioner, const NoiseSchedule& schedule, LdmTrainConfig cfg,
             Autoencoder* ae = nullptr);

  // One optimiser step on the batch; randomness per item comes from
  // (seed, step, key). Throws Errc::training_diverged on a non-finite loss.
  StepReport train_step(const std::vector<TrainItem>& batch);
  // Loss of the same draw without an update.
  double loss_only(const std::vector<TrainItem>& batch, long step) const;
  long steps() const { return step_; }
  nn::AdamW& optimizer() { return opt_; }

 private:
  Var batch_loss(const std::vector<TrainItem>& batch, long step, StepReport* report) const;

  UNet& unet_;
  cond::Conditioner& cond_;
  Autoencoder* ae_;
  NoiseSchedule schedule_;
  LdmTrainConfig cfg_;
  nn::AdamW opt_;
  long step_ = 0;
};

// ---- sampling ----

struct SampleConfig {
  int steps = 100;
  GuidanceScales scales;
  bool ancestral = false;  // default: deterministic DDIM (eta = 0)
};

using NoisePredictor = std::function<Tensor(const Tensor& z_t, int t)>;

// Reverse process from a standard-normal draw of the given shape.
Tensor reverse_diffuse(const NoiseSchedule& schedule, const std::vector<int>& shape, const NoisePredictor& eps,
                       const SampleConfig& cfg, Rng& rng);

// reverse_diffuse driven by cfg_score.
Tensor sample_latent(const UNet& unet, const NoiseSchedule& schedule, const Tensor& z_input, const Tensor& c,
                     const Tensor& c_null, const SampleConfig& cfg, Rng& rng);

struct SidecarRecord {
  std::string key;
  std::uint64_t seed = 0;
  int steps = 0;
  double s_x = 0.0;
  double s_c = 0.0;
  std::string conditioning_mode;
};
std::string sidecar_line(const SidecarRecord& r);

// ---- bundle checkpoint ----

struct LdmBundle {
  AutoencoderConfig ae_cfg;
  UNetConfig unet_cfg;
  cond::CondConfig cond_cfg;
  cond::ConditioningMode mode = cond::ConditioningMode::desc_plus_joint;
  Autoencoder ae;
  UNet unet;
  cond::Conditioner conditioner;

  LdmBundle(AutoencoderConfig a, UNetConfig u, cond::CondConfig c, cond::ConditioningMode m);
  void save(const std::filesystem::path& path) const;
  static LdmBundle load(const std::filesystem::path& path);
};

}  // namespace efl::ldm
