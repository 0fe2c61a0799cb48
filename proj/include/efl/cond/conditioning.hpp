#pragma once

#include "efl/nn/checkpoint.hpp"
#include "efl/vllm/vllm.hpp"

#include <optional>
#include <string>
#include <vector>

namespace efl::cond {

using nn::Tensor;
using nn::Var;

enum class ConditioningMode { labels_only, descriptions, desc_plus_image, desc_plus_text, desc_plus_joint };

std::string to_string(ConditioningMode m);
ConditioningMode parse_mode(const std::string& s);  // Errc::config on unknown names
bool uses_image(ConditioningMode m);
bool uses_text_embedding(ConditioningMode m);

struct Segment {
  std::string name;  // "psi", "sigma" or "pi"
  int begin = 0;
  int end = 0;
};

struct ConditioningBundle {
  Var matrix;  // [rows, D]
  std::vector<Segment> segments;
  ConditioningMode mode = ConditioningMode::descriptions;

  int rows() const { return matrix.rows(); }
  const Segment* segment(const std::string& name) const;
};

struct CondConfig {
  int text_tokens = 32;   // N
  int image_tokens = 16;  // M
  int d_llm = 64;
  int d_model = 64;  // D
  int psi_layers = 1;
  int pi_layers = 2;
  bool pad_masking = true;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static CondConfig from_json(const nlohmann::json& j);
};

int expected_rows(ConditioningMode mode, const CondConfig& cfg);

// Frozen causal text encoder over [bos, bytes, eos] padded or cut to N tokens.
struct TextEncoder {
  Var tok_emb, pos_emb;
  struct Layer {
    Var wq, wk, wv, wo, ff1, ff2;
  };
  std::vector<Layer> layers;
  int n_tokens = 32;

  TextEncoder() = default;
  TextEncoder(int n_tokens, int d, int n_layers, Rng& rng);
  std::vector<int> tokenize(const std::string& text) const;
  Tensor encode(const std::string& text) const;  // [N, D]
  nn::ParamList params() const;
};

struct AttentionBlock {
  nn::Linear wq, wk, wv, wo;
};

class Conditioner {
 public:
  explicit Conditioner(CondConfig cfg);

  const CondConfig& config() const { return cfg_; }

  Tensor encode_description(const std::string& text) const;  // ψ(R), [N, D]
  Var project_image_embedding(const Var& h_i) const;         // σ(H_i), [M, D]
  // π(μ(H_t)); keys at rows >= valid_len are masked when pad masking is on
  // and valid_len > 0.
  Var project_text_embedding(const Var& h_t, int valid_len) const;

  // labels_only passes the raw label as text; embeddings must be supplied
  // exactly when the mode uses them.
  ConditioningBundle assemble(const std::string& text, const std::optional<Tensor>& h_i,
                              const std::optional<vllm::TextEmbedding>& h_t, ConditioningMode mode) const;
  // Empty text, zero H_i, pad-only H_t.
  ConditioningBundle null_conditioning(ConditioningMode mode) const;

  void set_pad_embedding(const Tensor& row);  // [1, d_llm] pad row from the VLLM
  const Tensor& pad_embedding() const { return pad_.value(); }

  nn::ParamList trainable_params() const;  // σ, μ, π
  nn::ParamList frozen_params() const;     // ψ and the pad row
  nn::ParamList all_params() const;

  TextEncoder psi;
  nn::Linear sigma;
  nn::Linear mu;
  std::vector<AttentionBlock> pi;

 private:
  CondConfig cfg_;
  Var pad_;  // frozen
};

}  // namespace efl::cond
