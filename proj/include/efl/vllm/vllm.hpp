#pragma once

#include "efl/enrich/enrichment.hpp"
#include "efl/image.hpp"
#include "efl/nn/checkpoint.hpp"
#include "efl/nn/optim.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace efl::vllm {

using nn::Tensor;
using nn::Var;

// Byte-level tokenizer: ids 0..255 are raw bytes.
struct Tokenizer {
  static constexpr int kPad = 256;
  static constexpr int kBos = 257;
  static constexpr int kEos = 258;
  static constexpr int kVocab = 259;

  static std::vector<int> encode(const std::string& text);
  // Stops at the first eos; specials are dropped.
  static std::string decode(const std::vector<int>& ids);
};

struct VllmConfig {
  int resolution = 64;
  int patch_size = 16;
  int d_vision = 64;
  int d_llm = 64;
  int n_layers = 2;
  int n_heads = 4;
  int ffn_mult = 4;
  int context = 320;
  int text_tokens = 32;  // N
  std::uint64_t seed = 0;

  int image_tokens() const { return (resolution / patch_size) * (resolution / patch_size); }  // M
  int patch_dim() const { return 3 * patch_size * patch_size; }
  void validate() const;
  nlohmann::json to_json() const;
  static VllmConfig from_json(const nlohmann::json& j);
};

struct ImageEmbedding {
  Tensor tokens;  // [M, D_llm]
};

struct TextEmbedding {
  Tensor tokens;  // [N, D_llm]
  int valid_len = 0;
};

struct InstructSample {
  Image image;
  std::string prompt;
  std::string target_text;
};

// Token stream after the image tokens and the loss target for every position
// of the full sequence (-1 where no loss applies).
struct SequenceLayout {
  std::vector<int> tokens;   // prompt bytes, bos, response bytes, eos
  std::vector<int> targets;  // size M + tokens.size()
  int response_begin = 0;    // absolute position of the first response token
};

struct MultimodalSequence {
  Var embeddings;  // [M + L, D_llm], positional embedding included
  std::vector<int> positions;
};

struct GeneratedDescription {
  std::string text;
  std::vector<int> tokens;  // includes the final eos when one was produced
  bool empty = false;       // nothing but the end token

  enrich::EnrichedDescription to_enriched() const { return {text, enrich::Source::tuned_vllm, ""}; }
};

struct Block {
  nn::LayerNorm ln1, ln2;
  std::vector<nn::Linear> wq, wk, wv, wo;  // one per head
  nn::Linear ff1, ff2;
};

class InstructModel {
 public:
  explicit InstructModel(VllmConfig cfg);

  const VllmConfig& config() const { return cfg_; }

  // Patches in raster order, each flattened channel-major.
  Tensor patchify(const Image& image) const;
  Var vision_features(const Image& image) const;  // frozen, [M, d_vision]
  Var encode_image_var(const Image& image) const;  // τ(φ(X))
  ImageEmbedding encode_image(const Image& image) const;
  ImageEmbedding extract_image_embedding(const Image& image) const { return encode_image(image); }

  MultimodalSequence assemble_multimodal_sequence(const Var& h_i, const std::vector<int>& tokens) const;
  // Final-norm hidden states, [len, D_llm].
  Var hidden_states(const Var& sequence_embeddings) const;
  Var logits(const Var& hidden) const;

  SequenceLayout layout(const std::string& prompt, const std::string& response) const;
  // Mean cross-entropy over the response tokens and the closing eos.
  Var sample_loss(const InstructSample& s) const;
  Var batch_loss(const std::vector<InstructSample>& batch) const;

  GeneratedDescription generate_description(const Image& image, const std::string& prompt, int max_len) const;

  // Runs [bos, tokens] through the LM and keeps the hidden states at the token
  // positions; truncated or padded to N rows.
  TextEmbedding extract_text_embedding(const std::vector<int>& tokens) const;
  Tensor pad_embedding() const;

  nn::ParamList trainable_params() const;  // τ and LM
  nn::ParamList frozen_params() const;     // φ
  nn::ParamList all_params() const;

  void save(const std::filesystem::path& path) const;
  static InstructModel load(const std::filesystem::path& path);

  // Exposed for hand-set weights in tests.
  Var phi;  // [patch_dim, d_vision], orthonormal columns
  nn::Linear tau;
  Var tok_emb;  // [vocab, D_llm]
  Var pos_emb;  // [context, D_llm]
  std::vector<Block> blocks;
  nn::LayerNorm ln_f;
  nn::Linear head;

 private:
  VllmConfig cfg_;
};

struct VllmTrainConfig {
  double lr = 3e-3;
  double weight_decay = 0.0;
  int batch_size = 4;
  int epochs = 3;
  long max_steps = 0;  // 0: derive from epochs
  std::uint64_t seed = 0;
};

class VllmTrainer {
 public:
  VllmTrainer(InstructModel& model, VllmTrainConfig cfg);
  // Throws Errc::training_diverged on a non-finite loss.
  double train_step(const std::vector<InstructSample>& batch);
  long steps() const { return opt_.steps_taken(); }
  nn::AdamW& optimizer() { return opt_; }

 private:
  InstructModel& model_;
  VllmTrainConfig cfg_;
  nn::AdamW opt_;
};

}  // namespace efl::vllm
