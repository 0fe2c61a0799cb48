#include "efl/cond/conditioning.hpp"

#include "efl/error.hpp"

#include <cmath>

namespace efl::cond {

using namespace efl::nn;
using vllm::Tokenizer;

std::string to_string(ConditioningMode m) {
  switch (m) {
    case ConditioningMode::labels_only: return "labels_only";
    case ConditioningMode::descriptions: return "descriptions";
    case ConditioningMode::desc_plus_image: return "desc_plus_image";
    case ConditioningMode::desc_plus_text: return "desc_plus_text";
    case ConditioningMode::desc_plus_joint: return "desc_plus_joint";
  }
  return "?";
}

ConditioningMode parse_mode(const std::string& s) {
  for (auto m : {ConditioningMode::labels_only, ConditioningMode::descriptions, ConditioningMode::desc_plus_image,
                 ConditioningMode::desc_plus_text, ConditioningMode::desc_plus_joint})
    if (to_string(m) == s) return m;
  throw Error(Errc::config, "unknown conditioning_mode '" + s + "'");
}

bool uses_image(ConditioningMode m) {
  return m == ConditioningMode::desc_plus_image || m == ConditioningMode::desc_plus_joint;
}

bool uses_text_embedding(ConditioningMode m) {
  return m == ConditioningMode::desc_plus_text || m == ConditioningMode::desc_plus_joint;
}

const Segment* ConditioningBundle::segment(const std::string& name) const {
  for (const auto& s : segments)
    if (s.name == name) return &s;
  return nullptr;
}

nlohmann::json CondConfig::to_json() const {
  return {{"text_tokens", text_tokens}, {"image_tokens", image_tokens}, {"d_llm", d_llm},
          {"d_model", d_model},         {"psi_layers", psi_layers},     {"pi_layers", pi_layers},
          {"pad_masking", pad_masking}, {"seed", seed}};
}

CondConfig CondConfig::from_json(const nlohmann::json& j) {
  CondConfig c;
  c.text_tokens = j.at("text_tokens");
  c.image_tokens = j.at("image_tokens");
  c.d_llm = j.at("d_llm");
  c.d_model = j.at("d_model");
  c.psi_layers = j.at("psi_layers");
  c.pi_layers = j.at("pi_layers");
  c.pad_masking = j.at("pad_masking");
  c.seed = j.at("seed");
  return c;
}

int expected_rows(ConditioningMode mode, const CondConfig& cfg) {
  return cfg.text_tokens + (uses_image(mode) ? cfg.image_tokens : 0) +
         (uses_text_embedding(mode) ? cfg.text_tokens : 0);
}

namespace {

Var frozen_normal(std::vector<int> shape, double sd, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = sd * rng.normal();
  return Var(std::move(t), false);
}

Var plain_norm(const Var& x) {
  const int d = x.cols();
  return layer_norm(x, Var(Tensor({d}, 1.0)), Var(Tensor({d})));
}

}  // namespace

TextEncoder::TextEncoder(int n, int d, int n_layers, Rng& rng) : n_tokens(n) {
  tok_emb = frozen_normal({Tokenizer::kVocab, d}, 1.0, rng);
  pos_emb = frozen_normal({n, d}, 0.5, rng);
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (int l = 0; l < n_layers; ++l)
    layers.push_back({frozen_normal({d, d}, s, rng), frozen_normal({d, d}, s, rng), frozen_normal({d, d}, s, rng),
                      frozen_normal({d, d}, s, rng), frozen_normal({d, 2 * d}, s, rng),
                      frozen_normal({2 * d, d}, s / std::sqrt(2.0), rng)});
}

std::vector<int> TextEncoder::tokenize(const std::string& text) const {
  std::vector<int> ids{Tokenizer::kBos};
  for (int t : Tokenizer::encode(text)) ids.push_back(t);
  ids.push_back(Tokenizer::kEos);
  ids.resize(static_cast<std::size_t>(n_tokens), Tokenizer::kPad);
  return ids;
}

Tensor TextEncoder::encode(const std::string& text) const {
  NoGradGuard guard;
  const auto ids = tokenize(text);
  std::vector<int> pos(ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
  Var x = add(embedding(tok_emb, ids), embedding(pos_emb, pos));
  const double inv = 1.0 / std::sqrt(static_cast<double>(x.cols()));
  for (const auto& l : layers) {
    const Var h = plain_norm(x);
    const Var att = softmax_rows(scale(matmul_nt(matmul(h, l.wq), matmul(h, l.wk)), inv), SoftmaxMask::causal());
    x = add(x, matmul(matmul(att, matmul(h, l.wv)), l.wo));
    x = add(x, matmul(gelu(matmul(plain_norm(x), l.ff1)), l.ff2));
  }
  return plain_norm(x).value();
}

ParamList TextEncoder::params() const {
  ParamList out{{"psi.tok_emb", tok_emb}, {"psi.pos_emb", pos_emb}};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "psi.layer" + std::to_string(i) + ".";
    const auto& l = layers[i];
    for (const auto& [n, v] : {std::pair{"wq", l.wq}, {"wk", l.wk}, {"wv", l.wv}, {"wo", l.wo}, {"ff1", l.ff1},
                               {"ff2", l.ff2}})
      out.push_back({p + n, v});
  }
  return out;
}

Conditioner::Conditioner(CondConfig cfg) : cfg_(cfg) {
  EFL_CHECK(cfg_.text_tokens >= 1 && cfg_.image_tokens >= 1 && cfg_.d_llm >= 1 && cfg_.d_model >= 1, Errc::config,
            "conditioning sizes must be positive");
  Rng root(cfg_.seed);
  Rng rp = root.derive("psi");
  psi = TextEncoder(cfg_.text_tokens, cfg_.d_model, cfg_.psi_layers, rp);
  Rng r = root.derive("proj");
  const int d = cfg_.d_model;
  sigma = Linear(cfg_.d_llm, d, r, Init::xavier);
  mu = Linear(cfg_.d_llm, d, r, Init::xavier);
  for (int i = 0; i < cfg_.pi_layers; ++i)
    pi.push_back({Linear(d, d, r, Init::xavier, false), Linear(d, d, r, Init::xavier, false),
                  Linear(d, d, r, Init::xavier, false), Linear(d, d, r, Init::xavier, false)});
  pad_ = Var(Tensor({1, cfg_.d_llm}), false);
}

void Conditioner::set_pad_embedding(const Tensor& row) {
  EFL_CHECK(row.size() == static_cast<std::size_t>(cfg_.d_llm), Errc::shape_mismatch, "pad embedding must have d_llm entries");
  pad_ = Var(row.reshaped({1, cfg_.d_llm}), false);
}

Tensor Conditioner::encode_description(const std::string& text) const { return psi.encode(text); }

Var Conditioner::project_image_embedding(const Var& h_i) const {
  EFL_CHECK(h_i.shape().size() == 2 && h_i.cols() == cfg_.d_llm, Errc::shape_mismatch,
            "image embedding must be [rows, d_llm], got " + h_i.value().shape_str());
  return sigma(h_i);
}

Var Conditioner::project_text_embedding(const Var& h_t, int valid_len) const {
  EFL_CHECK(h_t.shape().size() == 2 && h_t.cols() == cfg_.d_llm, Errc::shape_mismatch,
            "text embedding must be [rows, d_llm], got " + h_t.value().shape_str());
  EFL_CHECK(valid_len >= 0 && valid_len <= h_t.rows(), Errc::invalid_argument, "valid_len out of range");
  const SoftmaxMask mask =
      cfg_.pad_masking && valid_len > 0 && valid_len < h_t.rows() ? SoftmaxMask::prefix(valid_len) : SoftmaxMask::none();
  const double inv = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
  Var x = mu(h_t);
  for (const auto& b : pi) x = add(x, b.wo(matmul(softmax_rows(scale(matmul_nt(b.wq(x), b.wk(x)), inv), mask), b.wv(x))));
  return x;
}

ConditioningBundle Conditioner::assemble(const std::string& text, const std::optional<Tensor>& h_i,
                                         const std::optional<vllm::TextEmbedding>& h_t, ConditioningMode mode) const {
  EFL_CHECK(h_i.has_value() == uses_image(mode), Errc::invalid_argument,
            std::string("mode ") + to_string(mode) + (uses_image(mode) ? " needs" : " takes no") + " image embedding");
  EFL_CHECK(h_t.has_value() == uses_text_embedding(mode), Errc::invalid_argument,
            std::string("mode ") + to_string(mode) + (uses_text_embedding(mode) ? " needs" : " takes no") +
                " text embedding");
  ConditioningBundle b;
  b.mode = mode;
  std::vector<Var> parts{Var(encode_description(text))};
  b.segments.push_back({"psi", 0, cfg_.text_tokens});
  int row = cfg_.text_tokens;
  if (h_i) {
    EFL_CHECK(h_i->rows() == cfg_.image_tokens, Errc::shape_mismatch, "image embedding must have M rows");
    parts.push_back(project_image_embedding(Var(*h_i)));
    b.segments.push_back({"sigma", row, row + cfg_.image_tokens});
    row += cfg_.image_tokens;
  }
  if (h_t) {
    EFL_CHECK(h_t->tokens.rows() == cfg_.text_tokens, Errc::shape_mismatch, "text embedding must have N rows");
    parts.push_back(project_text_embedding(Var(h_t->tokens), h_t->valid_len));
    b.segments.push_back({"pi", row, row + cfg_.text_tokens});
  }
  b.matrix = parts.size() == 1 ? parts[0] : concat_rows(parts);
  return b;
}

ConditioningBundle Conditioner::null_conditioning(ConditioningMode mode) const {
  std::optional<Tensor> h_i;
  std::optional<vllm::TextEmbedding> h_t;
  if (uses_image(mode)) h_i = Tensor({cfg_.image_tokens, cfg_.d_llm});
  if (uses_text_embedding(mode)) {
    vllm::TextEmbedding t{Tensor({cfg_.text_tokens, cfg_.d_llm}), 0};
    for (int r = 0; r < cfg_.text_tokens; ++r) t.tokens.matrix().row(r) = pad_.value().matrix().row(0);
    h_t = std::move(t);
  }
  return assemble("", h_i, h_t, mode);
}

ParamList Conditioner::trainable_params() const {
  ParamList out;
  sigma.collect(out, "sigma");
  mu.collect(out, "mu");
  for (std::size_t i = 0; i < pi.size(); ++i) {
    const std::string p = "pi.block" + std::to_string(i) + ".";
    pi[i].wq.collect(out, p + "q");
    pi[i].wk.collect(out, p + "k");
    pi[i].wv.collect(out, p + "v");
    pi[i].wo.collect(out, p + "o");
  }
  return out;
}

ParamList Conditioner::frozen_params() const {
  ParamList out = psi.params();
  out.push_back({"pad_embedding", pad_});
  return out;
}

ParamList Conditioner::all_params() const {
  ParamList out = frozen_params();
  for (auto& p : trainable_params()) out.push_back(p);
  return out;
}

}  // namespace efl::cond
