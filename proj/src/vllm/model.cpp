#include "efl/vllm/vllm.hpp"

#include "efl/error.hpp"

#include <Eigen/QR>

#include <cmath>

namespace efl::vllm {

using namespace efl::nn;

std::vector<int> Tokenizer::encode(const std::string& text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(c);
  return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (id == kEos) break;
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

void VllmConfig::validate() const {
  EFL_CHECK(patch_size > 0 && resolution % patch_size == 0, Errc::config, "resolution must be a multiple of patch_size");
  EFL_CHECK(d_llm > 0 && n_heads > 0 && d_llm % n_heads == 0, Errc::config, "d_llm must divide into n_heads");
  EFL_CHECK(d_vision > 0 && d_vision <= patch_dim(), Errc::config, "d_vision must lie in [1, 3*patch_size^2]");
  EFL_CHECK(n_layers >= 1 && ffn_mult >= 1, Errc::config, "need at least one layer");
  EFL_CHECK(text_tokens >= 1, Errc::config, "text_tokens must be positive");
  EFL_CHECK(context > image_tokens() + 2, Errc::config, "context too short for the image tokens");
}

nlohmann::json VllmConfig::to_json() const {
  return {{"resolution", resolution}, {"patch_size", patch_size}, {"d_vision", d_vision}, {"d_llm", d_llm},
          {"n_layers", n_layers},     {"n_heads", n_heads},       {"ffn_mult", ffn_mult}, {"context", context},
          {"text_tokens", text_tokens}, {"seed", seed}};
}

VllmConfig VllmConfig::from_json(const nlohmann::json& j) {
  VllmConfig c;
  c.resolution = j.at("resolution");
  c.patch_size = j.at("patch_size");
  c.d_vision = j.at("d_vision");
  c.d_llm = j.at("d_llm");
  c.n_layers = j.at("n_layers");
  c.n_heads = j.at("n_heads");
  c.ffn_mult = j.at("ffn_mult");
  c.context = j.at("context");
  c.text_tokens = j.at("text_tokens");
  c.seed = j.at("seed");
  return c;
}

InstructModel::InstructModel(VllmConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng root(cfg_.seed);
  {
    Rng r = root.derive("phi");
    Eigen::MatrixXd g(cfg_.patch_dim(), cfg_.d_vision);
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = r.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(g.rows(), g.cols());
    Tensor t({cfg_.patch_dim(), cfg_.d_vision});
    t.matrix() = q;
    phi = Var(std::move(t), false);
  }
  Rng r = root.derive("lm");
  const int d = cfg_.d_llm;
  const int dh = d / cfg_.n_heads;
  tau = Linear(cfg_.d_vision, d, r);
  tok_emb = parameter(init_tensor({Tokenizer::kVocab, d}, d, d, Init::normal_002, r));
  pos_emb = parameter(init_tensor({cfg_.context, d}, d, d, Init::normal_002, r));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    Block b;
    b.ln1 = LayerNorm(d);
    b.ln2 = LayerNorm(d);
    for (int h = 0; h < cfg_.n_heads; ++h) {
      b.wq.emplace_back(d, dh, r, Init::xavier, false);
      b.wk.emplace_back(d, dh, r, Init::xavier, false);
      b.wv.emplace_back(d, dh, r, Init::xavier, false);
      b.wo.emplace_back(dh, d, r, Init::xavier, h == 0);
    }
    b.ff1 = Linear(d, d * cfg_.ffn_mult, r);
    b.ff2 = Linear(d * cfg_.ffn_mult, d, r);
    blocks.push_back(std::move(b));
  }
  ln_f = LayerNorm(d);
  head = Linear(d, Tokenizer::kVocab, r);
}

Tensor InstructModel::patchify(const Image& image) const {
  check_image(image, cfg_.resolution);
  const int p = cfg_.patch_size;
  const int g = cfg_.resolution / p;
  const int res = cfg_.resolution;
  Tensor out({g * g, cfg_.patch_dim()});
  for (int py = 0; py < g; ++py)
    for (int px = 0; px < g; ++px) {
      const int row = py * g + px;
      int k = 0;
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < p; ++y)
          for (int x = 0; x < p; ++x)
            out.at(row, k++) = image[(static_cast<std::size_t>(c) * res + py * p + y) * res + px * p + x];
    }
  return out;
}

Var InstructModel::vision_features(const Image& image) const {
  return matmul(Var(patchify(image)), phi);
}

Var InstructModel::encode_image_var(const Image& image) const { return tau(vision_features(image)); }

ImageEmbedding InstructModel::encode_image(const Image& image) const {
  NoGradGuard guard;
  ImageEmbedding e{encode_image_var(image).value()};
  EFL_CHECK(e.tokens.all_finite(), Errc::numeric, "image embedding is not finite");
  return e;
}

MultimodalSequence InstructModel::assemble_multimodal_sequence(const Var& h_i, const std::vector<int>& tokens) const {
  EFL_CHECK(h_i.cols() == cfg_.d_llm, Errc::shape_mismatch, "image tokens must have D_llm columns");
  const int len = h_i.rows() + static_cast<int>(tokens.size());
  EFL_CHECK(len <= cfg_.context, Errc::invalid_argument,
            "sequence of " + std::to_string(len) + " exceeds context " + std::to_string(cfg_.context));
  std::vector<int> positions(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) positions[static_cast<std::size_t>(i)] = i;
  Var x = tokens.empty() ? h_i : concat_rows({h_i, embedding(tok_emb, tokens)});
  return {add(x, embedding(pos_emb, positions)), std::move(positions)};
}

Var InstructModel::hidden_states(const Var& x0) const {
  Var x = x0;
  const double inv = 1.0 / std::sqrt(static_cast<double>(cfg_.d_llm / cfg_.n_heads));
  for (const auto& b : blocks) {
    const Var h = b.ln1(x);
    std::vector<Var> heads;
    for (int k = 0; k < cfg_.n_heads; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      const Var att = softmax_rows(scale(matmul_nt(b.wq[ku](h), b.wk[ku](h)), inv), SoftmaxMask::causal());
      heads.push_back(b.wo[ku](matmul(att, b.wv[ku](h))));
    }
    x = add(x, add_n(heads));
    x = add(x, b.ff2(gelu(b.ff1(b.ln2(x)))));
  }
  return ln_f(x);
}

Var InstructModel::logits(const Var& hidden) const { return head(hidden); }

SequenceLayout InstructModel::layout(const std::string& prompt, const std::string& response) const {
  SequenceLayout s;
  s.tokens = Tokenizer::encode(prompt);
  s.tokens.push_back(Tokenizer::kBos);
  const int m = cfg_.image_tokens();
  const int bos_pos = m + static_cast<int>(s.tokens.size()) - 1;
  s.response_begin = bos_pos + 1;
  for (int t : Tokenizer::encode(response)) s.tokens.push_back(t);
  s.tokens.push_back(Tokenizer::kEos);
  const int total = m + static_cast<int>(s.tokens.size());
  s.targets.assign(static_cast<std::size_t>(total), -1);
  for (int pos = bos_pos; pos + 1 < total; ++pos)
    s.targets[static_cast<std::size_t>(pos)] = s.tokens[static_cast<std::size_t>(pos + 1 - m)];
  return s;
}

Var InstructModel::sample_loss(const InstructSample& s) const {
  const SequenceLayout lay = layout(s.prompt, s.target_text);
  const MultimodalSequence seq = assemble_multimodal_sequence(encode_image_var(s.image), lay.tokens);
  return cross_entropy(logits(hidden_states(seq.embeddings)), lay.targets);
}

Var InstructModel::batch_loss(const std::vector<InstructSample>& batch) const {
  EFL_CHECK(!batch.empty(), Errc::invalid_argument, "empty batch");
  std::vector<Var> terms;
  std::vector<double> counts;
  double total = 0.0;
  for (const auto& s : batch) {
    terms.push_back(sample_loss(s));
    counts.push_back(static_cast<double>(Tokenizer::encode(s.target_text).size() + 1));
    total += counts.back();
  }
  for (std::size_t i = 0; i < terms.size(); ++i) terms[i] = scale(terms[i], counts[i] / total);
  return add_n(terms);
}

GeneratedDescription InstructModel::generate_description(const Image& image, const std::string& prompt,
                                                         int max_len) const {
  NoGradGuard guard;
  const Var h_i = encode_image_var(image);
  std::vector<int> tokens = Tokenizer::encode(prompt);
  tokens.push_back(Tokenizer::kBos);
  GeneratedDescription out;
  const int room = cfg_.context - h_i.rows() - static_cast<int>(tokens.size());
  const int limit = std::min(max_len, std::max(room, 0));
  for (int step = 0; step < limit; ++step) {
    const Var hid = hidden_states(assemble_multimodal_sequence(h_i, tokens).embeddings);
    const Var last = logits(slice_rows(hid, hid.rows() - 1, hid.rows()));
    const auto row = last.value().matrix().row(0);
    Eigen::Index best = 0;
    row.maxCoeff(&best);
    const int id = static_cast<int>(best);
    out.tokens.push_back(id);
    tokens.push_back(id);
    if (id == Tokenizer::kEos) break;
  }
  out.text = Tokenizer::decode(out.tokens);
  out.empty = out.text.empty();
  return out;
}

Tensor InstructModel::pad_embedding() const { return tok_emb.value().rows_slice(Tokenizer::kPad, Tokenizer::kPad + 1); }

TextEmbedding InstructModel::extract_text_embedding(const std::vector<int>& tokens) const {
  NoGradGuard guard;
  const int n = cfg_.text_tokens;
  const int d = cfg_.d_llm;
  TextEmbedding out;
  out.valid_len = std::min(n, static_cast<int>(tokens.size()));
  out.tokens = Tensor({n, d});
  const Tensor pad = pad_embedding();
  for (int r = out.valid_len; r < n; ++r) out.tokens.matrix().row(r) = pad.matrix().row(0);
  if (out.valid_len == 0) return out;

  std::vector<int> seq{Tokenizer::kBos};
  seq.insert(seq.end(), tokens.begin(), tokens.begin() + out.valid_len);
  std::vector<int> positions(seq.size());
  for (std::size_t i = 0; i < seq.size(); ++i) positions[i] = static_cast<int>(i);
  const Var x = add(embedding(tok_emb, seq), embedding(pos_emb, positions));
  const Tensor hid = hidden_states(x).value();
  out.tokens.matrix().topRows(out.valid_len) = hid.matrix().middleRows(1, out.valid_len);
  return out;
}

ParamList InstructModel::trainable_params() const {
  ParamList out;
  tau.collect(out, "tau");
  out.push_back({"lm.tok_emb", tok_emb});
  out.push_back({"lm.pos_emb", pos_emb});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = "lm.block" + std::to_string(l) + ".";
    b.ln1.collect(out, p + "ln1");
    b.ln2.collect(out, p + "ln2");
    for (std::size_t h = 0; h < b.wq.size(); ++h) {
      const std::string hp = p + "head" + std::to_string(h) + ".";
      b.wq[h].collect(out, hp + "q");
      b.wk[h].collect(out, hp + "k");
      b.wv[h].collect(out, hp + "v");
      b.wo[h].collect(out, hp + "o");
    }
    b.ff1.collect(out, p + "ff1");
    b.ff2.collect(out, p + "ff2");
  }
  ln_f.collect(out, "lm.ln_f");
  head.collect(out, "lm.head");
  return out;
}

ParamList InstructModel::frozen_params() const { return {{"phi", phi}}; }

ParamList InstructModel::all_params() const {
  ParamList out = frozen_params();
  for (auto& p : trainable_params()) out.push_back(p);
  return out;
}

void InstructModel::save(const std::filesystem::path& path) const {
  save_checkpoint(path, "vllm", cfg_.to_json(), all_params());
}

InstructModel InstructModel::load(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  EFL_CHECK(ck.kind == "vllm", Errc::invalid_argument, "checkpoint kind is '" + ck.kind + "', expected 'vllm'");
  InstructModel m(VllmConfig::from_json(ck.config));
  restore_params(ck, m.all_params());
  return m;
}

VllmTrainer::VllmTrainer(InstructModel& model, VllmTrainConfig cfg)
    : model_(model), cfg_(cfg), opt_(model.trainable_params(), AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay, 1.0}) {}

double VllmTrainer::train_step(const std::vector<InstructSample>& batch) {
  const Var loss = model_.batch_loss(batch);
  const double v = loss.item();
  if (!std::isfinite(v)) throw Error(Errc::training_diverged, "instruction-tuning loss is not finite");
  backward(loss);
  opt_.step();
  return v;
}

}  // namespace efl::vllm
