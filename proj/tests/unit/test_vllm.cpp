#include <doctest.h>

#include "efl/error.hpp"
#include "efl/vllm/vllm.hpp"
#include "support/gradcheck.hpp"

#include <cmath>
#include <filesystem>

using namespace efl;
using namespace efl::vllm;
using nn::Tensor;
using nn::Var;

namespace {

VllmConfig tiny_config() {
  VllmConfig c;
  c.resolution = 8;
  c.patch_size = 4;
  c.d_vision = 8;
  c.d_llm = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.ffn_mult = 2;
  c.context = 64;
  c.text_tokens = 8;
  c.seed = 11;
  return c;
}

Image random_image(int res, Rng& rng) {
  Image img({3, res, res});
  for (auto& v : img.storage()) v = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("byte tokenizer") {
  CHECK(Tokenizer::kPad == 256);
  CHECK(Tokenizer::kBos == 257);
  CHECK(Tokenizer::kEos == 258);
  const std::string s = "Open the drawer.";
  const auto ids = Tokenizer::encode(s);
  CHECK(ids.size() == s.size());
  CHECK(Tokenizer::decode(ids) == s);
  auto with_end = ids;
  with_end.push_back(Tokenizer::kEos);
  with_end.push_back('x');
  CHECK(Tokenizer::decode(with_end) == s);
  CHECK(Tokenizer::decode({Tokenizer::kBos, 'a', Tokenizer::kPad}) == "a");
}

TEST_CASE("image encoding") {
  InstructModel m(tiny_config());
  Rng rng(1);
  const Image img = random_image(8, rng);
  const auto e = m.encode_image(img);
  CHECK(e.tokens.shape() == std::vector<int>{4, 16});
  CHECK(e.tokens.all_finite());
  CHECK(m.encode_image(img).tokens.storage() == e.tokens.storage());
  CHECK(m.extract_image_embedding(img).tokens.storage() == e.tokens.storage());
  CHECK_THROWS_AS(m.encode_image(random_image(16, rng)), Error);

  // Frozen projection has orthonormal columns.
  const auto& phi = m.phi.value().matrix();
  CHECK(((phi.transpose() * phi) - Eigen::MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff() < 1e-12);

  // Zero projection gives zero tokens.
  m.tau.weight.mutable_value().fill(0.0);
  m.tau.bias.mutable_value().fill(0.0);
  CHECK(m.encode_image(blank_image(8, 8)).tokens.matrix().cwiseAbs().maxCoeff() == 0.0);

  VllmConfig def;
  CHECK(InstructModel(def).extract_image_embedding(blank_image(64, 64, 0.3)).tokens.shape() == std::vector<int>{16, 64});
}

TEST_CASE("image encoding matches an explicit matrix product") {
  VllmConfig c;
  c.resolution = 4;
  c.patch_size = 2;
  c.d_vision = 2;
  c.d_llm = 2;
  c.n_heads = 1;
  c.n_layers = 1;
  c.context = 16;
  InstructModel m(c);
  Rng rng(2);
  for (auto& v : m.phi.mutable_value().storage()) v = rng.uniform(-1, 1);
  m.tau.weight.mutable_value() = Tensor({2, 2}, {1.0, -2.0, 0.5, 3.0});
  m.tau.bias.mutable_value() = Tensor({2}, {0.25, -0.75});
  const Image img = random_image(4, rng);
  const auto got = m.encode_image(img).tokens;
  REQUIRE(got.shape() == std::vector<int>{4, 2});
  for (int py = 0; py < 2; ++py)
    for (int px = 0; px < 2; ++px) {
      double feat[2] = {0, 0};
      int k = 0;
      for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < 2; ++y)
          for (int x = 0; x < 2; ++x, ++k) {
            const double pix = img[(static_cast<std::size_t>(ch) * 4 + py * 2 + y) * 4 + px * 2 + x];
            for (int j = 0; j < 2; ++j) feat[j] += pix * m.phi.value().at(k, j);
          }
      const double o0 = feat[0] * 1.0 + feat[1] * 0.5 + 0.25;
      const double o1 = feat[0] * -2.0 + feat[1] * 3.0 - 0.75;
      CHECK(got.at(py * 2 + px, 0) == doctest::Approx(o0).epsilon(1e-12));
      CHECK(got.at(py * 2 + px, 1) == doctest::Approx(o1).epsilon(1e-12));
    }
}

TEST_CASE("multimodal sequence assembly") {
  VllmConfig c;
  c.resolution = 4;
  c.patch_size = 2;
  c.d_vision = 4;
  c.d_llm = 8;
  c.n_heads = 2;
  c.context = 12;
  InstructModel m(c);
  m.pos_emb.mutable_value().fill(0.0);
  Rng rng(4);
  const auto h = m.encode_image(random_image(4, rng)).tokens;
  const std::vector<int> prompt{'a', 'b', 'c', 'd', 'e', 'f'};
  const auto seq = m.assemble_multimodal_sequence(Var(h), prompt);
  CHECK(seq.embeddings.rows() == 10);
  CHECK(seq.positions.size() == 10);
  for (std::size_t i = 0; i < seq.positions.size(); ++i) CHECK(seq.positions[i] == static_cast<int>(i));
  CHECK(seq.embeddings.value().rows_slice(0, 4).storage() == h.storage());
  CHECK(seq.embeddings.value().at(4, 0) == m.tok_emb.value().at('a', 0));

  CHECK(m.assemble_multimodal_sequence(Var(h), {}).embeddings.rows() == 4);
  CHECK_THROWS_AS(m.assemble_multimodal_sequence(Var(h), std::vector<int>(9, 'x')), Error);
}

TEST_CASE("uniform logits cost ln(vocab) per token") {
  const std::vector<int> targets{3, 0, 15, 7, -1};
  CHECK(nn::cross_entropy(Var(Tensor({5, 16})), targets).item() == doctest::Approx(std::log(16.0)).epsilon(1e-12));

  InstructModel m(tiny_config());
  m.head.weight.mutable_value().fill(0.0);
  m.head.bias.mutable_value().fill(0.0);
  Rng rng(5);
  const InstructSample s{random_image(8, rng), "Do it", "ab"};
  CHECK(m.sample_loss(s).item() == doctest::Approx(std::log(259.0)).epsilon(1e-12));
}

TEST_CASE("sequence layout supervises only the response and the end token") {
  InstructModel m(tiny_config());
  const auto lay = m.layout("Hi", "xyz");
  const int mtok = 4;
  CHECK(lay.tokens == std::vector<int>{'H', 'i', Tokenizer::kBos, 'x', 'y', 'z', Tokenizer::kEos});
  CHECK(lay.response_begin == mtok + 3);
  CHECK(lay.targets.size() == static_cast<std::size_t>(mtok + 7));
  const std::vector<int> expect{-1, -1, -1, -1, -1, -1, 'x', 'y', 'z', Tokenizer::kEos, -1};
  CHECK(lay.targets == expect);
}

TEST_CASE("prompt and image positions never affect the loss") {
  InstructModel m(tiny_config());
  Rng rng(6);
  const InstructSample s{random_image(8, rng), "Please describe", "the hand moves"};
  const auto lay = m.layout(s.prompt, s.target_text);
  nn::NoGradGuard guard;
  const auto seq = m.assemble_multimodal_sequence(m.encode_image_var(s.image), lay.tokens);
  const Tensor logits = m.logits(m.hidden_states(seq.embeddings)).value();
  const double base = nn::cross_entropy(Var(logits), lay.targets).item();
  CHECK(base == doctest::Approx(m.sample_loss(s).item()).epsilon(1e-12));
  for (int trial = 0; trial < 20; ++trial) {
    Tensor p = logits;
    for (int r = 0; r < p.rows(); ++r)
      if (lay.targets[static_cast<std::size_t>(r)] < 0)
        for (int j = 0; j < p.cols(); ++j) p.at(r, j) += rng.uniform(-50, 50);
    CHECK(nn::cross_entropy(Var(p), lay.targets).item() == base);
  }
}

TEST_CASE("gradients match central differences") {
  InstructModel m(tiny_config());
  Rng rng(7);
  const std::vector<InstructSample> batch{{random_image(8, rng), "Lift", "up it goes"},
                                          {random_image(8, rng), "Push cup", "away"}};
  auto loss = [&] { return m.batch_loss(batch); };
  const auto& b0 = m.blocks[0];
  const auto& b1 = m.blocks[1];
  const std::vector<std::pair<const char*, Var>> params{
      {"tau", m.tau.weight},       {"tau bias", m.tau.bias},   {"query", b0.wq[0].weight}, {"key", b1.wk[1].weight},
      {"value", b0.wv[1].weight},  {"attn out", b1.wo[0].weight}, {"ffn", b0.ff1.weight},  {"ln", b1.ln1.gamma},
      {"head", m.head.weight}};
  for (const auto& [name, p] : params) {
    const auto r = testing::check_gradient(loss, p, 4, rng);
    INFO(std::string(name));
    for (std::size_t i = 0; i < r.analytic.size(); ++i) INFO(r.analytic[i], " vs ", r.numeric[i]);
    CHECK(r.checked >= 3);
    CHECK(r.max_rel_error < 1e-4);
  }
  // Embedding rows are ~0.02 in scale and feed a layer norm, so they need a
  // step well below their magnitude.
  for (const auto& p : {m.tok_emb, m.pos_emb}) {
    const auto r = testing::check_gradient(loss, p, 4, rng, 1e-5);
    CHECK(r.checked >= 3);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("training leaves the image encoder untouched") {
  InstructModel m(tiny_config());
  Rng rng(8);
  const std::vector<InstructSample> batch{{random_image(8, rng), "Lift", "up"}};
  const auto phi0 = nn::param_digest(m.frozen_params());
  const auto train0 = nn::param_digest(m.trainable_params());
  VllmTrainer tr(m, {});
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    last = tr.train_step(batch);
    if (i == 0) first = last;
  }
  CHECK(nn::param_digest(m.frozen_params()) == phi0);
  CHECK(nn::param_digest(m.trainable_params()) != train0);
  CHECK(last < first);
  CHECK(m.phi.grad().empty());
}

TEST_CASE("non-finite loss aborts training") {
  InstructModel m(tiny_config());
  Rng rng(9);
  m.head.bias.mutable_value()[0] = std::nan("");
  VllmTrainer tr(m, {});
  try {
    tr.train_step({{random_image(8, rng), "x", "y"}});
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::training_diverged);
  }
}

TEST_CASE("greedy generation") {
  InstructModel m(tiny_config());
  Rng rng(10);
  const Image img = random_image(8, rng);
  const auto one = m.generate_description(img, "Describe", 1);
  CHECK(one.tokens.size() == 1);
  const auto a = m.generate_description(img, "Describe", 20);
  const auto b = m.generate_description(img, "Describe", 20);
  CHECK(a.tokens == b.tokens);
  CHECK(a.text == b.text);
  CHECK(a.to_enriched().source == enrich::Source::tuned_vllm);

  // A model whose head always prefers the end token yields an empty, flagged result.
  m.head.weight.mutable_value().fill(0.0);
  m.head.bias.mutable_value().fill(0.0);
  m.head.bias.mutable_value()[Tokenizer::kEos] = 1.0;
  const auto e = m.generate_description(img, "Describe", 20);
  CHECK(e.tokens == std::vector<int>{Tokenizer::kEos});
  CHECK(e.empty);
  CHECK(e.text.empty());
}

TEST_CASE("text embedding pads and truncates to N rows") {
  VllmConfig c = tiny_config();
  c.text_tokens = 32;
  InstructModel m(c);
  Rng rng(12);
  std::vector<int> toks(40);
  for (auto& t : toks) t = static_cast<int>(rng.index(256));

  const auto full = m.extract_text_embedding(toks);
  CHECK(full.tokens.shape() == std::vector<int>{32, 16});
  CHECK(full.valid_len == 32);
  const auto prefix = m.extract_text_embedding(std::vector<int>(toks.begin(), toks.begin() + 32));
  CHECK(prefix.tokens.storage() == full.tokens.storage());

  const auto short_emb = m.extract_text_embedding(std::vector<int>(toks.begin(), toks.begin() + 10));
  CHECK(short_emb.valid_len == 10);
  const Tensor pad = m.pad_embedding();
  for (int r = 10; r < 32; ++r)
    for (int j = 0; j < 16; ++j) CHECK(short_emb.tokens.at(r, j) == pad.at(0, j));
  // Causal: the first 10 rows agree with the longer input's first 10 rows.
  const auto diff = (short_emb.tokens.rows_slice(0, 10).matrix() - full.tokens.rows_slice(0, 10).matrix()).cwiseAbs().maxCoeff();
  CHECK(diff < 1e-12);

  for (int len = 1; len <= 96; len += 5) {
    const auto e = m.extract_text_embedding(std::vector<int>(static_cast<std::size_t>(len), 'a'));
    CHECK(e.tokens.rows() == 32);
    CHECK(e.valid_len == std::min(len, 32));
    CHECK(e.tokens.all_finite());
  }
  const auto empty = m.extract_text_embedding({});
  CHECK(empty.valid_len == 0);
  CHECK(empty.tokens.rows_slice(0, 1).storage() == pad.storage());
}

TEST_CASE("checkpoint round trip") {
  InstructModel m(tiny_config());
  Rng rng(13);
  VllmTrainer tr(m, {});
  const Image img = random_image(8, rng);
  tr.train_step({{img, "Go", "fast"}});
  const auto path = std::filesystem::temp_directory_path() / "efl_test_vllm.ckpt";
  m.save(path);
  const InstructModel back = InstructModel::load(path);
  CHECK(nn::param_digest(back.all_params()) == nn::param_digest(m.all_params()));
  CHECK(back.encode_image(img).tokens.storage() == m.encode_image(img).tokens.storage());
  CHECK(back.generate_description(img, "Go", 8).tokens == m.generate_description(img, "Go", 8).tokens);
  std::filesystem::remove(path);
}
