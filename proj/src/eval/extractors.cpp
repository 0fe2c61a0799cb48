#include "efl/eval/extractors.hpp"

#include "efl/error.hpp"
#include "efl/io.hpp"
#include "efl/nn/optim.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace efl::eval {

using nn::NoGradGuard;
using nn::Tensor;
using nn::Var;

namespace {

// Maps [0,1] pixels to [-1,1] so random filters see zero-mean input.
Var centered(const Image& img) {
  Tensor t = img;
  for (auto& v : t.storage()) v = 2.0 * v - 1.0;
  return Var(std::move(t));
}

std::vector<double> grid_pool(const Tensor& act, int grid) {
  const int c = act.dim(0), h = act.dim(1), w = act.dim(2);
  std::vector<double> out(static_cast<std::size_t>(c) * grid * grid, 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int cell = (y * grid / h) * grid + x * grid / w;
        out[static_cast<std::size_t>(ch) * grid * grid + cell] += act[(static_cast<std::size_t>(ch) * h + y) * w + x];
      }
  const double per_cell = static_cast<double>(h) * w / (grid * grid);
  for (auto& v : out) v /= per_cell;
  return out;
}

std::vector<double> channel_means(const Tensor& act) {
  const int c = act.dim(0);
  const std::size_t plane = act.size() / static_cast<std::size_t>(c);
  std::vector<double> out(static_cast<std::size_t>(c), 0.0);
  for (int ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < plane; ++i) out[static_cast<std::size_t>(ch)] += act[ch * plane + i];
    out[static_cast<std::size_t>(ch)] /= static_cast<double>(plane);
  }
  return out;
}

std::string digest_of(const std::string& role, const nn::ParamList& params) {
  return role + ":" + io::hex64(nn::param_digest(params));
}

// Random translation (edge clamped), brightness shift and pixel noise.
Image augment(const Image& img, Rng& rng) {
  const int h = image_height(img), w = image_width(img);
  const int dy = static_cast<int>(rng.index(9)) - 4, dx = static_cast<int>(rng.index(9)) - 4;
  const double gain = rng.uniform(0.85, 1.15), shift = rng.uniform(-0.08, 0.08);
  Image out = blank_image(h, w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int sy = std::clamp(y + dy, 0, h - 1), sx = std::clamp(x + dx, 0, w - 1);
        const double v = img[(static_cast<std::size_t>(c) * h + sy) * w + sx];
        out[(static_cast<std::size_t>(c) * h + y) * w + x] = v * gain + shift + 0.02 * rng.normal();
      }
  return clamp01(out);
}

}  // namespace

PerceptualEncoder::PerceptualEncoder(std::uint64_t seed) {
  Rng rng(seed);
  layers_.emplace_back(3, 16, 3, 1, rng);
  layers_.emplace_back(16, 32, 3, 2, rng);
  layers_.emplace_back(32, 32, 3, 2, rng);
  // Widen the weights past the fan-in default so tanh is not stuck linear.
  for (auto& l : layers_)
    for (auto& v : l.weight.mutable_value().storage()) v *= 1.7;
}

std::vector<Tensor> PerceptualEncoder::activations(const Image& img) const {
  check_image(img);
  NoGradGuard guard;
  std::vector<Tensor> out;
  Var x = centered(img);
  for (const auto& l : layers_) {
    x = nn::tanh(l(x));
    out.push_back(x.value());
  }
  return out;
}

std::vector<double> PerceptualEncoder::features(const Image& img) const {
  std::vector<double> out;
  for (const auto& a : activations(img)) {
    const auto p = grid_pool(a, 4);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::vector<double> PerceptualEncoder::distribution_features(const Image& img) const {
  const auto acts = activations(img);
  std::vector<double> out;
  for (std::size_t i = acts.size() - 2; i < acts.size(); ++i) {
    const auto m = channel_means(acts[i]);
    out.insert(out.end(), m.begin(), m.end());
  }
  return out;
}

std::string PerceptualEncoder::fingerprint() const {
  nn::ParamList p;
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(p, "l" + std::to_string(i));
  return digest_of("perceptual", p);
}

ContrastiveImageEncoder::ContrastiveImageEncoder(std::uint64_t seed) {
  Rng rng(Rng(seed).derive("contrastive_image"));
  convs_.emplace_back(3, 16, 3, 2, rng);
  convs_.emplace_back(16, 32, 3, 2, rng);
  convs_.emplace_back(32, 32, 3, 2, rng);
  head_ = nn::Linear(32, kDim, rng);
}

Var ContrastiveImageEncoder::embed(const Var& img) const {
  Var x = img;
  for (const auto& c : convs_) x = nn::silu(c(x));
  const int ch = x.shape()[0];
  const int hw = static_cast<int>(x.value().size()) / ch;
  // Global average pool as a matmul against a constant column.
  Var pooled = nn::matmul(nn::reshape(x, {ch, hw}), Var(Tensor({hw, 1}, 1.0 / hw)));
  return head_(nn::reshape(pooled, {1, ch}));
}

std::vector<double> ContrastiveImageEncoder::trunk(const Image& img) const {
  check_image(img);
  NoGradGuard guard;
  return embed(centered(img)).value().to_vector();
}

std::vector<double> ContrastiveImageEncoder::features(const Image& img) const {
  auto v = trunk(img);
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  EFL_CHECK(n > 0.0, Errc::numeric, "contrastive embedding has zero norm");
  for (auto& x : v) x /= n;
  return v;
}

double ContrastiveImageEncoder::train(std::span<const Image> images, const ContrastiveConfig& cfg) {
  EFL_CHECK(images.size() >= 2, Errc::invalid_argument, "contrastive training needs at least 2 images");
  nn::AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.weight_decay = 0.0;
  nn::AdamW opt(params(), oc);
  Rng rng(Rng(cfg.seed).derive("contrastive_train"));
  const int b = std::min<int>(cfg.batch, static_cast<int>(images.size()));
  std::vector<int> targets(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) targets[static_cast<std::size_t>(i)] = i;
  double last = 0.0;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<Var> za, zb;
    for (int i = 0; i < b; ++i) {
      const Image& img = images[rng.index(images.size())];
      za.push_back(embed(centered(augment(img, rng))));
      zb.push_back(embed(centered(augment(img, rng))));
    }
    Var a = nn::l2_normalize_rows(nn::concat_rows(za));
    Var bb = nn::l2_normalize_rows(nn::concat_rows(zb));
    Var logits = nn::scale(nn::matmul_nt(a, bb), 1.0 / cfg.temperature);
    Var loss = nn::scale(nn::add(nn::cross_entropy(logits, targets), nn::cross_entropy(nn::transpose(logits), targets)), 0.5);
    last = loss.item();
    EFL_CHECK(std::isfinite(last), Errc::training_diverged, "contrastive loss is not finite");
    nn::backward(loss);
    opt.step();
  }
  return last;
}

nn::ParamList ContrastiveImageEncoder::params() const {
  nn::ParamList p;
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(p, "conv" + std::to_string(i));
  head_.collect(p, "head");
  return p;
}

std::string ContrastiveImageEncoder::fingerprint() const { return digest_of("contrastive_image", params()); }

std::vector<double> VideoEncoder::embed(std::span<const Image> stack) const {
  EFL_CHECK(stack.size() == kStackLength, Errc::invalid_argument,
            "video stack must hold " + std::to_string(kStackLength) + " frames");
  std::vector<std::vector<double>> f;
  for (const auto& img : stack) f.push_back(frames_.trunk(img));
  const std::size_t d = f[0].size();
  std::vector<double> out(2 * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    out[i] = (f[0][i] + f[1][i] + f[2][i] + f[3][i]) / 4.0;
    out[d + i] = (f[2][i] + f[3][i] - f[0][i] - f[1][i]) / 2.0;
  }
  double n = 0.0;
  for (double x : out) n += x * x;
  n = std::sqrt(n);
  EFL_CHECK(n > 0.0, Errc::numeric, "video embedding has zero norm");
  for (auto& x : out) x /= n;
  return out;
}

std::string VideoEncoder::fingerprint() const { return "video:" + frames_.fingerprint(); }

std::vector<Image> egovlp_stack(const Image& frame) { return {frame, frame, frame, frame}; }

std::vector<Image> egovlp_plus_stack(const Image& input, const Image& frame) { return {input, input, frame, frame}; }

void NearestCaptioner::add(const Image& img, std::string caption) {
  keys_.push_back(extractor_->features(img));
  captions_.push_back(std::move(caption));
}

std::string NearestCaptioner::caption(const Image& img) const {
  if (keys_.empty()) return {};
  const auto q = extractor_->features(img);
  std::size_t best = 0;
  double best_sim = -2.0;
  for (std::size_t i = 0; i < keys_.size(); ++i) {
    const double s = cosine_similarity(q, keys_[i]);
    if (s > best_sim) {
      best_sim = s;
      best = i;
    }
  }
  return captions_[best];
}

std::string NearestCaptioner::fingerprint() const {
  std::string bank;
  for (const auto& c : captions_) bank += c + '\n';
  return role_ + ":" + extractor_->fingerprint() + ":" + io::hex64(fnv1a64(bank));
}

std::vector<double> TrigramTextEncoder::encode(const std::string& text) const {
  std::string s = " ";
  for (char c : text) s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  s.push_back(' ');
  std::vector<double> v(kDim, 0.0);
  const bool blank = std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); });
  if (blank) {
    std::fill(v.begin(), v.end(), 1.0 / std::sqrt(static_cast<double>(kDim)));
    return v;
  }
  for (std::size_t i = 0; i + 3 <= s.size(); ++i) v[fnv1a64(std::string_view(s).substr(i, 3)) % kDim] += 1.0;
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (auto& x : v) x /= n;
  return v;
}

}  // namespace efl::eval
