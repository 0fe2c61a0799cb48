#include "efl/ldm/diffusion.hpp"

#include "efl/error.hpp"

#include <cmath>

namespace efl::ldm {

using namespace efl::nn;

// ---- schedule ----

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
  EFL_CHECK(T >= 2, Errc::config, "diffusion needs at least two timesteps");
  NoiseSchedule s;
  s.T = T;
  s.betas.resize(static_cast<std::size_t>(T));
  s.alpha_bars.resize(static_cast<std::size_t>(T));
  double ab = 1.0;
  for (int t = 0; t < T; ++t) {
    const double b = beta_start + (beta_end - beta_start) * t / (T - 1);
    s.betas[static_cast<std::size_t>(t)] = b;
    ab *= 1.0 - b;
    s.alpha_bars[static_cast<std::size_t>(t)] = ab;
  }
  s.validate();
  return s;
}

void NoiseSchedule::validate() const {
  EFL_CHECK(static_cast<int>(betas.size()) == T && static_cast<int>(alpha_bars.size()) == T, Errc::config,
            "schedule length mismatch");
  for (int t = 0; t < T; ++t) {
    const auto i = static_cast<std::size_t>(t);
    EFL_CHECK(betas[i] > 0.0 && betas[i] < 1.0, Errc::config, "betas must lie in (0, 1)");
    if (t > 0) {
      EFL_CHECK(betas[i] >= betas[i - 1], Errc::config, "betas must be non-decreasing");
      EFL_CHECK(alpha_bars[i] < alpha_bars[i - 1], Errc::config, "alpha_bar must be strictly decreasing");
    }
  }
  EFL_CHECK(alpha_bars.back() < 0.01, Errc::config, "final alpha_bar must fall below 0.01");
}

std::vector<int> NoiseSchedule::inference_timesteps(int steps) const {
  EFL_CHECK(steps >= 1 && steps <= T, Errc::config, "sampling steps must lie in [1, T]");
  if (steps == 1) return {T - 1};
  std::vector<int> ts(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k)
    ts[static_cast<std::size_t>(k)] =
        static_cast<int>(std::lround(static_cast<double>(T - 1) * (steps - 1 - k) / (steps - 1)));
  return ts;
}

Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& noise, const NoiseSchedule& s) {
  EFL_CHECK(t >= 0 && t < s.T, Errc::invalid_argument, "timestep " + std::to_string(t) + " out of range");
  EFL_CHECK(z0.same_shape(noise), Errc::shape_mismatch, "noise must match the latent shape");
  const double ab = s.alpha_bars[static_cast<std::size_t>(t)];
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(z0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * noise[i];
  return out;
}

Var forward_diffuse(const Var& z0, int t, const Tensor& noise, const NoiseSchedule& s) {
  EFL_CHECK(t >= 0 && t < s.T, Errc::invalid_argument, "timestep " + std::to_string(t) + " out of range");
  EFL_CHECK(z0.value().same_shape(noise), Errc::shape_mismatch, "noise must match the latent shape");
  const double ab = s.alpha_bars[static_cast<std::size_t>(t)];
  Tensor n = noise;
  for (auto& v : n.storage()) v *= std::sqrt(1.0 - ab);
  return add(scale(z0, std::sqrt(ab)), Var(std::move(n)));
}

Tensor standard_normal(const std::vector<int>& shape, Rng& rng) {
  Tensor t(shape);
  for (auto& v : t.storage()) v = rng.normal();
  return t;
}

// ---- autoencoder ----

nlohmann::json AutoencoderConfig::to_json() const {
  return {{"resolution", resolution}, {"factor", factor}, {"latent_channels", latent_channels},
          {"width", width}, {"seed", seed}};
}

AutoencoderConfig AutoencoderConfig::from_json(const nlohmann::json& j) {
  AutoencoderConfig c;
  c.resolution = j.at("resolution");
  c.factor = j.at("factor");
  c.latent_channels = j.at("latent_channels");
  c.width = j.at("width");
  c.seed = j.at("seed");
  return c;
}

Autoencoder::Autoencoder(AutoencoderConfig cfg) : cfg_(cfg) {
  EFL_CHECK(cfg_.factor > 0 && cfg_.resolution % cfg_.factor == 0, Errc::config,
            "resolution must be a multiple of the downsample factor");
  Rng r = Rng(cfg_.seed).derive("autoencoder");
  const int packed = 3 * cfg_.factor * cfg_.factor;
  const int w = cfg_.width;
  enc1 = Conv2d(packed, w, 3, 1, r);
  enc2 = Conv2d(w, w, 3, 1, r);
  enc3 = Conv2d(w, cfg_.latent_channels, 3, 1, r);
  dec1 = Conv2d(cfg_.latent_channels, w, 3, 1, r);
  dec2 = Conv2d(w, w, 3, 1, r);
  dec3 = Conv2d(w, w, 3, 1, r);
  dec4 = Conv2d(w, packed, 3, 1, r);
}

Var Autoencoder::encode_raw(const Var& image) const {
  EFL_CHECK(image.value().ndim() == 3 && image.shape()[0] == 3 && image.shape()[1] == cfg_.resolution &&
                image.shape()[2] == cfg_.resolution,
            Errc::shape_mismatch, "autoencoder expects [3," + std::to_string(cfg_.resolution) + "," +
                                      std::to_string(cfg_.resolution) + "], got " + image.value().shape_str());
  Var h = silu(enc1(space_to_depth(image, cfg_.factor)));
  h = add(h, silu(enc2(h)));
  return enc3(h);
}

Var Autoencoder::decode_raw(const Var& latent) const {
  const int s = cfg_.latent_size();
  EFL_CHECK(latent.value().ndim() == 3 && latent.shape()[0] == cfg_.latent_channels && latent.shape()[1] == s &&
                latent.shape()[2] == s,
            Errc::shape_mismatch, "latent has shape " + latent.value().shape_str());
  Var h = silu(dec1(latent));
  h = add(h, silu(dec2(h)));
  h = add(h, silu(dec3(h)));
  return depth_to_space(dec4(h), cfg_.factor);
}

Tensor Autoencoder::encode_latent(const Image& image) const {
  NoGradGuard guard;
  Tensor z = encode_raw(Var(image)).value();
  for (auto& v : z.storage()) v *= latent_scale;
  return z;
}

Image Autoencoder::decode_latent(const Tensor& latent) const {
  NoGradGuard guard;
  Tensor z = latent;
  for (auto& v : z.storage()) v /= latent_scale;
  return clamp01(decode_raw(Var(std::move(z))).value());
}

double Autoencoder::train(const std::vector<Image>& images, const AutoencoderTrainConfig& tc) {
  EFL_CHECK(!images.empty(), Errc::invalid_argument, "autoencoder training needs images");
  AdamW opt(params(), AdamWConfig{tc.lr, 0.9, 0.999, 1e-8, 0.0, 1.0});
  Rng rng = Rng(tc.seed).derive("autoencoder-train");
  const int bs = std::min<int>(tc.batch_size, static_cast<int>(images.size()));
  double last = 0.0;
  for (int step = 0; step < tc.steps; ++step) {
    opt.config().lr = cosine_lr(tc.lr, step, tc.steps, std::min(100, tc.steps / 10));
    std::vector<Var> losses;
    for (int b = 0; b < bs; ++b) {
      const Image& img = images[rng.index(images.size())];
      losses.push_back(mse_loss(decode_raw(encode_raw(Var(img))), img));
    }
    const Var loss = scale(add_n(losses), 1.0 / bs);
    last = loss.item();
    if (!std::isfinite(last)) throw Error(Errc::training_diverged, "autoencoder loss is not finite");
    backward(loss);
    opt.step();
  }
  fit_latent_scale(images);
  return last;
}

void Autoencoder::fit_latent_scale(const std::vector<Image>& images) {
  EFL_CHECK(!images.empty(), Errc::invalid_argument, "latent scale needs images");
  NoGradGuard guard;
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& img : images) {
    const Tensor z = encode_raw(Var(img)).value();
    for (double v : z.storage()) {
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  const double mean = sum / static_cast<double>(n);
  const double var = sq / static_cast<double>(n) - mean * mean;
  EFL_CHECK(var > 1e-20, Errc::numeric, "latents have zero variance");
  latent_scale = 1.0 / std::sqrt(var);
}

ParamList Autoencoder::params() const {
  ParamList out;
  enc1.collect(out, "enc1");
  enc2.collect(out, "enc2");
  enc3.collect(out, "enc3");
  dec1.collect(out, "dec1");
  dec2.collect(out, "dec2");
  dec3.collect(out, "dec3");
  dec4.collect(out, "dec4");
  return out;
}

// ---- attention ----

Var attention(const Var& q, const Var& k, const Var& v, int valid_keys, Tensor* weights) {
  EFL_CHECK(q.cols() == k.cols(), Errc::shape_mismatch, "query and key widths differ");
  EFL_CHECK(k.rows() == v.rows(), Errc::shape_mismatch, "key and value counts differ");
  const SoftmaxMask mask =
      valid_keys >= 0 && valid_keys < k.rows() ? SoftmaxMask::prefix(valid_keys) : SoftmaxMask::none();
  EFL_CHECK(valid_keys != 0, Errc::invalid_argument, "attention needs at least one valid key");
  const Var att = softmax_rows(scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(q.cols()))), mask);
  if (weights != nullptr) *weights = att.value();
  return matmul(att, v);
}

Var cross_attention(const Var& u, const Var& c, const CrossAttentionParams& p, int valid_keys, Tensor* weights) {
  EFL_CHECK(u.cols() == p.wq.in_features(), Errc::shape_mismatch,
            "feature width " + std::to_string(u.cols()) + " does not match W_Q");
  EFL_CHECK(c.cols() == p.wk.in_features() && c.cols() == p.wv.in_features(), Errc::shape_mismatch,
            "conditioning width " + std::to_string(c.cols()) + " does not match W_K/W_V");
  return attention(p.wq(u), p.wk(c), p.wv(c), valid_keys, weights);
}

// ---- UNet ----

nlohmann::json UNetConfig::to_json() const {
  return {{"latent_channels", latent_channels}, {"base", base}, {"time_dim", time_dim},
          {"cond_dim", cond_dim}, {"groups", groups}, {"noise_skip", noise_skip},
          {"T", T}, {"beta_start", beta_start}, {"beta_end", beta_end}, {"seed", seed}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.latent_channels = j.at("latent_channels");
  c.base = j.at("base");
  c.time_dim = j.at("time_dim");
  c.cond_dim = j.at("cond_dim");
  c.groups = j.at("groups");
  c.noise_skip = j.at("noise_skip");
  c.T = j.at("T");
  c.beta_start = j.at("beta_start");
  c.beta_end = j.at("beta_end");
  c.seed = j.at("seed");
  return c;
}

namespace {

ResBlock make_res(int in, int out, int time_dim, int groups, Rng& r) {
  ResBlock b;
  b.n1 = GroupNorm(in, groups);
  b.c1 = Conv2d(in, out, 3, 1, r);
  b.n2 = GroupNorm(out, groups);
  b.c2 = Conv2d(out, out, 3, 1, r);
  b.film_scale = Linear(time_dim, out, r);
  b.film_shift = Linear(time_dim, out, r);
  if (in != out) b.skip = Conv2d(in, out, 1, 1, r);
  return b;
}

AttnBlock make_attn(int channels, int d, int groups, Rng& r) {
  AttnBlock b;
  b.norm = GroupNorm(channels, groups);
  b.attn = {Linear(channels, d, r, Init::xavier, false), Linear(d, d, r, Init::xavier, false),
            Linear(d, d, r, Init::xavier, false)};
  b.out = Linear(d, channels, r);
  return b;
}

void collect_res(const ResBlock& b, ParamList& out, const std::string& p) {
  b.n1.collect(out, p + ".n1");
  b.c1.collect(out, p + ".c1");
  b.n2.collect(out, p + ".n2");
  b.c2.collect(out, p + ".c2");
  b.film_scale.collect(out, p + ".film_scale");
  b.film_shift.collect(out, p + ".film_shift");
  if (b.skip) b.skip->collect(out, p + ".skip");
}

void collect_attn(const AttnBlock& b, ParamList& out, const std::string& p) {
  b.norm.collect(out, p + ".norm");
  b.attn.wq.collect(out, p + ".wq");
  b.attn.wk.collect(out, p + ".wk");
  b.attn.wv.collect(out, p + ".wv");
  b.out.collect(out, p + ".out");
}

}  // namespace

UNet::UNet(UNetConfig cfg) : cfg_(cfg) {
  EFL_CHECK(cfg_.base % cfg_.groups == 0, Errc::config, "UNet width must be a multiple of the group count");
  Rng r = Rng(cfg_.seed).derive("unet");
  const int b = cfg_.base;
  time1 = Linear(b, cfg_.time_dim, r);
  time2 = Linear(cfg_.time_dim, cfg_.time_dim, r);
  conv_in = Conv2d(2 * cfg_.latent_channels, b, 3, 1, r);
  res0 = make_res(b, b, cfg_.time_dim, cfg_.groups, r);
  attn0 = make_attn(b, cfg_.cond_dim, cfg_.groups, r);
  down = Conv2d(b, 2 * b, 3, 2, r);
  res1 = make_res(2 * b, 2 * b, cfg_.time_dim, cfg_.groups, r);
  attn1 = make_attn(2 * b, cfg_.cond_dim, cfg_.groups, r);
  up = Conv2d(2 * b, b, 3, 1, r);
  res2 = make_res(2 * b, b, cfg_.time_dim, cfg_.groups, r);
  attn2 = make_attn(b, cfg_.cond_dim, cfg_.groups, r);
  norm_out = GroupNorm(b, cfg_.groups);
  conv_out = Conv2d(b, cfg_.latent_channels, 3, 1, r, Init::zeros);
  skip_gate = parameter(Tensor({cfg_.latent_channels}));
  for (double ab : NoiseSchedule::linear(cfg_.T, cfg_.beta_start, cfg_.beta_end).alpha_bars)
    skip_coef_.push_back(std::sqrt(1.0 - ab));
}

Var UNet::time_embedding(int t) const {
  const int half = cfg_.base / 2;
  Tensor e({1, cfg_.base});
  for (int k = 0; k < half; ++k) {
    const double f = std::exp(-std::log(10000.0) * k / half);
    e.at(0, k) = std::sin(t * f);
    e.at(0, half + k) = std::cos(t * f);
  }
  return silu(time2(silu(time1(Var(std::move(e))))));
}

Var UNet::res_block(const ResBlock& b, const Var& x, const Var& temb) const {
  Var h = b.c1(silu(b.n1(x)));
  const int c = h.shape()[0];
  const Var gain = add(reshape(b.film_scale(temb), {c}), Var(Tensor({c}, 1.0)));
  h = add_channel(mul_channel(b.n2(h), gain), reshape(b.film_shift(temb), {c}));
  h = b.c2(silu(h));
  return add(b.skip ? (*b.skip)(x) : x, h);
}

Var UNet::attn_block(const AttnBlock& b, const Var& x, const Var& c, int valid_rows) const {
  const int ch = x.shape()[0], hh = x.shape()[1], ww = x.shape()[2];
  const Var tokens = transpose(reshape(b.norm(x), {ch, hh * ww}));
  const Var o = b.out(cross_attention(tokens, c, b.attn, valid_rows));
  return add(x, reshape(transpose(o), {ch, hh, ww}));
}

Var UNet::predict(const Var& z_t, const Var& z_input, int t, const Var& c, int valid_rows) const {
  EFL_CHECK(z_t.value().same_shape(z_input.value()), Errc::shape_mismatch, "z_t and z_input shapes differ");
  EFL_CHECK(z_t.value().ndim() == 3 && z_t.shape()[0] == cfg_.latent_channels, Errc::shape_mismatch,
            "latent must be [" + std::to_string(cfg_.latent_channels) + ",h,w], got " + z_t.value().shape_str());
  EFL_CHECK(z_t.shape()[1] % 2 == 0 && z_t.shape()[2] % 2 == 0, Errc::shape_mismatch, "latent size must be even");
  EFL_CHECK(c.cols() == cfg_.cond_dim, Errc::shape_mismatch, "conditioning width must be " + std::to_string(cfg_.cond_dim));
  EFL_CHECK(t >= 0 && t < cfg_.T, Errc::invalid_argument, "timestep " + std::to_string(t) + " out of range");
  const Var temb = time_embedding(t);
  Var h0 = conv_in(concat_rows({z_t, z_input}));
  h0 = attn_block(attn0, res_block(res0, h0, temb), c, valid_rows);
  Var h1 = attn_block(attn1, res_block(res1, down(h0), temb), c, valid_rows);
  Var h2 = up(upsample2x(h1));
  h2 = attn_block(attn2, res_block(res2, concat_rows({h2, h0}), temb), c, valid_rows);
  Var out = conv_out(silu(norm_out(h2)));
  if (cfg_.noise_skip) out = add(out, mul_channel(scale(z_t, skip_coef_[static_cast<std::size_t>(t)]), skip_gate));
  if (!out.value().all_finite()) throw Error(Errc::numeric, "UNet produced non-finite values");
  return out;
}

Tensor UNet::predict(const Tensor& z_t, const Tensor& z_input, int t, const Tensor& c) const {
  NoGradGuard guard;
  return predict(Var(z_t), Var(z_input), t, Var(c)).value();
}

ParamList UNet::params() const {
  ParamList out;
  time1.collect(out, "time1");
  time2.collect(out, "time2");
  conv_in.collect(out, "conv_in");
  collect_res(res0, out, "res0");
  collect_attn(attn0, out, "attn0");
  down.collect(out, "down");
  collect_res(res1, out, "res1");
  collect_attn(attn1, out, "attn1");
  up.collect(out, "up");
  collect_res(res2, out, "res2");
  collect_attn(attn2, out, "attn2");
  norm_out.collect(out, "norm_out");
  conv_out.collect(out, "conv_out");
  if (cfg_.noise_skip) out.push_back({"skip_gate", skip_gate});
  return out;
}

// ---- dropout and guidance ----

void DropoutPolicy::validate() const {
  EFL_CHECK(p_img_only >= 0 && p_cond_only >= 0 && p_both >= 0, Errc::config, "dropout probabilities must be >= 0");
  EFL_CHECK(p_img_only + p_cond_only + p_both <= 1.0 + 1e-12, Errc::config, "dropout probabilities exceed 1");
}

std::string to_string(DropoutCase c) {
  switch (c) {
    case DropoutCase::keep: return "keep";
    case DropoutCase::img_only_null: return "img_only_null";
    case DropoutCase::cond_only_null: return "cond_only_null";
    case DropoutCase::both_null: return "both_null";
  }
  return "?";
}

DropoutCase sample_dropout(const DropoutPolicy& p, Rng& rng) {
  const double u = rng.uniform();
  if (u < p.p_img_only) return DropoutCase::img_only_null;
  if (u < p.p_img_only + p.p_cond_only) return DropoutCase::cond_only_null;
  if (u < p.p_img_only + p.p_cond_only + p.p_both) return DropoutCase::both_null;
  return DropoutCase::keep;
}

Tensor cfg_combine(const Tensor& e_null, const Tensor& e_image, const Tensor& e_full, const GuidanceScales& s) {
  EFL_CHECK(e_null.same_shape(e_image) && e_null.same_shape(e_full), Errc::shape_mismatch,
            "guidance terms must share a shape");
  // Same linear combination, grouped per term so unit scales reproduce
  // e_full exactly and s_c = 0 drops it exactly.
  const double a = 1.0 - s.s_x, b = s.s_x - s.s_c, c = s.s_c;
  Tensor out(e_null.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * e_null[i] + b * e_image[i] + c * e_full[i];
  return out;
}

Tensor cfg_score(const UNet& unet, const Tensor& z_t, const Tensor& z_input, int t, const Tensor& c,
                 const Tensor& c_null, const GuidanceScales& s) {
  const Tensor zero_input(z_input.shape());
  const Tensor e_null = unet.predict(z_t, zero_input, t, c_null);
  const Tensor e_image = unet.predict(z_t, z_input, t, c_null);
  const Tensor e_full = unet.predict(z_t, z_input, t, c);
  return cfg_combine(e_null, e_image, e_full, s);
}

// ---- training ----

LdmTrainer::LdmTrainer(UNet& unet, cond::Conditioner& conditioner, const NoiseSchedule& schedule, LdmTrainConfig cfg,
                       Autoencoder* ae)
    : unet_(unet),
      cond_(conditioner),
      ae_(ae),
      schedule_(schedule),
      cfg_(cfg),
      opt_(
          [&] {
            ParamList p = unet.params();
            for (auto& q : conditioner.trainable_params()) p.push_back({"cond." + q.name, q.var});
            if (cfg.finetune_autoencoder && ae != nullptr)
              for (auto& q : ae->params()) p.push_back({"ae." + q.name, q.var});
            return p;
          }(),
          AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay, cfg.clip_norm}) {
  cfg_.dropout.validate();
  EFL_CHECK(unet.config().T == schedule_.T, Errc::config, "UNet and training schedule disagree on T");
  EFL_CHECK(!cfg_.finetune_autoencoder || ae_ != nullptr, Errc::config,
            "finetune_autoencoder needs the autoencoder");
}

Var LdmTrainer::batch_loss(const std::vector<TrainItem>& batch, long step, StepReport* report) const {
  EFL_CHECK(!batch.empty(), Errc::invalid_argument, "empty batch");
  const Rng base = Rng(cfg_.seed).derive(static_cast<std::uint64_t>(step));
  std::optional<Var> null_c;
  std::vector<Var> losses;
  for (const auto& item : batch) {
    Rng r = base.derive(item.key);
    const DropoutCase dc = sample_dropout(cfg_.dropout, r);
    const int t = static_cast<int>(r.index(static_cast<std::size_t>(schedule_.T)));
    const bool can_flip = cfg_.finetune_autoencoder || (item.z_input_flip && item.z_target_flip);
    const bool flip = cfg_.hflip && can_flip && r.uniform() < 0.5;
    const std::vector<int> shape =
        cfg_.finetune_autoencoder
            ? std::vector<int>{ae_->config().latent_channels, ae_->config().latent_size(), ae_->config().latent_size()}
            : item.z_target.shape();
    const Tensor noise = standard_normal(shape, r);
    const bool drop_image = dc == DropoutCase::img_only_null || dc == DropoutCase::both_null;
    const bool drop_cond = dc == DropoutCase::cond_only_null || dc == DropoutCase::both_null;
    Var z0, z_in;
    if (cfg_.finetune_autoencoder) {
      EFL_CHECK(item.x_image && item.y_image, Errc::invalid_argument,
                "autoencoder finetuning needs pixel frames for " + item.key);
      auto enc = [&](const Image& img) {
        return scale(ae_->encode_raw(Var(flip ? hflip(img) : img)), ae_->latent_scale);
      };
      z0 = enc(*item.y_image);
      z_in = drop_image ? Var(Tensor(shape)) : enc(*item.x_image);
    } else {
      z0 = Var(flip ? *item.z_target_flip : item.z_target);
      z_in = Var(drop_image ? Tensor(item.z_input.shape()) : (flip ? *item.z_input_flip : item.z_input));
    }
    Var c;
    if (drop_cond) {
      if (!null_c) null_c = cond_.null_conditioning(cfg_.mode).matrix;
      c = *null_c;
    } else {
      c = cond_.assemble(item.text, item.h_i, item.h_t, cfg_.mode).matrix;
    }
    const Var pred = unet_.predict(forward_diffuse(z0, t, noise, schedule_), z_in, t, c);
    losses.push_back(mse_loss(pred, noise));
    if (report != nullptr) {
      report->cases.push_back(dc);
      report->timesteps.push_back(t);
    }
  }
  return scale(add_n(losses), 1.0 / static_cast<double>(batch.size()));
}

StepReport LdmTrainer::train_step(const std::vector<TrainItem>& batch) {
  StepReport rep;
  if (cfg_.cosine) opt_.config().lr = cosine_lr(cfg_.lr, step_, cfg_.steps, cfg_.warmup);
  const Var loss = batch_loss(batch, step_, &rep);
  rep.loss = loss.item();
  if (!std::isfinite(rep.loss)) throw Error(Errc::training_diverged, "diffusion loss is not finite");
  backward(loss);
  opt_.step();
  ++step_;
  return rep;
}

double LdmTrainer::loss_only(const std::vector<TrainItem>& batch, long step) const {
  NoGradGuard guard;
  return batch_loss(batch, step, nullptr).item();
}

// ---- sampling ----

Tensor reverse_diffuse(const NoiseSchedule& schedule, const std::vector<int>& shape, const NoisePredictor& eps,
                       const SampleConfig& cfg, Rng& rng) {
  const std::vector<int> ts = schedule.inference_timesteps(cfg.steps);
  Tensor z = standard_normal(shape, rng);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const double ab = schedule.alpha_bars[static_cast<std::size_t>(t)];
    const double ab_prev = i + 1 < ts.size() ? schedule.alpha_bars[static_cast<std::size_t>(ts[i + 1])] : 1.0;
    const Tensor e = eps(z, t);
    double sigma = 0.0;
    if (cfg.ancestral && i + 1 < ts.size()) sigma = std::sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev));
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    for (std::size_t k = 0; k < z.size(); ++k) {
      const double x0 = (z[k] - std::sqrt(1.0 - ab) * e[k]) / std::sqrt(ab);
      z[k] = std::sqrt(ab_prev) * x0 + dir * e[k];
    }
    if (sigma > 0.0)
      for (auto& v : z.storage()) v += sigma * rng.normal();
    EFL_CHECK(z.all_finite(), Errc::numeric, "sampler produced non-finite latents");
  }
  return z;
}

Tensor sample_latent(const UNet& unet, const NoiseSchedule& schedule, const Tensor& z_input, const Tensor& c,
                     const Tensor& c_null, const SampleConfig& cfg, Rng& rng) {
  return reverse_diffuse(
      schedule, z_input.shape(),
      [&](const Tensor& z, int t) { return cfg_score(unet, z, z_input, t, c, c_null, cfg.scales); }, cfg, rng);
}

std::string sidecar_line(const SidecarRecord& r) {
  nlohmann::ordered_json j;
  j["key"] = r.key;
  j["seed"] = r.seed;
  j["steps"] = r.steps;
  j["s_x"] = r.s_x;
  j["s_c"] = r.s_c;
  j["conditioning_mode"] = r.conditioning_mode;
  return j.dump();
}

// ---- bundle ----

LdmBundle::LdmBundle(AutoencoderConfig a, UNetConfig u, cond::CondConfig c, cond::ConditioningMode m)
    : ae_cfg(a), unet_cfg(u), cond_cfg(c), mode(m), ae(a), unet(u), conditioner(c) {
  EFL_CHECK(u.cond_dim == c.d_model, Errc::config, "UNet cond_dim must equal the conditioning width");
  EFL_CHECK(u.latent_channels == a.latent_channels, Errc::config, "UNet and autoencoder latent channels differ");
}

namespace {

ParamList bundle_params(const LdmBundle& b) {
  ParamList out;
  for (auto& p : b.ae.params()) out.push_back({"ae." + p.name, p.var});
  for (auto& p : b.unet.params()) out.push_back({"unet." + p.name, p.var});
  for (auto& p : b.conditioner.all_params()) out.push_back({"cond." + p.name, p.var});
  return out;
}

}  // namespace

void LdmBundle::save(const std::filesystem::path& path) const {
  const nlohmann::json cfg = {{"autoencoder", ae_cfg.to_json()},
                              {"unet", unet_cfg.to_json()},
                              {"conditioning", cond_cfg.to_json()},
                              {"conditioning_mode", cond::to_string(mode)},
                              {"latent_scale", ae.latent_scale}};
  save_checkpoint(path, "ldm", cfg, bundle_params(*this));
}

LdmBundle LdmBundle::load(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  EFL_CHECK(ck.kind == "ldm", Errc::invalid_argument, "checkpoint kind is '" + ck.kind + "', expected 'ldm'");
  LdmBundle b(AutoencoderConfig::from_json(ck.config.at("autoencoder")), UNetConfig::from_json(ck.config.at("unet")),
              cond::CondConfig::from_json(ck.config.at("conditioning")),
              cond::parse_mode(ck.config.at("conditioning_mode").get<std::string>()));
  restore_params(ck, bundle_params(b));
  b.ae.latent_scale = ck.config.at("latent_scale");
  return b;
}

}  // namespace efl::ldm
