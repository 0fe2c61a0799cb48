#include <doctest.h>

#include "efl/error.hpp"
#include "efl/ldm/diffusion.hpp"
#include "support/gradcheck.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <filesystem>

using namespace efl;
using namespace efl::ldm;
using nn::Tensor;
using nn::Var;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double sd = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = sd * rng.normal();
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

UNetConfig tiny_unet() {
  UNetConfig c;
  c.base = 16;
  c.time_dim = 32;
  c.cond_dim = 8;
  c.groups = 4;
  c.seed = 5;
  return c;
}

// Gives the zero-initialised head a nonzero map so gradients reach every layer.
void wake_head(UNet& u, Rng& rng) {
  for (auto& v : u.conv_out.weight.mutable_value().storage()) v = 0.05 * rng.normal();
  for (auto& v : u.skip_gate.mutable_value().storage()) v = 0.5 + 0.1 * rng.normal();
}

// softmax(Q K^T / sqrt(d)) V with explicit loops.
Eigen::MatrixXd reference_attention(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k, const Eigen::MatrixXd& v,
                                    int valid) {
  const int n = static_cast<int>(k.rows());
  const int keys = valid < 0 ? n : valid;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(q.rows(), v.cols());
  for (int i = 0; i < q.rows(); ++i) {
    std::vector<double> s(static_cast<std::size_t>(keys));
    double mx = -1e300;
    for (int j = 0; j < keys; ++j) {
      double dot = 0.0;
      for (int c = 0; c < q.cols(); ++c) dot += q(i, c) * k(j, c);
      s[j] = dot / std::sqrt(static_cast<double>(q.cols()));
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (double& e : s) z += (e = std::exp(e - mx));
    for (int j = 0; j < keys; ++j) out.row(i) += (s[j] / z) * v.row(j);
  }
  return out;
}

Eigen::MatrixXd as_matrix(const Tensor& t) { return t.matrix(); }

}  // namespace

TEST_CASE("linear schedule values and ordering") {
  const auto s = NoiseSchedule::linear();
  CHECK(s.T == 1000);
  CHECK(s.betas.front() == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(s.betas.back() == doctest::Approx(0.02).epsilon(1e-12));
  CHECK(s.alpha_bars[0] == doctest::Approx(1.0 - 1e-4).epsilon(1e-14));
  const double beta1 = 1e-4 + (0.02 - 1e-4) / 999.0;
  CHECK(s.alpha_bars[1] == doctest::Approx((1.0 - 1e-4) * (1.0 - beta1)).epsilon(1e-14));
  double log_ab = 0.0;
  for (int t = 0; t < 1000; ++t) log_ab += std::log1p(-(1e-4 + (0.02 - 1e-4) * t / 999.0));
  CHECK(s.alpha_bars.back() == doctest::Approx(std::exp(log_ab)).epsilon(1e-10));
  CHECK(s.alpha_bars.back() < 1e-4);
  for (int t = 1; t < s.T; ++t) {
    CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
    CHECK(s.betas[t] >= s.betas[t - 1]);
  }
  CHECK_THROWS_AS(NoiseSchedule::linear(1000, 1e-4, 1e-3), Error);  // never gets near zero
}

TEST_CASE("inference timesteps") {
  const auto s = NoiseSchedule::linear();
  const auto ts = s.inference_timesteps(100);
  REQUIRE(ts.size() == 100);
  CHECK(ts.front() == 999);
  CHECK(ts.back() == 0);
  for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
  CHECK(s.inference_timesteps(1) == std::vector<int>{999});
  CHECK(s.inference_timesteps(2) == std::vector<int>{999, 0});
  CHECK(s.inference_timesteps(1000).size() == 1000);
  CHECK_THROWS_AS(s.inference_timesteps(0), Error);
  CHECK_THROWS_AS(s.inference_timesteps(1001), Error);
}

TEST_CASE("forward diffusion") {
  const auto s = NoiseSchedule::linear();
  Rng rng(1);
  const Tensor z0 = random_tensor({4, 2, 2}, rng);
  const Tensor n = random_tensor({4, 2, 2}, rng);
  const Tensor z = forward_diffuse(z0, 500, n, s);
  const double a = std::sqrt(s.alpha_bars[500]), b = std::sqrt(1.0 - s.alpha_bars[500]);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] == doctest::Approx(a * z0[i] + b * n[i]).epsilon(1e-14));
  const Var zv = forward_diffuse(Var(z0), 500, n, s);
  CHECK(max_abs_diff(zv.value(), z) < 1e-15);
  CHECK_THROWS_AS(forward_diffuse(z0, 1000, n, s), Error);
  CHECK_THROWS_AS(forward_diffuse(z0, -1, n, s), Error);
  CHECK_THROWS_AS(forward_diffuse(z0, 3, Tensor({4, 2, 3}), s), Error);
}

TEST_CASE("forward diffusion endpoints and scaling") {
  const auto s = NoiseSchedule::linear();
  Rng rng(21);
  Tensor z0({4, 16, 16}), n({4, 16, 16});
  for (auto& v : z0.storage()) v = 2.0 * rng.uniform() - 1.0;
  for (auto& v : n.storage()) v = std::clamp(rng.normal(), -1.9, 1.9);
  CHECK(max_abs_diff(forward_diffuse(z0, 0, n, s), z0) < 0.02);
  const Tensor zero({4, 16, 16});
  Tensor z2 = z0;
  for (auto& v : z2.storage()) v *= 2.0;
  const Tensor a = forward_diffuse(z2, 300, zero, s);
  const Tensor b = forward_diffuse(z0, 300, zero, s);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(2.0 * b[i]).epsilon(1e-14));
}

TEST_CASE("forward diffusion preserves the expected energy") {
  const auto s = NoiseSchedule::linear();
  Rng rng(22);
  const int dim = 64, reps = 2000;
  for (int t : {0, 100, 500, 999}) {
    double acc = 0.0, z0_energy = 0.0;
    for (int r = 0; r < reps; ++r) {
      Tensor z0({dim});
      for (auto& v : z0.storage()) v = 2.0 * rng.normal();
      const Tensor z = forward_diffuse(z0, t, standard_normal({dim}, rng), s);
      acc += z.matrix().squaredNorm();
      z0_energy += z0.matrix().squaredNorm();
    }
    const double expect = s.alpha_bars[t] * z0_energy / reps + (1.0 - s.alpha_bars[t]) * dim;
    INFO(t);
    CHECK(std::abs(acc / reps - expect) < 0.05 * expect);
  }
}

TEST_CASE("terminal marginal is close to a standard normal") {
  const auto s = NoiseSchedule::linear();
  Rng rng(2);
  const int n = 10000;
  Tensor z0({n});
  for (auto& v : z0.storage()) v = 3.0 * rng.uniform() - 1.0;
  const Tensor z = forward_diffuse(z0, s.T - 1, standard_normal({n}, rng), s);
  double mean = 0.0, sq = 0.0;
  for (double v : z.storage()) {
    mean += v;
    sq += v * v;
  }
  mean /= n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("attention on a toy case") {
  // D = 1, one query [1], keys [1] and [-1], values [2] and [0].
  Tensor q({1, 1}, 1.0), k({2, 1}), v({2, 1});
  k.at(0, 0) = 1.0;
  k.at(1, 0) = -1.0;
  v.at(0, 0) = 2.0;
  Tensor w;
  const Var out = attention(Var(q), Var(k), Var(v), -1, &w);
  const double e = std::exp(1.0);
  CHECK(out.value()[0] == doctest::Approx(2.0 * e / (e + 1.0 / e)).epsilon(1e-14));
  CHECK(out.value()[0] == doctest::Approx(1.7616).epsilon(1e-4));
  CHECK(w.at(0, 0) + w.at(0, 1) == doctest::Approx(1.0));

  // Keeping only the first key leaves its value.
  const Var masked = attention(Var(q), Var(k), Var(v), 1, &w);
  CHECK(masked.value()[0] == doctest::Approx(2.0));
  CHECK(w.at(0, 1) == 0.0);
  CHECK_THROWS_AS(attention(Var(q), Var(k), Var(v), 0), Error);
}

TEST_CASE("attention with one key returns its value for every query") {
  Rng rng(3);
  const Tensor q = random_tensor({7, 8}, rng);
  const Tensor k = random_tensor({1, 8}, rng);
  const Tensor v = random_tensor({1, 5}, rng);
  const Tensor out = attention(Var(q), Var(k), Var(v)).value();
  for (int i = 0; i < 7; ++i)
    for (int c = 0; c < 5; ++c) CHECK(out.at(i, c) == doctest::Approx(v.at(0, c)).epsilon(1e-14));
}

TEST_CASE("attention is invariant to a joint permutation of keys and values") {
  Rng rng(4);
  for (int rep = 0; rep < 10; ++rep) {
    const int n = 3 + static_cast<int>(rng.index(10));
    const Tensor q = random_tensor({5, 6}, rng);
    const Tensor k = random_tensor({n, 6}, rng);
    const Tensor v = random_tensor({n, 4}, rng);
    std::vector<int> perm(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    Tensor kp({n, 6}), vp({n, 4});
    for (int i = 0; i < n; ++i) {
      kp.matrix().row(i) = k.matrix().row(perm[i]);
      vp.matrix().row(i) = v.matrix().row(perm[i]);
    }
    Tensor w;
    const Tensor a = attention(Var(q), Var(k), Var(v), -1, &w).value();
    const Tensor b = attention(Var(q), Var(kp), Var(vp)).value();
    CHECK(max_abs_diff(a, b) < 1e-12);
    for (int i = 0; i < 5; ++i) {
      double sum = 0.0;
      for (int j = 0; j < n; ++j) {
        CHECK(w.at(i, j) >= 0.0);
        sum += w.at(i, j);
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("cross-attention matches an explicit oracle on random cases") {
  Rng rng(5);
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    const int u_dim = 2 + static_cast<int>(rng.index(12));
    const int d = 2 + static_cast<int>(rng.index(12));
    const int queries = 1 + static_cast<int>(rng.index(20));
    const int rows = 1 + static_cast<int>(rng.index(40));
    const int valid = rng.uniform() < 0.5 ? -1 : 1 + static_cast<int>(rng.index(static_cast<std::size_t>(rows)));
    Rng init = rng.derive(static_cast<std::uint64_t>(rep));
    const CrossAttentionParams p{nn::Linear(u_dim, d, init, nn::Init::xavier, false),
                                 nn::Linear(d, d, init, nn::Init::xavier, false),
                                 nn::Linear(d, d, init, nn::Init::xavier, false)};
    const Tensor u = random_tensor({queries, u_dim}, rng);
    const Tensor c = random_tensor({rows, d}, rng);
    const Tensor out = cross_attention(Var(u), Var(c), p, valid).value();
    const Eigen::MatrixXd q = as_matrix(u) * as_matrix(p.wq.weight.value());
    const Eigen::MatrixXd k = as_matrix(c) * as_matrix(p.wk.weight.value());
    const Eigen::MatrixXd v = as_matrix(c) * as_matrix(p.wv.weight.value());
    const Eigen::MatrixXd ref = reference_attention(q, k, v, valid);
    REQUIRE(out.shape() == std::vector<int>{queries, d});
    worst = std::max(worst, (out.matrix() - ref).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("cross-attention rejects mismatched widths") {
  Rng rng(6);
  const CrossAttentionParams p{nn::Linear(4, 8, rng, nn::Init::xavier, false),
                               nn::Linear(8, 8, rng, nn::Init::xavier, false),
                               nn::Linear(8, 8, rng, nn::Init::xavier, false)};
  CHECK_THROWS_AS(cross_attention(Var(Tensor({3, 5})), Var(Tensor({2, 8})), p), Error);
  CHECK_THROWS_AS(cross_attention(Var(Tensor({3, 4})), Var(Tensor({2, 7})), p), Error);
}

TEST_CASE("UNet output shape and zero-initialised head") {
  UNet u(UNetConfig{});
  Rng rng(7);
  const Tensor z = random_tensor({4, 16, 16}, rng);
  const Tensor zi = random_tensor({4, 16, 16}, rng);
  const Tensor c = random_tensor({80, 64}, rng);
  const Tensor e = u.predict(z, zi, 10, c);
  CHECK(e.shape() == std::vector<int>{4, 16, 16});
  CHECK(e.matrix().cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(u.predict(z, Tensor({4, 8, 8}), 10, c), Error);
  CHECK_THROWS_AS(u.predict(z, zi, 10, Tensor({80, 32})), Error);
  CHECK_THROWS_AS(u.predict(Tensor({3, 16, 16}), Tensor({3, 16, 16}), 10, c), Error);
}

TEST_CASE("UNet depends on conditioning, input latent and timestep") {
  UNet u(tiny_unet());
  Rng rng(8);
  wake_head(u, rng);
  const Tensor z = random_tensor({4, 8, 8}, rng);
  const Tensor zi = random_tensor({4, 8, 8}, rng);
  const Tensor c = random_tensor({6, 8}, rng);
  const Tensor base = u.predict(z, zi, 100, c);
  CHECK(max_abs_diff(base, u.predict(z, zi, 100, random_tensor({6, 8}, rng))) > 1e-6);
  CHECK(max_abs_diff(base, u.predict(z, Tensor({4, 8, 8}), 100, c)) > 1e-6);
  CHECK(max_abs_diff(base, u.predict(z, zi, 700, c)) > 1e-6);
  CHECK(bitwise_equal(base, u.predict(z, zi, 100, c)));
  // Different row counts are accepted.
  CHECK(u.predict(z, zi, 100, random_tensor({11, 8}, rng)).shape() == z.shape());
}

TEST_CASE("UNet ignores conditioning rows past valid_rows") {
  UNet u(tiny_unet());
  Rng rng(9);
  wake_head(u, rng);
  const Tensor z = random_tensor({4, 8, 8}, rng);
  const Tensor zi = random_tensor({4, 8, 8}, rng);
  Tensor c = random_tensor({6, 8}, rng);
  nn::NoGradGuard guard;
  const Tensor a = u.predict(Var(z), Var(zi), 50, Var(c), 4).value();
  for (int r = 4; r < 6; ++r)
    for (int k = 0; k < 8; ++k) c.at(r, k) = 100.0 * rng.normal();
  const Tensor b = u.predict(Var(z), Var(zi), 50, Var(c), 4).value();
  CHECK(max_abs_diff(a, b) == 0.0);
}

TEST_CASE("UNet gradients match finite differences") {
  UNet u(tiny_unet());
  Rng rng(10);
  wake_head(u, rng);
  const Tensor z = random_tensor({4, 4, 4}, rng);
  const Tensor zi = random_tensor({4, 4, 4}, rng);
  const Tensor c = random_tensor({5, 8}, rng);
  const Tensor probe = random_tensor({4, 4, 4}, rng);
  auto loss = [&] { return nn::sum(nn::mul(u.predict(Var(z), Var(zi), 321, Var(c)), Var(probe))); };
  const auto params = u.params();
  for (const char* name : {"time1.weight", "conv_in.weight", "res0.c1.weight", "res0.film_scale.weight",
                           "res0.n2.gamma", "attn0.wq.weight", "attn1.wk.weight", "attn1.wv.weight",
                           "attn2.out.weight", "down.weight", "up.bias", "res2.skip.weight", "norm_out.beta",
                           "conv_out.weight", "skip_gate"}) {
    INFO(std::string(name));
    const auto it = std::find_if(params.begin(), params.end(), [&](const nn::ParamRef& p) { return p.name == name; });
    REQUIRE(it != params.end());
    const auto r = testing::check_gradient(loss, it->var, 4, rng);
    CHECK(r.checked >= 3);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("conditioning gradients flow through the UNet") {
  UNet u(tiny_unet());
  Rng rng(11);
  wake_head(u, rng);
  const Tensor z = random_tensor({4, 4, 4}, rng);
  const Var c(random_tensor({5, 8}, rng), true);
  const Tensor probe = random_tensor({4, 4, 4}, rng);
  auto loss = [&] { return nn::sum(nn::mul(u.predict(Var(z), Var(z), 77, c), Var(probe))); };
  const auto r = testing::check_gradient(loss, c, 5, rng);
  CHECK(r.checked >= 3);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("dropout case frequencies") {
  const DropoutPolicy p;
  Rng rng(12);
  const int n = 100000;
  int counts[4] = {0, 0, 0, 0};
  for (int i = 0; i < n; ++i) ++counts[static_cast<int>(sample_dropout(p, rng))];
  CHECK(std::abs(counts[0] / double(n) - 0.85) < 0.01);
  CHECK(std::abs(counts[1] / double(n) - 0.05) < 0.01);
  CHECK(std::abs(counts[2] / double(n) - 0.05) < 0.01);
  CHECK(std::abs(counts[3] / double(n) - 0.05) < 0.01);
  CHECK_THROWS_AS((DropoutPolicy{0.5, 0.4, 0.2}.validate()), Error);
  CHECK_THROWS_AS((DropoutPolicy{-0.1, 0.0, 0.0}.validate()), Error);
  CHECK(to_string(DropoutCase::cond_only_null) == "cond_only_null");
}

TEST_CASE("guidance combination") {
  const Tensor e_null({2, 1, 1}, 0.0), e_image({2, 1, 1}, 1.0), e_full({2, 1, 1}, 2.0);
  const Tensor g = cfg_combine(e_null, e_image, e_full, GuidanceScales{});
  CHECK(g[0] == doctest::Approx(9.0).epsilon(1e-15));

  Rng rng(13);
  const Tensor a = random_tensor({4, 3, 3}, rng), b = random_tensor({4, 3, 3}, rng), c = random_tensor({4, 3, 3}, rng);
  for (int rep = 0; rep < 20; ++rep) {
    const GuidanceScales s{10.0 * rng.uniform(), 5.0 * rng.uniform()};
    const Tensor out = cfg_combine(a, b, c, s);
    for (std::size_t i = 0; i < out.size(); ++i)
      CHECK(out[i] == doctest::Approx(a[i] + s.s_x * (b[i] - a[i]) + s.s_c * (c[i] - b[i])).epsilon(1e-12));
  }
  CHECK(bitwise_equal(cfg_combine(a, b, c, {1.0, 1.0}), c));
  CHECK(bitwise_equal(cfg_combine(a, b, c, {3.0, 0.0}), cfg_combine(a, b, random_tensor({4, 3, 3}, rng), {3.0, 0.0})));
  CHECK_THROWS_AS(cfg_combine(a, b, Tensor({4, 3, 2}), GuidanceScales{}), Error);
}

TEST_CASE("guided score ignores conditioning when s_c is zero") {
  UNet u(tiny_unet());
  Rng rng(14);
  wake_head(u, rng);
  const Tensor z = random_tensor({4, 4, 4}, rng), zi = random_tensor({4, 4, 4}, rng);
  const Tensor c1 = random_tensor({5, 8}, rng), c2 = random_tensor({5, 8}, rng), cn = random_tensor({5, 8}, rng);
  CHECK(bitwise_equal(cfg_score(u, z, zi, 40, c1, cn, {2.0, 0.0}), cfg_score(u, z, zi, 40, c2, cn, {2.0, 0.0})));
  CHECK(bitwise_equal(cfg_score(u, z, zi, 40, c1, cn, {1.0, 1.0}), u.predict(z, zi, 40, c1)));
  CHECK(max_abs_diff(cfg_score(u, z, zi, 40, c1, cn, {2.0, 1.5}), cfg_score(u, z, zi, 40, c2, cn, {2.0, 1.5})) > 1e-8);
}

TEST_CASE("sampling is deterministic per seed") {
  UNet u(tiny_unet());
  Rng rng(15);
  wake_head(u, rng);
  const auto s = NoiseSchedule::linear();
  const Tensor zi = random_tensor({4, 4, 4}, rng);
  const Tensor c = random_tensor({5, 8}, rng), cn = random_tensor({5, 8}, rng);
  SampleConfig sc;
  sc.steps = 5;
  Rng r1(99), r2(99), r3(100);
  const Tensor a = sample_latent(u, s, zi, c, cn, sc, r1);
  const Tensor b = sample_latent(u, s, zi, c, cn, sc, r2);
  const Tensor d = sample_latent(u, s, zi, c, cn, sc, r3);
  CHECK(bitwise_equal(a, b));
  CHECK(max_abs_diff(a, d) > 1e-6);
  CHECK(a.all_finite());
  sc.ancestral = true;
  Rng r4(99), r5(99);
  CHECK(bitwise_equal(sample_latent(u, s, zi, c, cn, sc, r4), sample_latent(u, s, zi, c, cn, sc, r5)));
}

TEST_CASE("a perfect noise predictor recovers the clean latent in one step") {
  // With e equal to the true noise, the DDIM update at the last step returns z0.
  UNet u(tiny_unet());
  const auto s = NoiseSchedule::linear();
  Rng rng(16);
  const Tensor z0 = random_tensor({4, 4, 4}, rng);
  const Tensor n = random_tensor({4, 4, 4}, rng);
  const int t = 400;
  const Tensor zt = forward_diffuse(z0, t, n, s);
  const double ab = s.alpha_bars[t];
  for (std::size_t i = 0; i < zt.size(); ++i)
    CHECK((zt[i] - std::sqrt(1.0 - ab) * n[i]) / std::sqrt(ab) == doctest::Approx(z0[i]).epsilon(1e-12));
  CHECK(nn::mse_loss(Var(n), n).item() == 0.0);
}

TEST_CASE("trainer draws and updates deterministically") {
  const auto s = NoiseSchedule::linear();
  cond::CondConfig cc;
  cc.d_model = 8;
  cc.d_llm = 8;
  cc.text_tokens = 4;
  cc.image_tokens = 2;
  Rng rng(17);
  std::vector<TrainItem> batch;
  for (int i = 0; i < 3; ++i) {
    TrainItem it;
    it.key = "k" + std::to_string(i);
    it.z_input = random_tensor({4, 4, 4}, rng);
    it.z_target = random_tensor({4, 4, 4}, rng);
    it.text = "hand moves cup";
    batch.push_back(it);
  }
  LdmTrainConfig tc;
  tc.mode = cond::ConditioningMode::descriptions;
  tc.lr = 1e-3;
  tc.seed = 4;

  // The zero head predicts 0, so the loss is the mean squared drawn noise.
  {
    UNet u(tiny_unet());
    cond::Conditioner cn(cc);
    LdmTrainer tr(u, cn, s, tc);
    double expect = 0.0;
    for (const auto& it : batch) {
      Rng r = Rng(tc.seed).derive(std::uint64_t{7}).derive(it.key);
      (void)sample_dropout(tc.dropout, r);
      (void)r.index(1000);
      const Tensor n = standard_normal({4, 4, 4}, r);
      expect += n.matrix().squaredNorm() / 64.0;
    }
    CHECK(tr.loss_only(batch, 7) == doctest::Approx(expect / 3.0).epsilon(1e-12));
  }

  UNet u1(tiny_unet()), u2(tiny_unet());
  cond::Conditioner c1(cc), c2(cc);
  LdmTrainer t1(u1, c1, s, tc), t2(u2, c2, s, tc);
  const auto psi_before = nn::param_digest(c1.frozen_params());
  for (int k = 0; k < 3; ++k) {
    const auto r1 = t1.train_step(batch);
    const auto r2 = t2.train_step(batch);
    CHECK(r1.loss == r2.loss);
    CHECK(r1.timesteps == r2.timesteps);
    CHECK(r1.cases.size() == 3);
  }
  CHECK(t1.steps() == 3);
  CHECK(nn::param_digest(u1.params()) == nn::param_digest(u2.params()));
  CHECK(nn::param_digest(c1.trainable_params()) == nn::param_digest(c2.trainable_params()));
  CHECK(nn::param_digest(c1.frozen_params()) == psi_before);
  CHECK(nn::param_digest(u1.params()) != nn::param_digest(UNet(tiny_unet()).params()));
}

TEST_CASE("trainer rejects non-finite loss") {
  const auto s = NoiseSchedule::linear();
  cond::CondConfig cc;
  cc.d_model = 8;
  cc.d_llm = 8;
  cc.text_tokens = 4;
  UNet u(tiny_unet());
  Rng rng(18);
  wake_head(u, rng);
  cond::Conditioner cn(cc);
  LdmTrainConfig tc;
  tc.mode = cond::ConditioningMode::descriptions;
  LdmTrainer tr(u, cn, s, tc);
  TrainItem it;
  it.key = "bad";
  it.z_input = Tensor({4, 4, 4}, std::nan(""));
  it.z_target = random_tensor({4, 4, 4}, rng);
  it.text = "x";
  try {
    tr.train_step({it});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK((e.code() == Errc::training_diverged || e.code() == Errc::numeric));
  }
}

TEST_CASE("autoencoder shapes and determinism") {
  Autoencoder ae(AutoencoderConfig{});
  Rng rng(19);
  Image img({3, 64, 64});
  for (auto& v : img.storage()) v = rng.uniform();
  const Tensor z = ae.encode_latent(img);
  CHECK(z.shape() == std::vector<int>{4, 16, 16});
  CHECK(bitwise_equal(z, ae.encode_latent(img)));
  const Image back = ae.decode_latent(z);
  CHECK(back.shape() == std::vector<int>{3, 64, 64});
  CHECK(back.matrix().minCoeff() >= 0.0);
  CHECK(back.matrix().maxCoeff() <= 1.0);
  CHECK_THROWS_AS(ae.encode_latent(Image({3, 32, 32})), Error);
  CHECK_THROWS_AS(ae.decode_latent(Tensor({4, 8, 8})), Error);

  std::vector<Image> set{img};
  ae.fit_latent_scale(set);
  const Tensor zs = ae.encode_latent(img);
  double mean = 0.0, sq = 0.0;
  for (double v : zs.storage()) {
    mean += v;
    sq += v * v;
  }
  mean /= zs.size();
  CHECK(sq / zs.size() - mean * mean == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("autoencoder training reduces reconstruction error") {
  Autoencoder ae(AutoencoderConfig{});
  std::vector<Image> imgs;
  for (int i = 0; i < 2; ++i) {
    Image im({3, 64, 64});
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) im.storage()[(c * 64 + y) * 64 + x] = 0.5 + 0.4 * std::sin(0.2 * (x + i * y) + c);
    imgs.push_back(im);
  }
  auto err = [&] {
    double e = 0.0;
    for (const auto& im : imgs) e += nn::mse_loss(ae.decode_raw(ae.encode_raw(Var(im))), im).item();
    return e;
  };
  const double before = err();
  AutoencoderTrainConfig tc;
  tc.steps = 30;
  tc.batch_size = 2;
  ae.train(imgs, tc);
  CHECK(err() < 0.5 * before);
  CHECK(ae.latent_scale > 0.0);
}

TEST_CASE("sidecar line format") {
  const SidecarRecord r{"ego4d:v1:0001", 42, 100, 7.5, 1.5, "desc_plus_joint"};
  CHECK(sidecar_line(r) ==
        R"({"key":"ego4d:v1:0001","seed":42,"steps":100,"s_x":7.5,"s_c":1.5,"conditioning_mode":"desc_plus_joint"})");
}

TEST_CASE("bundle checkpoint round trip") {
  AutoencoderConfig ac;
  ac.width = 16;
  UNetConfig uc = tiny_unet();
  cond::CondConfig cc;
  cc.d_model = 8;
  cc.d_llm = 8;
  cc.text_tokens = 4;
  cc.image_tokens = 2;
  LdmBundle b(ac, uc, cc, cond::ConditioningMode::desc_plus_image);
  Rng rng(20);
  wake_head(b.unet, rng);
  b.ae.latent_scale = 2.5;
  b.conditioner.set_pad_embedding(random_tensor({1, 8}, rng));
  const auto dir = std::filesystem::temp_directory_path() / "efl_test_ldm";
  std::filesystem::create_directories(dir);
  const auto path = dir / "ldm.ckpt";
  b.save(path);
  const LdmBundle l = LdmBundle::load(path);
  CHECK(l.mode == cond::ConditioningMode::desc_plus_image);
  CHECK(l.ae.latent_scale == 2.5);
  CHECK(l.unet_cfg.base == 16);
  CHECK(nn::param_digest(l.unet.params()) == nn::param_digest(b.unet.params()));
  CHECK(nn::param_digest(l.ae.params()) == nn::param_digest(b.ae.params()));
  CHECK(nn::param_digest(l.conditioner.all_params()) == nn::param_digest(b.conditioner.all_params()));
  const Tensor z = random_tensor({4, 4, 4}, rng), c = random_tensor({3, 8}, rng);
  CHECK(bitwise_equal(l.unet.predict(z, z, 5, c), b.unet.predict(z, z, 5, c)));
  CHECK_THROWS_AS(LdmBundle(ac, uc, cond::CondConfig{}, cond::ConditioningMode::descriptions), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("autoencoder finetuning is opt-in") {
  const auto s = NoiseSchedule::linear();
  AutoencoderConfig ac;
  ac.width = 8;
  Autoencoder ae(ac);
  UNet u(tiny_unet());
  Rng rng(23);
  wake_head(u, rng);
  cond::CondConfig cc;
  cc.d_model = 8;
  cc.d_llm = 8;
  cc.text_tokens = 4;
  cond::Conditioner cn(cc);
  TrainItem it;
  it.key = "a";
  it.text = "x";
  Image x({3, 64, 64}), y({3, 64, 64});
  for (auto& v : x.storage()) v = rng.uniform();
  for (auto& v : y.storage()) v = rng.uniform();
  it.x_image = x;
  it.y_image = y;
  it.z_input = ae.encode_latent(x);
  it.z_target = ae.encode_latent(y);
  LdmTrainConfig tc;
  tc.mode = cond::ConditioningMode::descriptions;
  tc.lr = 1e-2;
  tc.hflip = false;

  const auto before = nn::param_digest(ae.params());
  {
    LdmTrainer frozen(u, cn, s, tc, &ae);
    frozen.train_step({it});
    CHECK(nn::param_digest(ae.params()) == before);
  }
  tc.finetune_autoencoder = true;
  CHECK_THROWS_AS(LdmTrainer(u, cn, s, tc), Error);
  LdmTrainer tuned(u, cn, s, tc, &ae);
  tuned.train_step({it});
  CHECK(nn::param_digest(ae.params()) != before);
  TrainItem latent_only = it;
  latent_only.x_image.reset();
  CHECK_THROWS_AS(tuned.train_step({latent_only}), Error);
}

TEST_CASE("reverse process with the exact noise returns the clean latent") {
  const auto s = NoiseSchedule::linear();
  Rng rng(24);
  const Tensor z0 = random_tensor({4, 4, 4}, rng);
  // Given z_t, the noise consistent with z0 is (z_t - sqrt(ab) z0) / sqrt(1 - ab).
  auto oracle = [&](const Tensor& z, int t) {
    const double ab = s.alpha_bars[t];
    Tensor e(z.shape());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = (z[i] - std::sqrt(ab) * z0[i]) / std::sqrt(1.0 - ab);
    return e;
  };
  for (int steps : {1, 10, 100}) {
    SampleConfig sc;
    sc.steps = steps;
    Rng r(3);
    CHECK(max_abs_diff(reverse_diffuse(s, {4, 4, 4}, oracle, sc, r), z0) < 1e-9);
  }
  SampleConfig anc;
  anc.ancestral = true;
  Rng r(4);
  CHECK(max_abs_diff(reverse_diffuse(s, {4, 4, 4}, oracle, anc, r), z0) < 1e-9);
}
