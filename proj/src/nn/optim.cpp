#include "efl/nn/optim.hpp"

#include "efl/error.hpp"

#include <cmath>
#include <numbers>

namespace efl::nn {

AdamW::AdamW(ParamList params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros_like(p.var.value()));
    v_.push_back(Tensor::zeros_like(p.var.value()));
  }
}

double AdamW::step() {
  ++t_;
  double sq = 0.0;
  for (const auto& p : params_) {
    for (double g : p.var.grad().storage()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  EFL_CHECK(std::isfinite(norm), Errc::training_diverged, "non-finite gradient norm");
  const double clip = (config_.clip_norm > 0 && norm > config_.clip_norm) ? config_.clip_norm / norm : 1.0;

  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Var var = params_[k].var;
    const Tensor& g = var.grad();
    if (g.empty()) continue;
    Tensor& w = var.mutable_value();
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= config_.lr * (mhat / (std::sqrt(vhat) + config_.eps) + config_.weight_decay * w[i]);
    }
  }
  zero_grads(params_);
  return norm;
}

double cosine_lr(double base, long step, long total, long warmup) {
  if (warmup > 0 && step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup) return base;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
}

}  // namespace efl::nn
