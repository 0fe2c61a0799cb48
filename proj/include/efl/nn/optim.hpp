#pragma once

#include "efl/nn/layers.hpp"

#include <vector>

namespace efl::nn {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables global-norm clipping
};

// Decoupled-weight-decay Adam over a fixed parameter list.
class AdamW {
 public:
  AdamW(ParamList params, AdamWConfig config);

  // Applies one update from accumulated grads, then zeroes them.
  // Returns the pre-clip global gradient norm.
  double step();
  void zero_grad() const { zero_grads(params_); }

  const ParamList& params() const { return params_; }
  AdamWConfig& config() { return config_; }
  long steps_taken() const { return t_; }

 private:
  ParamList params_;
  AdamWConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  long t_ = 0;
};

double cosine_lr(double base, long step, long total, long warmup);

}  // namespace efl::nn
