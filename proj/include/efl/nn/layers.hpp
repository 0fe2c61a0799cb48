#pragma once

#include "efl/nn/ops.hpp"
#include "efl/rng.hpp"

#include <string>
#include <vector>

namespace efl::nn {

struct ParamRef {
  std::string name;
  Var var;
};
using ParamList = std::vector<ParamRef>;

Var parameter(Tensor init);

enum class Init { xavier, fan_in, normal_002, zeros };

Tensor init_tensor(std::vector<int> shape, int fan_in, int fan_out, Init init, Rng& rng);

void zero_grads(const ParamList& params);
std::size_t param_count(const ParamList& params);
// Order-sensitive digest of parameter values; used to assert freeze contracts.
std::uint64_t param_digest(const ParamList& params);

// y = x·W + b, W stored [in, out].
struct Linear {
  Var weight;
  Var bias;

  Linear() = default;
  Linear(int in, int out, Rng& rng, Init init = Init::xavier, bool with_bias = true);

  int in_features() const { return weight.rows(); }
  int out_features() const { return weight.cols(); }
  Var operator()(const Var& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct Conv2d {
  Var weight;  // [out, in*k*k]
  Var bias;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride, Rng& rng, Init init = Init::fan_in);

  Var operator()(const Var& x) const { return conv2d(x, weight, bias, kernel, stride, pad); }
  void collect(ParamList& out, const std::string& prefix) const;
};

struct LayerNorm {
  Var gamma;
  Var beta;

  LayerNorm() = default;
  explicit LayerNorm(int dim);
  Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }
  void collect(ParamList& out, const std::string& prefix) const;
};

struct GroupNorm {
  Var gamma;
  Var beta;
  int groups = 8;

  GroupNorm() = default;
  GroupNorm(int channels, int groups);
  Var operator()(const Var& x) const { return group_norm(x, groups, gamma, beta); }
  void collect(ParamList& out, const std::string& prefix) const;
};

}  // namespace efl::nn
