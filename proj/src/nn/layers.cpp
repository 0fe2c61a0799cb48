#include "efl/nn/layers.hpp"

#include "efl/error.hpp"

#include <cmath>
#include <cstring>

namespace efl {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace efl

namespace efl::nn {

Var parameter(Tensor init) { return Var(std::move(init), true); }

Tensor init_tensor(std::vector<int> shape, int fan_in, int fan_out, Init init, Rng& rng) {
  Tensor t(std::move(shape));
  switch (init) {
    case Init::zeros:
      break;
    case Init::xavier: {
      const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (auto& v : t.storage()) v = rng.uniform(-a, a);
      break;
    }
    case Init::fan_in: {
      const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (auto& v : t.storage()) v = rng.uniform(-a, a);
      break;
    }
    case Init::normal_002:
      for (auto& v : t.storage()) v = 0.02 * rng.normal();
      break;
  }
  return t;
}

void zero_grads(const ParamList& params) {
  for (const auto& p : params) p.var.zero_grad();
}

std::size_t param_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.value().size();
  return n;
}

std::uint64_t param_digest(const ParamList& params) {
  std::uint64_t h = 0x12345678ULL;
  for (const auto& p : params) {
    h = splitmix64(h ^ fnv1a64(p.name));
    const auto& data = p.var.value().storage();
    h = splitmix64(h ^ fnv1a64(std::string_view(reinterpret_cast<const char*>(data.data()),
                                                 data.size() * sizeof(double))));
  }
  return h;
}

Linear::Linear(int in, int out, Rng& rng, Init init, bool with_bias)
    : weight(parameter(init_tensor({in, out}, in, out, init, rng))) {
  if (with_bias) bias = parameter(Tensor({out}));
}

Var Linear::operator()(const Var& x) const {
  Var y = matmul(x, weight);
  return bias.defined() ? add_bias(y, bias) : y;
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

Conv2d::Conv2d(int in, int out, int k, int s, Rng& rng, Init init)
    : weight(parameter(init_tensor({out, in * k * k}, in * k * k, out * k * k, init, rng))),
      bias(parameter(Tensor({out}))),
      kernel(k),
      stride(s),
      pad(k / 2) {}

void Conv2d::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(int dim) : gamma(parameter(Tensor({dim}, 1.0))), beta(parameter(Tensor({dim}))) {}

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

GroupNorm::GroupNorm(int channels, int g)
    : gamma(parameter(Tensor({channels}, 1.0))), beta(parameter(Tensor({channels}))), groups(g) {
  EFL_CHECK(channels % g == 0, Errc::invalid_argument, "group count must divide channels");
}

void GroupNorm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

}  // namespace efl::nn
