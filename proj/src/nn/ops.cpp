#include "efl/nn/ops.hpp"

#include "efl/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace efl::nn {

namespace {

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  EFL_CHECK(a.same_shape(b), Errc::shape_mismatch,
            std::string(op) + ": " + a.shape_str() + " vs " + b.shape_str());
}

template <typename F, typename D>
Var unary(const Var& x, F f, D dfdx) {
  const Tensor& xv = x.value();
  Tensor out = Tensor::zeros_like(xv);
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_var(std::move(out), {x}, [dfdx](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfdx(p.value[i], self.value[i]);
  });
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  EFL_CHECK(a.cols() == b.rows(), Errc::shape_mismatch,
            "matmul: " + a.value().shape_str() + " x " + b.value().shape_str());
  Tensor out({a.rows(), b.cols()});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return make_var(std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) pa.ensure_grad().matrix().noalias() += self.grad.matrix() * pb.value.matrix().transpose();
    if (pb.requires_grad) pb.ensure_grad().matrix().noalias() += pa.value.matrix().transpose() * self.grad.matrix();
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  EFL_CHECK(a.cols() == b.cols(), Errc::shape_mismatch,
            "matmul_nt: " + a.value().shape_str() + " x " + b.value().shape_str() + "^T");
  Tensor out({a.rows(), b.rows()});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix().transpose();
  return make_var(std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) pa.ensure_grad().matrix().noalias() += self.grad.matrix() * pb.value.matrix();
    if (pb.requires_grad) pb.ensure_grad().matrix().noalias() += self.grad.matrix().transpose() * pa.value.matrix();
  });
}

Var transpose(const Var& a) {
  Tensor out({a.cols(), a.rows()});
  out.matrix() = a.value().matrix().transpose();
  return make_var(std::move(out), {a}, [](Node& self) {
    Node& p = parent(self, 0);
    if (p.requires_grad) p.ensure_grad().matrix() += self.grad.matrix().transpose();
  });
}

Var add(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_var(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& p = parent(self, k);
      if (!p.requires_grad) continue;
      Tensor& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_var(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& p = parent(self, k);
      if (!p.requires_grad) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      Tensor& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_var(std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      Tensor& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= s;
  return make_var(std::move(out), {a}, [s](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var add_n(const std::vector<Var>& terms) {
  EFL_CHECK(!terms.empty(), Errc::invalid_argument, "add_n of nothing");
  Tensor out = terms.front().value();
  for (std::size_t k = 1; k < terms.size(); ++k) {
    require_same(out, terms[k].value(), "add_n");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += terms[k].value()[i];
  }
  return make_var(std::move(out), terms, [](Node& self) {
    for (auto& pp : self.parents) {
      if (!pp->requires_grad) continue;
      Tensor& g = pp->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var add_bias(const Var& x, const Var& bias) {
  const int n = x.cols();
  EFL_CHECK(static_cast<int>(bias.value().size()) == n, Errc::shape_mismatch,
            "add_bias: " + x.value().shape_str() + " + " + bias.value().shape_str());
  Tensor out = x.value();
  out.matrix().rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().data().data(), n);
  return make_var(std::move(out), {x, bias}, [n](Node& self) {
    Node& px = parent(self, 0);
    Node& pb = parent(self, 1);
    if (px.requires_grad) px.ensure_grad().matrix() += self.grad.matrix();
    if (pb.requires_grad) {
      Eigen::Map<Eigen::RowVectorXd> gb(pb.ensure_grad().data().data(), n);
      gb += self.grad.matrix().colwise().sum();
    }
  });
}

Var add_channel(const Var& x, const Var& bias) {
  const int c = x.rows();
  EFL_CHECK(static_cast<int>(bias.value().size()) == c, Errc::shape_mismatch,
            "add_channel: " + x.value().shape_str() + " + " + bias.value().shape_str());
  Tensor out = x.value();
  out.matrix().colwise() += Eigen::Map<const Eigen::VectorXd>(bias.value().data().data(), c);
  return make_var(std::move(out), {x, bias}, [c](Node& self) {
    Node& px = parent(self, 0);
    Node& pb = parent(self, 1);
    if (px.requires_grad) px.ensure_grad().matrix() += self.grad.matrix();
    if (pb.requires_grad) {
      Eigen::Map<Eigen::VectorXd> gb(pb.ensure_grad().data().data(), c);
      gb += self.grad.matrix().rowwise().sum();
    }
  });
}

Var mul_channel(const Var& x, const Var& gain) {
  const int c = x.rows();
  EFL_CHECK(static_cast<int>(gain.value().size()) == c, Errc::shape_mismatch,
            "mul_channel: " + x.value().shape_str() + " * " + gain.value().shape_str());
  Tensor out = x.value();
  for (int r = 0; r < c; ++r) out.matrix().row(r) *= gain.value()[static_cast<std::size_t>(r)];
  return make_var(std::move(out), {x, gain}, [c](Node& self) {
    Node& px = parent(self, 0);
    Node& pg = parent(self, 1);
    if (px.requires_grad) {
      auto g = px.ensure_grad().matrix();
      for (int r = 0; r < c; ++r) g.row(r) += self.grad.matrix().row(r) * pg.value[static_cast<std::size_t>(r)];
    }
    if (pg.requires_grad) {
      Tensor& g = pg.ensure_grad();
      for (int r = 0; r < c; ++r) g[static_cast<std::size_t>(r)] += self.grad.matrix().row(r).dot(px.value.matrix().row(r));
    }
  });
}

Var relu(const Var& x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Var silu(const Var& x) {
  return unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Var gelu(const Var& x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v))); },
      [](double v, double) {
        const double u = k * (v + 0.044715 * v * v * v);
        const double t = std::tanh(u);
        const double du = k * (1.0 + 3.0 * 0.044715 * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      });
}

Var tanh(const Var& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var softmax_rows(const Var& x, SoftmaxMask mask) {
  const int m = x.rows();
  const int n = x.cols();
  Tensor out({m, n});
  const Tensor& xv = x.value();
  for (int i = 0; i < m; ++i) {
    int limit = n;
    if (mask.kind == MaskKind::causal) limit = std::min(n, i + 1);
    if (mask.kind == MaskKind::key_prefix) limit = std::clamp(mask.valid_keys, 1, n);
    double mx = -INFINITY;
    for (int j = 0; j < limit; ++j) mx = std::max(mx, xv.at(i, j));
    double z = 0.0;
    for (int j = 0; j < limit; ++j) {
      const double e = std::exp(xv.at(i, j) - mx);
      out.at(i, j) = e;
      z += e;
    }
    for (int j = 0; j < limit; ++j) out.at(i, j) /= z;
  }
  if (x.value().ndim() != 2) out = out.reshaped(x.shape());
  return make_var(std::move(out), {x}, [m, n](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.ensure_grad();
    for (int i = 0; i < m; ++i) {
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += self.value.at(i, j) * self.grad.at(i, j);
      for (int j = 0; j < n; ++j) g.at(i, j) += self.value.at(i, j) * (self.grad.at(i, j) - dot);
    }
  });
}

namespace {

// Shared normalisation kernel: normalises `count` contiguous blocks of
// `len` entries, then applies per-entry affine via callbacks on block index.
struct NormCache {
  std::vector<double> inv_std;
  Tensor xhat;
};

}  // namespace

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int m = x.rows();
  const int n = x.cols();
  EFL_CHECK(static_cast<int>(gamma.value().size()) == n && static_cast<int>(beta.value().size()) == n,
            Errc::shape_mismatch, "layer_norm affine size");
  auto cache = std::make_shared<NormCache>();
  cache->inv_std.resize(static_cast<std::size_t>(m));
  cache->xhat = Tensor({m, n});
  Tensor out({m, n});
  const Tensor& xv = x.value();
  for (int i = 0; i < m; ++i) {
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += xv.at(i, j);
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (xv.at(i, j) - mu) * (xv.at(i, j) - mu);
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    cache->inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < n; ++j) {
      const double h = (xv.at(i, j) - mu) * is;
      cache->xhat.at(i, j) = h;
      out.at(i, j) = h * gamma.value()[static_cast<std::size_t>(j)] + beta.value()[static_cast<std::size_t>(j)];
    }
  }
  return make_var(std::move(out), {x, gamma, beta}, [cache, m, n](Node& self) {
    Node& px = parent(self, 0);
    Node& pg = parent(self, 1);
    Node& pb = parent(self, 2);
    const Tensor& xh = cache->xhat;
    if (pg.requires_grad || pb.requires_grad) {
      Tensor& gg = pg.ensure_grad();
      Tensor& gb = pb.ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          gg[static_cast<std::size_t>(j)] += self.grad.at(i, j) * xh.at(i, j);
          gb[static_cast<std::size_t>(j)] += self.grad.at(i, j);
        }
    }
    if (!px.requires_grad) return;
    Tensor& gx = px.ensure_grad();
    std::vector<double> dh(static_cast<std::size_t>(n));
    for (int i = 0; i < m; ++i) {
      double mean_dh = 0.0, mean_dh_h = 0.0;
      for (int j = 0; j < n; ++j) {
        dh[static_cast<std::size_t>(j)] = self.grad.at(i, j) * pg.value[static_cast<std::size_t>(j)];
        mean_dh += dh[static_cast<std::size_t>(j)];
        mean_dh_h += dh[static_cast<std::size_t>(j)] * xh.at(i, j);
      }
      mean_dh /= n;
      mean_dh_h /= n;
      const double is = cache->inv_std[static_cast<std::size_t>(i)];
      for (int j = 0; j < n; ++j)
        gx.at(i, j) += is * (dh[static_cast<std::size_t>(j)] - mean_dh - xh.at(i, j) * mean_dh_h);
    }
  });
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps) {
  const int c = x.rows();
  const int hw = x.cols();
  EFL_CHECK(groups > 0 && c % groups == 0, Errc::shape_mismatch, "group_norm: channels not divisible by groups");
  EFL_CHECK(static_cast<int>(gamma.value().size()) == c && static_cast<int>(beta.value().size()) == c,
            Errc::shape_mismatch, "group_norm affine size");
  const int cpg = c / groups;
  const std::size_t len = static_cast<std::size_t>(cpg) * static_cast<std::size_t>(hw);
  auto cache = std::make_shared<NormCache>();
  cache->inv_std.resize(static_cast<std::size_t>(groups));
  cache->xhat = Tensor::zeros_like(x.value());
  Tensor out = Tensor::zeros_like(x.value());
  const auto& xs = x.value().storage();
  for (int gi = 0; gi < groups; ++gi) {
    const std::size_t base = static_cast<std::size_t>(gi) * len;
    double mu = 0.0;
    for (std::size_t k = 0; k < len; ++k) mu += xs[base + k];
    mu /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t k = 0; k < len; ++k) var += (xs[base + k] - mu) * (xs[base + k] - mu);
    var /= static_cast<double>(len);
    const double is = 1.0 / std::sqrt(var + eps);
    cache->inv_std[static_cast<std::size_t>(gi)] = is;
    for (std::size_t k = 0; k < len; ++k) {
      const std::size_t ch = (base + k) / static_cast<std::size_t>(hw);
      const double h = (xs[base + k] - mu) * is;
      cache->xhat[base + k] = h;
      out[base + k] = h * gamma.value()[ch] + beta.value()[ch];
    }
  }
  return make_var(std::move(out), {x, gamma, beta}, [cache, groups, hw, len](Node& self) {
    Node& px = parent(self, 0);
    Node& pg = parent(self, 1);
    Node& pb = parent(self, 2);
    const Tensor& xh = cache->xhat;
    const std::size_t total = xh.size();
    if (pg.requires_grad || pb.requires_grad) {
      Tensor& gg = pg.ensure_grad();
      Tensor& gb = pb.ensure_grad();
      for (std::size_t k = 0; k < total; ++k) {
        const std::size_t ch = k / static_cast<std::size_t>(hw);
        gg[ch] += self.grad[k] * xh[k];
        gb[ch] += self.grad[k];
      }
    }
    if (!px.requires_grad) return;
    Tensor& gx = px.ensure_grad();
    std::vector<double> dh(len);
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t base = static_cast<std::size_t>(gi) * len;
      double mean_dh = 0.0, mean_dh_h = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t ch = (base + k) / static_cast<std::size_t>(hw);
        dh[k] = self.grad[base + k] * pg.value[ch];
        mean_dh += dh[k];
        mean_dh_h += dh[k] * xh[base + k];
      }
      mean_dh /= static_cast<double>(len);
      mean_dh_h /= static_cast<double>(len);
      const double is = cache->inv_std[static_cast<std::size_t>(gi)];
      for (std::size_t k = 0; k < len; ++k) gx[base + k] += is * (dh[k] - mean_dh - xh[base + k] * mean_dh_h);
    }
  });
}

Var embedding(const Var& table, std::span<const int> ids) {
  const int vocab = table.rows();
  const int d = table.cols();
  std::vector<int> idv(ids.begin(), ids.end());
  Tensor out({static_cast<int>(idv.size()), d});
  for (std::size_t i = 0; i < idv.size(); ++i) {
    EFL_CHECK(idv[i] >= 0 && idv[i] < vocab, Errc::invalid_argument, "embedding id out of range");
    out.matrix().row(static_cast<Eigen::Index>(i)) = table.value().matrix().row(idv[i]);
  }
  return make_var(std::move(out), {table}, [idv = std::move(idv)](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto g = p.ensure_grad().matrix();
    for (std::size_t i = 0; i < idv.size(); ++i) g.row(idv[i]) += self.grad.matrix().row(static_cast<Eigen::Index>(i));
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  EFL_CHECK(!parts.empty(), Errc::invalid_argument, "concat_rows of nothing");
  std::vector<int> shape = parts.front().shape();
  EFL_CHECK(!shape.empty(), Errc::shape_mismatch, "concat_rows needs rank >= 1");
  const int c = parts.front().cols();
  int total = 0;
  for (const auto& p : parts) {
    EFL_CHECK(p.cols() == c && p.shape().size() == shape.size(), Errc::shape_mismatch,
              "concat_rows: column mismatch " + p.value().shape_str());
    total += p.rows();
  }
  shape[0] = total;
  Tensor out(shape);
  std::vector<int> offsets;
  int r = 0;
  for (const auto& p : parts) {
    offsets.push_back(r);
    std::copy(p.value().storage().begin(), p.value().storage().end(),
              out.storage().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(r) * c));
    r += p.rows();
  }
  return make_var(std::move(out), parts, [offsets, c](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      Tensor& g = p.ensure_grad();
      const std::size_t base = static_cast<std::size_t>(offsets[k]) * c;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[base + i];
    }
  });
}

Var slice_rows(const Var& x, int r0, int r1) {
  Tensor out = x.value().rows_slice(r0, r1);
  const int c = x.cols();
  return make_var(std::move(out), {x}, [r0, c](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.ensure_grad();
    const std::size_t base = static_cast<std::size_t>(r0) * c;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[base + i] += self.grad[i];
  });
}

Var reshape(const Var& x, std::vector<int> shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_var(std::move(out), {x}, [](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

namespace {

void im2col(const double* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, double* cols) {
  const int plane = ho * wo;
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + static_cast<std::ptrdiff_t>(((ci * k + ky) * k + kx)) * plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          double* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::ptrdiff_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
}

void col2im(const double* cols, int c, int h, int w, int k, int stride, int pad, int ho, int wo, double* x) {
  const int plane = ho * wo;
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + static_cast<std::ptrdiff_t>(((ci * k + ky) * k + kx)) * plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          double* dst = x + (static_cast<std::ptrdiff_t>(ci) * h + iy) * w;
          const double* src = row + oy * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int kernel, int stride, int pad) {
  EFL_CHECK(x.value().ndim() == 3, Errc::shape_mismatch, "conv2d expects [C,H,W], got " + x.value().shape_str());
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const int o = weight.rows();
  const int kk = c * kernel * kernel;
  EFL_CHECK(weight.cols() == kk, Errc::shape_mismatch,
            "conv2d weight " + weight.value().shape_str() + " for " + std::to_string(c) + " input channels");
  const int ho = (h + 2 * pad - kernel) / stride + 1;
  const int wo = (w + 2 * pad - kernel) / stride + 1;
  const bool has_bias = bias.defined();

  Tensor out({o, ho, wo});
  const bool pointwise = kernel == 1 && stride == 1 && pad == 0;
  auto cols = std::make_shared<Tensor>();
  if (pointwise) {
    out.matrix().noalias() = weight.value().matrix() * x.value().matrix();
  } else {
    *cols = Tensor({kk, ho * wo});
    im2col(x.value().data().data(), c, h, w, kernel, stride, pad, ho, wo, cols->data().data());
    out.matrix().noalias() = weight.value().matrix() * cols->matrix();
  }
  if (has_bias) out.matrix().colwise() += Eigen::Map<const Eigen::VectorXd>(bias.value().data().data(), o);

  std::vector<Var> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return make_var(std::move(out), std::move(parents),
                  [cols, pointwise, c, h, w, kernel, stride, pad, ho, wo, kk, has_bias](Node& self) {
                    Node& px = parent(self, 0);
                    Node& pw = parent(self, 1);
                    const auto gout = self.grad.matrix();
                    if (pw.requires_grad) {
                      if (pointwise)
                        pw.ensure_grad().matrix().noalias() += gout * px.value.matrix().transpose();
                      else
                        pw.ensure_grad().matrix().noalias() += gout * cols->matrix().transpose();
                    }
                    if (has_bias) {
                      Node& pb = parent(self, 2);
                      if (pb.requires_grad) {
                        Eigen::Map<Eigen::VectorXd> gb(pb.ensure_grad().data().data(), pb.value.size());
                        gb += gout.rowwise().sum();
                      }
                    }
                    if (px.requires_grad) {
                      if (pointwise) {
                        px.ensure_grad().matrix().noalias() += pw.value.matrix().transpose() * gout;
                      } else {
                        RowMatrix gcols = pw.value.matrix().transpose() * gout;
                        (void)kk;
                        col2im(gcols.data(), c, h, w, kernel, stride, pad, ho, wo, px.ensure_grad().data().data());
                      }
                    }
                  });
}

Var upsample2x(const Var& x) {
  EFL_CHECK(x.value().ndim() == 3, Errc::shape_mismatch, "upsample2x expects [C,H,W]");
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  Tensor out({c, 2 * h, 2 * w});
  const auto& xs = x.value().storage();
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out[(static_cast<std::size_t>(ci) * 2 * h + y) * 2 * w + xx] =
            xs[(static_cast<std::size_t>(ci) * h + y / 2) * w + xx / 2];
  return make_var(std::move(out), {x}, [c, h, w](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.ensure_grad();
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
          g[(static_cast<std::size_t>(ci) * h + y / 2) * w + xx / 2] +=
              self.grad[(static_cast<std::size_t>(ci) * 2 * h + y) * 2 * w + xx];
  });
}

namespace {

// index map for space_to_depth: out[((c*f+dy)*f+dx), i, j] = in[c, i*f+dy, j*f+dx]
std::vector<std::size_t> s2d_index(int c, int h, int w, int f) {
  const int ho = h / f, wo = w / f;
  std::vector<std::size_t> idx(static_cast<std::size_t>(c) * h * w);
  std::size_t o = 0;
  for (int ci = 0; ci < c; ++ci)
    for (int dy = 0; dy < f; ++dy)
      for (int dx = 0; dx < f; ++dx)
        for (int i = 0; i < ho; ++i)
          for (int j = 0; j < wo; ++j)
            idx[o++] = (static_cast<std::size_t>(ci) * h + i * f + dy) * w + j * f + dx;
  return idx;
}

}  // namespace

Var space_to_depth(const Var& x, int factor) {
  EFL_CHECK(x.value().ndim() == 3, Errc::shape_mismatch, "space_to_depth expects [C,H,W]");
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  EFL_CHECK(h % factor == 0 && w % factor == 0, Errc::shape_mismatch, "space_to_depth: size not divisible");
  auto idx = std::make_shared<std::vector<std::size_t>>(s2d_index(c, h, w, factor));
  Tensor out({c * factor * factor, h / factor, w / factor});
  for (std::size_t o = 0; o < idx->size(); ++o) out[o] = x.value()[(*idx)[o]];
  return make_var(std::move(out), {x}, [idx](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.ensure_grad();
    for (std::size_t o = 0; o < idx->size(); ++o) g[(*idx)[o]] += self.grad[o];
  });
}

Var depth_to_space(const Var& x, int factor) {
  EFL_CHECK(x.value().ndim() == 3, Errc::shape_mismatch, "depth_to_space expects [C,H,W]");
  const int cf = x.shape()[0], ho = x.shape()[1], wo = x.shape()[2];
  EFL_CHECK(cf % (factor * factor) == 0, Errc::shape_mismatch, "depth_to_space: channels not divisible");
  const int c = cf / (factor * factor);
  auto idx = std::make_shared<std::vector<std::size_t>>(s2d_index(c, ho * factor, wo * factor, factor));
  Tensor out({c, ho * factor, wo * factor});
  for (std::size_t o = 0; o < idx->size(); ++o) out[(*idx)[o]] = x.value()[o];
  return make_var(std::move(out), {x}, [idx](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.ensure_grad();
    for (std::size_t o = 0; o < idx->size(); ++o) g[o] += self.grad[(*idx)[o]];
  });
}

Var l2_normalize_rows(const Var& x, double eps) {
  const int m = x.rows();
  const int n = x.cols();
  Tensor out = x.value();
  std::vector<double> norms(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    const double nr = std::max(out.matrix().row(i).norm(), eps);
    norms[static_cast<std::size_t>(i)] = nr;
    out.matrix().row(i) /= nr;
  }
  return make_var(std::move(out), {x}, [norms, m, n](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    auto g = p.ensure_grad().matrix();
    for (int i = 0; i < m; ++i) {
      const auto y = self.value.matrix().row(i);
      const auto dy = self.grad.matrix().row(i);
      const double d = y.dot(dy);
      g.row(i) += (dy - d * y) / norms[static_cast<std::size_t>(i)];
    }
    (void)n;
  });
}

Var sum(const Var& x) {
  Tensor out({1}, std::accumulate(x.value().storage().begin(), x.value().storage().end(), 0.0));
  return make_var(std::move(out), {x}, [](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.ensure_grad();
    for (auto& v : g.storage()) v += self.grad[0];
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var mse_loss(const Var& pred, const Tensor& target) {
  require_same(pred.value(), target, "mse_loss");
  const double n = static_cast<double>(target.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = pred.value()[i] - target[i];
    acc += d * d;
  }
  Tensor out({1}, acc / n);
  return make_var(std::move(out), {pred}, [target, n](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.ensure_grad();
    const double s = 2.0 * self.grad[0] / n;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * (p.value[i] - target[i]);
  });
}

Var cross_entropy(const Var& logits, std::span<const int> targets) {
  const int m = logits.rows();
  const int v = logits.cols();
  EFL_CHECK(static_cast<int>(targets.size()) == m, Errc::shape_mismatch, "cross_entropy: one target per row");
  auto probs = std::make_shared<Tensor>(std::vector<int>{m, v});
  std::vector<int> tg(targets.begin(), targets.end());
  int count = 0;
  double loss = 0.0;
  for (int i = 0; i < m; ++i) {
    if (tg[static_cast<std::size_t>(i)] < 0) continue;
    EFL_CHECK(tg[static_cast<std::size_t>(i)] < v, Errc::invalid_argument, "cross_entropy target out of range");
    ++count;
    const auto row = logits.value().matrix().row(i);
    const double mx = row.maxCoeff();
    double z = 0.0;
    for (int j = 0; j < v; ++j) {
      const double e = std::exp(row(j) - mx);
      probs->at(i, j) = e;
      z += e;
    }
    for (int j = 0; j < v; ++j) probs->at(i, j) /= z;
    loss += (mx + std::log(z)) - row(tg[static_cast<std::size_t>(i)]);
  }
  EFL_CHECK(count > 0, Errc::invalid_argument, "cross_entropy: no supervised rows");
  Tensor out({1}, loss / count);
  return make_var(std::move(out), {logits}, [probs, tg = std::move(tg), count, m, v](Node& self) {
    Node& p = parent(self, 0);
    if (!p.requires_grad) return;
    Tensor& g = p.ensure_grad();
    const double s = self.grad[0] / count;
    for (int i = 0; i < m; ++i) {
      const int t = tg[static_cast<std::size_t>(i)];
      if (t < 0) continue;
      for (int j = 0; j < v; ++j) g.at(i, j) += s * (probs->at(i, j) - (j == t ? 1.0 : 0.0));
    }
  });
}

}  // namespace efl::nn
