#include "condenser/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "condenser/parallel.hpp"

namespace condenser::ops {

using detail::make_result;

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

std::size_t last_dim(const Tensor& x, const char* op) {
  if (x.rank() == 0) throw ShapeError(std::string(op) + ": expected at least one axis");
  return x.shape().back();
}

std::vector<double>& grad_of(const Tensor& t) { return t.node()->grad_buffer(); }

// c[n, m] += a[n, k] * b[k, m]; each output row is accumulated over k in
// ascending order, independently of other rows.
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  parallel_for(n, 16, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      double* ci = c + i * m;
      const double* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ai[p];
        const double* bp = b + p * m;
        for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
      }
    }
  });
}

std::vector<double> transpose(std::span<const double> a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

void check_finite(std::span<const double> v, const char* op) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return make_result(a.shape(), std::move(out), "add", {a, b},
                     [a, b](std::span<const double>, std::span<const double> g) {
                       if (a.requires_grad()) a.node()->accumulate(g);
                       if (b.requires_grad()) b.node()->accumulate(g);
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return make_result(a.shape(), std::move(out), "sub", {a, b},
                     [a, b](std::span<const double>, std::span<const double> g) {
                       if (a.requires_grad()) a.node()->accumulate(g);
                       if (b.requires_grad()) {
                         auto& gb = grad_of(b);
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_result(a.shape(), std::move(out), "mul", {a, b},
                     [a, b](std::span<const double>, std::span<const double> g) {
                       auto ad = a.data(), bd = b.data();
                       if (a.requires_grad()) {
                         auto& ga = grad_of(a);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
                       }
                       if (b.requires_grad()) {
                         auto& gb = grad_of(b);
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
                       }
                     });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return make_result(x.shape(), std::move(out), "scale", {x},
                     [x, factor](std::span<const double>, std::span<const double> g) {
                       auto& gx = grad_of(x);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
                     });
}

Tensor add_scalar(const Tensor& x, double value) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v += value;
  return make_result(x.shape(), std::move(out), "add_scalar", {x},
                     [x](std::span<const double>, std::span<const double> g) {
                       x.node()->accumulate(g);
                     });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = last_dim(x, "add_bias");
  if (bias.rank() != 1 || bias.dim(0) != n)
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                     shape_str(x.shape()));
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bd = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % n];
  return make_result(x.shape(), std::move(out), "add_bias", {x, bias},
                     [x, bias, n](std::span<const double>, std::span<const double> g) {
                       if (x.requires_grad()) x.node()->accumulate(g);
                       if (bias.requires_grad()) {
                         auto& gb = grad_of(bias);
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
                       }
                     });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, "sum", {x}, [x](std::span<const double>, std::span<const double> g) {
    auto& gx = grad_of(x);
    for (auto& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s / n}, "mean", {x},
                     [x, n](std::span<const double>, std::span<const double> g) {
                       auto& gx = grad_of(x);
                       for (auto& v : gx) v += g[0] / n;
                     });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) s += ad[i] * bd[i];
  return make_result({}, {s}, "dot", {a, b},
                     [a, b](std::span<const double>, std::span<const double> g) {
                       auto ad = a.data(), bd = b.data();
                       if (a.requires_grad()) {
                         auto& ga = grad_of(a);
                         for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * bd[i];
                       }
                       if (b.requires_grad()) {
                         auto& gb = grad_of(b);
                         for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[0] * ad[i];
                       }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {x},
                     [x](std::span<const double>, std::span<const double> g) {
                       x.node()->accumulate(g);
                     });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(n * m, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), n, k, m);
  return make_result({n, m}, std::move(out), "matmul", {a, b},
                     [a, b, n, k, m](std::span<const double>, std::span<const double> g) {
                       if (a.requires_grad()) {
                         auto bt = transpose(b.data(), k, m);
                         gemm_nn(g.data(), bt.data(), grad_of(a).data(), n, m, k);
                       }
                       if (b.requires_grad()) {
                         auto at = transpose(a.data(), n, k);
                         gemm_nn(at.data(), g.data(), grad_of(b).data(), k, n, m);
                       }
                     });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
  std::vector<double> out(n * m, 0.0);
  auto bt = transpose(b.data(), m, k);
  gemm_nn(a.data().data(), bt.data(), out.data(), n, k, m);
  return make_result({n, m}, std::move(out), "matmul_nt", {a, b},
                     [a, b, n, k, m](std::span<const double>, std::span<const double> g) {
                       if (a.requires_grad())
                         gemm_nn(g.data(), b.data().data(), grad_of(a).data(), n, m, k);
                       if (b.requires_grad()) {
                         auto gt = transpose(g, n, m);
                         gemm_nn(gt.data(), a.data().data(), grad_of(b).data(), m, n, k);
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const std::size_t in = last_dim(x, "linear");
  if (weight.rank() != 2 || weight.dim(0) != in)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " +
                     shape_str(weight.shape()));
  const std::size_t out_dim = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim))
    throw ShapeError("linear: bias " + shape_str(bias.shape()));
  const std::size_t rows = x.numel() / std::max<std::size_t>(in, 1);
  std::vector<double> out(rows * out_dim, 0.0);
  if (bias.defined()) {
    auto bd = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(bd.begin(), bd.end(), out.begin() + static_cast<std::ptrdiff_t>(r * out_dim));
  }
  gemm_nn(x.data().data(), weight.data().data(), out.data(), rows, in, out_dim);
  Shape shape = x.shape();
  shape.back() = out_dim;
  return make_result(std::move(shape), std::move(out), "linear", {x, weight, bias},
                     [x, weight, bias, rows, in, out_dim](std::span<const double>,
                                                          std::span<const double> g) {
                       if (x.requires_grad()) {
                         auto wt = transpose(weight.data(), in, out_dim);
                         gemm_nn(g.data(), wt.data(), grad_of(x).data(), rows, out_dim, in);
                       }
                       if (weight.requires_grad()) {
                         auto xt = transpose(x.data(), rows, in);
                         gemm_nn(xt.data(), g.data(), grad_of(weight).data(), in, rows, out_dim);
                       }
                       if (bias.defined() && bias.requires_grad()) {
                         auto& gb = grad_of(bias);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
                       }
                     });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return make_result(x.shape(), std::move(out), "relu", {x},
                     [x](std::span<const double>, std::span<const double> g) {
                       auto xd = x.data();
                       auto& gx = grad_of(x);
                       for (std::size_t i = 0; i < g.size(); ++i)
                         if (xd[i] > 0.0) gx[i] += g[i];
                     });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * std::numbers::sqrt2 / 2.0));
  return make_result(x.shape(), std::move(out), "gelu", {x},
                     [x](std::span<const double>, std::span<const double> g) {
                       auto xd = x.data();
                       auto& gx = grad_of(x);
                       const double inv_sqrt_2pi = std::numbers::inv_sqrtpi / std::numbers::sqrt2;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const double v = xd[i];
                         const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
                         const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                         gx[i] += g[i] * (cdf + v * pdf);
                       }
                     });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& shape = x.shape();
  if (axis >= shape.size())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape));
  check_finite(x.data(), "softmax");
  std::size_t outer = 1, inner = 1;
  const std::size_t n = shape[axis];
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];

  auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xd[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  return make_result(shape, std::move(out), "softmax", {x},
                     [x, outer, inner, n](std::span<const double> p, std::span<const double> g) {
                       auto& gx = grad_of(x);
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t in = 0; in < inner; ++in) {
                           const std::size_t base = o * n * inner + in;
                           double s = 0.0;
                           for (std::size_t j = 0; j < n; ++j)
                             s += p[base + j * inner] * g[base + j * inner];
                           for (std::size_t j = 0; j < n; ++j) {
                             const std::size_t idx = base + j * inner;
                             gx[idx] += p[idx] * (g[idx] - s);
                           }
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t n = last_dim(x, "layer_norm");
  if (n == 0) throw ShapeError("layer_norm: zero-length last axis");
  if (!(eps > 0.0)) throw Error("layer_norm: eps must be positive");
  if (gain.rank() != 1 || gain.dim(0) != n || bias.rank() != 1 || bias.dim(0) != n)
    throw ShapeError("layer_norm: affine parameters do not match " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / n;
  auto xd = x.data(), gd = gain.data(), bd = bias.data();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[r * n + j] = h;
      out[r * n + j] = h * gd[j] + bd[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), "layer_norm", {x, gain, bias},
      [x, gain, bias, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          std::span<const double>, std::span<const double> g) {
        auto gd = gain.data();
        if (gain.requires_grad()) {
          auto& gg = grad_of(gain);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % n] += g[i] * xhat[i];
        }
        if (bias.requires_grad()) {
          auto& gb = grad_of(bias);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
        }
        if (x.requires_grad()) {
          auto& gx = grad_of(x);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = g[r * n + j] * gd[j];
              m1 += dh;
              m2 += dh * xhat[r * n + j];
            }
            m1 *= inv_n;
            m2 *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double dh = g[r * n + j] * gd[j];
              gx[r * n + j] += inv_std[r] * (dh - m1 - xhat[r * n + j] * m2);
            }
          }
        }
      });
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw Error("dropout: rate must be in [0, 1)");
  if (p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() < p ? 0.0 : keep_scale;
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * mask[i];
  return make_result(x.shape(), std::move(out), "dropout", {x},
                     [x, mask = std::move(mask)](std::span<const double>,
                                                 std::span<const double> g) {
                       auto& gx = grad_of(x);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                     });
}

Tensor embedding(const Tensor& table, std::span<const int> ids, Shape leading) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be [V, d]");
  if (shape_numel(leading) != ids.size())
    throw ShapeError("embedding: " + std::to_string(ids.size()) + " ids for leading shape " +
                     shape_str(leading));
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw Error("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                  std::to_string(vocab) + " rows");
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  Shape shape = std::move(leading);
  shape.push_back(d);
  std::vector<int> id_copy(ids.begin(), ids.end());
  return make_result(std::move(shape), std::move(out), "embedding", {table},
                     [table, d, id_copy = std::move(id_copy)](std::span<const double>,
                                                              std::span<const double> g) {
                       auto& gt = grad_of(table);
                       for (std::size_t i = 0; i < id_copy.size(); ++i) {
                         double* row = gt.data() + static_cast<std::size_t>(id_copy[i]) * d;
                         for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
                       }
                     });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t d = last_dim(x, "gather_rows");
  const std::size_t total = d ? x.numel() / d : 0;
  std::vector<double> out(rows.size() * d);
  auto xd = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result({rows.size(), d}, std::move(out), "gather_rows", {x},
                     [x, d, idx = std::move(idx)](std::span<const double>,
                                                  std::span<const double> g) {
                       auto& gx = grad_of(x);
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t j = 0; j < d; ++j) gx[idx[i] * d + j] += g[i * d + j];
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t d = parts[0].rank() == 2 ? parts[0].dim(1) : 0;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != d)
      throw ShapeError("concat_rows: expected [n, " + std::to_string(d) + "], got " + shape_str(p.shape()));
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result({rows, d}, std::move(out), "concat_rows", parts,
                     [parts](std::span<const double>, std::span<const double> g) {
                       std::size_t offset = 0;
                       for (const auto& p : parts) {
                         if (p.requires_grad()) {
                           auto& gp = grad_of(p);
                           for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
                         }
                         offset += p.numel();
                       }
                     });
}

Tensor select_position(const Tensor& seq, std::size_t pos) {
  if (seq.rank() != 3) throw ShapeError("select_position: expected [B, T, d]");
  const std::size_t b = seq.dim(0), t = seq.dim(1), d = seq.dim(2);
  if (pos >= t) throw ShapeError("select_position: position out of range");
  std::vector<double> out(b * d);
  auto sd = seq.data();
  for (std::size_t i = 0; i < b; ++i)
    std::copy_n(sd.begin() + static_cast<std::ptrdiff_t>((i * t + pos) * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  return make_result({b, d}, std::move(out), "select_position", {seq},
                     [seq, b, t, d, pos](std::span<const double>, std::span<const double> g) {
                       auto& gs = grad_of(seq);
                       for (std::size_t i = 0; i < b; ++i)
                         for (std::size_t j = 0; j < d; ++j) gs[(i * t + pos) * d + j] += g[i * d + j];
                     });
}

Tensor replace_position(const Tensor& seq, const Tensor& rows, std::size_t pos) {
  if (seq.rank() != 3) throw ShapeError("replace_position: expected [B, T, d]");
  const std::size_t b = seq.dim(0), t = seq.dim(1), d = seq.dim(2);
  if (rows.rank() != 2 || rows.dim(0) != b || rows.dim(1) != d)
    throw ShapeError("replace_position: rows " + shape_str(rows.shape()) + " do not match " +
                     shape_str(seq.shape()));
  if (pos >= t) throw ShapeError("replace_position: position out of range");
  std::vector<double> out(seq.data().begin(), seq.data().end());
  auto rd = rows.data();
  for (std::size_t i = 0; i < b; ++i)
    std::copy_n(rd.begin() + static_cast<std::ptrdiff_t>(i * d), d,
                out.begin() + static_cast<std::ptrdiff_t>((i * t + pos) * d));
  return make_result(seq.shape(), std::move(out), "replace_position", {seq, rows},
                     [seq, rows, b, t, d, pos](std::span<const double>, std::span<const double> g) {
                       if (seq.requires_grad()) {
                         auto& gs = grad_of(seq);
                         for (std::size_t i = 0; i < b; ++i)
                           for (std::size_t p = 0; p < t; ++p) {
                             if (p == pos) continue;
                             for (std::size_t j = 0; j < d; ++j)
                               gs[(i * t + p) * d + j] += g[(i * t + p) * d + j];
                           }
                       }
                       if (rows.requires_grad()) {
                         auto& gr = grad_of(rows);
                         for (std::size_t i = 0; i < b; ++i)
                           for (std::size_t j = 0; j < d; ++j)
                             gr[i * d + j] += g[(i * t + pos) * d + j];
                       }
                     });
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            const AttentionMask& mask, std::vector<double>* probs_out) {
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  if (q.rank() != 3) throw ShapeError("attention: expected [B, T, d]");
  const std::size_t B = q.dim(0), T = q.dim(1), D = q.dim(2);
  if (heads == 0 || D % heads != 0) throw ShapeError("attention: d not divisible by heads");
  if (mask.key_valid.size() != B * T)
    throw ShapeError("attention: mask has " + std::to_string(mask.key_valid.size()) +
                     " entries for " + std::to_string(B * T) + " positions");
  const std::size_t dh = D / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto qd = q.data(), kd = k.data(), vd = v.data();
  std::vector<double> probs(B * heads * T * T, 0.0);
  std::vector<double> out(B * T * D, 0.0);
  const auto& valid = mask.key_valid;
  const bool isolate = mask.isolate_position0;

  parallel_for(B * heads, 1, [&](std::size_t w0, std::size_t w1) {
    std::vector<double> logits(T);
    for (std::size_t w = w0; w < w1; ++w) {
      const std::size_t b = w / heads, h = w % heads;
      for (std::size_t i = 0; i < T; ++i) {
        double* p = probs.data() + ((b * heads + h) * T + i) * T;
        const double* qi = qd.data() + (b * T + i) * D + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < T; ++j) {
          if (!valid[b * T + j] || (isolate && i > 0 && j == 0)) continue;
          const double* kj = kd.data() + (b * T + j) * D + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          logits[j] = s * scale;
          mx = std::max(mx, logits[j]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) continue;
        double z = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          if (!valid[b * T + j] || (isolate && i > 0 && j == 0)) continue;
          p[j] = std::exp(logits[j] - mx);
          z += p[j];
        }
        double* oi = out.data() + (b * T + i) * D + h * dh;
        for (std::size_t j = 0; j < T; ++j) {
          if (p[j] == 0.0) continue;
          p[j] /= z;
          const double* vj = vd.data() + (b * T + j) * D + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  });
  if (probs_out) *probs_out = probs;

  return make_result(
      q.shape(), std::move(out), "attention", {q, k, v},
      [q, k, v, B, T, D, heads, dh, scale, probs = std::move(probs)](std::span<const double>,
                                                                     std::span<const double> g) {
        auto qd = q.data(), kd = k.data(), vd = v.data();
        std::vector<double> zero;
        auto& gq = q.requires_grad() ? grad_of(q) : zero;
        auto& gk = k.requires_grad() ? grad_of(k) : zero;
        auto& gv = v.requires_grad() ? grad_of(v) : zero;
        parallel_for(B * heads, 1, [&](std::size_t w0, std::size_t w1) {
          std::vector<double> dp(T), ds(T);
          for (std::size_t w = w0; w < w1; ++w) {
            const std::size_t b = w / heads, h = w % heads;
            for (std::size_t i = 0; i < T; ++i) {
              const double* p = probs.data() + ((b * heads + h) * T + i) * T;
              const double* gi = g.data() + (b * T + i) * D + h * dh;
              double dot_pg = 0.0;
              for (std::size_t j = 0; j < T; ++j) {
                dp[j] = 0.0;
                if (p[j] == 0.0) continue;
                const double* vj = vd.data() + (b * T + j) * D + h * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
                dp[j] = s;
                dot_pg += p[j] * s;
                if (!gv.empty()) {
                  double* gvj = gv.data() + (b * T + j) * D + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * gi[c];
                }
              }
              const double* qi = qd.data() + (b * T + i) * D + h * dh;
              double* gqi = gq.empty() ? nullptr : gq.data() + (b * T + i) * D + h * dh;
              for (std::size_t j = 0; j < T; ++j) {
                if (p[j] == 0.0) continue;
                ds[j] = p[j] * (dp[j] - dot_pg) * scale;
                const double* kj = kd.data() + (b * T + j) * D + h * dh;
                if (gqi)
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds[j] * kj[c];
                if (!gk.empty()) {
                  double* gkj = gk.data() + (b * T + j) * D + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds[j] * qi[c];
                }
              }
            }
          }
        });
      });
}

namespace {

struct RowLoss {
  double loss;
  double log_z;
};

// Log-partition over allowed entries of one row; -inf logits drop out.
RowLoss row_cross_entropy(const double* row, std::size_t classes, std::size_t target,
                          const std::uint8_t* allowed) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < classes; ++j) {
    if (allowed && !allowed[j]) continue;
    if (std::isnan(row[j]) || row[j] == std::numeric_limits<double>::infinity())
      throw NumericError("cross_entropy: NaN or +inf logit");
    mx = std::max(mx, row[j]);
  }
  double z = 0.0;
  for (std::size_t j = 0; j < classes; ++j) {
    if (allowed && !allowed[j]) continue;
    z += std::exp(row[j] - mx);
  }
  const double log_z = mx + std::log(z);
  return {log_z - row[target], log_z};
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::size_t target) {
  if (logits.rank() != 1) throw ShapeError("cross_entropy: expected 1-D logits");
  const std::size_t classes = logits.dim(0);
  if (target >= classes)
    throw Error("cross_entropy: target " + std::to_string(target) + " outside " +
                std::to_string(classes) + " classes");
  auto r = row_cross_entropy(logits.data().data(), classes, target, nullptr);
  return make_result({}, {r.loss}, "cross_entropy", {logits},
                     [logits, target, log_z = r.log_z](std::span<const double>,
                                                       std::span<const double> g) {
                       auto ld = logits.data();
                       auto& gl = grad_of(logits);
                       for (std::size_t j = 0; j < ld.size(); ++j)
                         gl[j] += g[0] * (std::exp(ld[j] - log_z) - (j == target ? 1.0 : 0.0));
                     });
}

Tensor masked_cross_entropy(const Tensor& logits, std::span<const int> targets,
                            double normalizer, std::span<const std::uint8_t> allowed) {
  if (logits.rank() != 2) throw ShapeError("masked_cross_entropy: expected [rows, classes]");
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  if (targets.size() != rows) throw ShapeError("masked_cross_entropy: target count mismatch");
  if (!allowed.empty() && allowed.size() != rows * classes)
    throw ShapeError("masked_cross_entropy: allowed mask shape mismatch");
  std::size_t selected = 0;
  for (int t : targets) {
    if (t >= 0 && static_cast<std::size_t>(t) >= classes)
      throw Error("masked_cross_entropy: target outside class range");
    if (t >= 0) ++selected;
  }
  const double norm = normalizer > 0.0 ? normalizer : static_cast<double>(selected);
  auto ld = logits.data();
  std::vector<double> log_z(rows, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0) continue;
    const std::uint8_t* am = allowed.empty() ? nullptr : allowed.data() + r * classes;
    if (am && !am[targets[r]]) throw Error("masked_cross_entropy: target class is masked out");
    auto rl = row_cross_entropy(ld.data() + r * classes, classes,
                                static_cast<std::size_t>(targets[r]), am);
    log_z[r] = rl.log_z;
    total += rl.loss;
  }
  const double value = selected ? total / norm : 0.0;
  std::vector<int> tcopy(targets.begin(), targets.end());
  std::vector<std::uint8_t> acopy(allowed.begin(), allowed.end());
  return make_result(
      {}, {value}, "masked_cross_entropy", {logits},
      [logits, rows, classes, norm, tcopy = std::move(tcopy), acopy = std::move(acopy),
       log_z = std::move(log_z)](std::span<const double>, std::span<const double> g) {
        auto ld = logits.data();
        auto& gl = grad_of(logits);
        for (std::size_t r = 0; r < rows; ++r) {
          if (tcopy[r] < 0) continue;
          for (std::size_t j = 0; j < classes; ++j) {
            if (!acopy.empty() && !acopy[r * classes + j]) continue;
            const double p = std::exp(ld[r * classes + j] - log_z[r]);
            const double onehot = j == static_cast<std::size_t>(tcopy[r]) ? 1.0 : 0.0;
            gl[r * classes + j] += g[0] * (p - onehot) / norm;
          }
        }
      });
}

Tensor row_cosine(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "row_cosine");
  if (a.rank() != 2) throw ShapeError("row_cosine: expected [N, d]");
  const std::size_t n = a.dim(0), d = a.dim(1);
  auto ad = a.data(), bd = b.data();
  std::vector<double> out(n), na(n), nb(n);
  for (std::size_t i = 0; i < n; ++i) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      ab += ad[i * d + j] * bd[i * d + j];
      aa += ad[i * d + j] * ad[i * d + j];
      bb += bd[i * d + j] * bd[i * d + j];
    }
    if (aa == 0.0 || bb == 0.0) throw NumericError("row_cosine: zero vector");
    na[i] = std::sqrt(aa);
    nb[i] = std::sqrt(bb);
    out[i] = ab / (na[i] * nb[i]);
  }
  return make_result({n}, std::move(out), "row_cosine", {a, b},
                     [a, b, n, d, na = std::move(na), nb = std::move(nb)](
                         std::span<const double> cos, std::span<const double> g) {
                       auto ad = a.data(), bd = b.data();
                       for (std::size_t i = 0; i < n; ++i) {
                         const double inv = 1.0 / (na[i] * nb[i]);
                         if (a.requires_grad()) {
                           auto& ga = grad_of(a);
                           for (std::size_t j = 0; j < d; ++j)
                             ga[i * d + j] += g[i] * (bd[i * d + j] * inv -
                                                      cos[i] * ad[i * d + j] / (na[i] * na[i]));
                         }
                         if (b.requires_grad()) {
                           auto& gb = grad_of(b);
                           for (std::size_t j = 0; j < d; ++j)
                             gb[i * d + j] += g[i] * (ad[i * d + j] * inv -
                                                      cos[i] * bd[i * d + j] / (nb[i] * nb[i]));
                         }
                       }
                     });
}

Tensor row_distance(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "row_distance");
  if (a.rank() != 2) throw ShapeError("row_distance: expected [N, d]");
  const std::size_t n = a.dim(0), d = a.dim(1);
  auto ad = a.data(), bd = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = ad[i * d + j] - bd[i * d + j];
      s += diff * diff;
    }
    out[i] = std::sqrt(s);
  }
  return make_result({n}, std::move(out), "row_distance", {a, b},
                     [a, b, n, d](std::span<const double> dist, std::span<const double> g) {
                       auto ad = a.data(), bd = b.data();
                       for (std::size_t i = 0; i < n; ++i) {
                         if (dist[i] == 0.0) continue;
                         for (std::size_t j = 0; j < d; ++j) {
                           const double u = g[i] * (ad[i * d + j] - bd[i * d + j]) / dist[i];
                           if (a.requires_grad()) grad_of(a)[i * d + j] += u;
                           if (b.requires_grad()) grad_of(b)[i * d + j] -= u;
                         }
                       }
                     });
}

}  // namespace condenser::ops
