#include "klgrade/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "klgrade/error.hpp"

namespace klg::ops {
namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (!t.defined() || t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     " input, got " + (t.defined() ? shape_string(t.shape()) : "undefined"));
  }
}

// Output columns [lo, hi) whose input column ox*stride + k - pad is in range.
std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in,
                                                std::size_t k, std::size_t stride,
                                                std::size_t pad) {
  std::size_t lo = 0;
  while (lo < out && lo * stride + k < pad) ++lo;
  std::size_t hi = out;
  while (hi > lo && (hi - 1) * stride + k - pad >= in) --hi;
  return {lo, hi};
}

double log_sum_exp(const double* row, std::size_t k) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) m = std::max(m, row[j]);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
  return m + std::log(s);
}

}  // namespace

namespace {

struct ConvGeometry {
  std::size_t c, h, w, k, stride, pad, ho, wo;
  std::size_t rows() const { return c * k * k; }
  std::size_t cols() const { return ho * wo; }
};

// Four independent partial sums so the loop vectorizes without reassociation
// flags; the summation order is fixed, so results stay deterministic.
double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    s0 += a[j] * b[j];
    s1 += a[j + 1] * b[j + 1];
    s2 += a[j + 2] * b[j + 2];
    s3 += a[j + 3] * b[j + 3];
  }
  for (; j < n; ++j) s0 += a[j] * b[j];
  return (s0 + s1) + (s2 + s3);
}

// Unfold one [C,H,W] sample into a [C*K*K, Ho*Wo] patch matrix.
void im2col(const double* x, const ConvGeometry& g, double* col) {
  for (std::size_t ic = 0; ic < g.c; ++ic)
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      const auto [ylo, yhi] = valid_range(g.ho, g.h, ky, g.stride, g.pad);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const auto [xlo, xhi] = valid_range(g.wo, g.w, kx, g.stride, g.pad);
        double* dst = col + ((ic * g.k + ky) * g.k + kx) * g.cols();
        std::fill(dst, dst + g.cols(), 0.0);
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          const double* src = x + (ic * g.h + oy * g.stride + ky - g.pad) * g.w + kx - g.pad;
          double* row = dst + oy * g.wo;
          for (std::size_t ox = xlo; ox < xhi; ++ox) row[ox] = src[ox * g.stride];
        }
      }
    }
}

// Fold a patch-matrix gradient back onto a [C,H,W] sample gradient.
void col2im_add(const double* col, const ConvGeometry& g, double* gx) {
  for (std::size_t ic = 0; ic < g.c; ++ic)
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      const auto [ylo, yhi] = valid_range(g.ho, g.h, ky, g.stride, g.pad);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const auto [xlo, xhi] = valid_range(g.wo, g.w, kx, g.stride, g.pad);
        const double* src = col + ((ic * g.k + ky) * g.k + kx) * g.cols();
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          double* dst = gx + (ic * g.h + oy * g.stride + ky - g.pad) * g.w + kx - g.pad;
          const double* row = src + oy * g.wo;
          for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox * g.stride] += row[ox];
        }
      }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              Conv2dParams p) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  require_rank(bias, 1, "conv2d bias");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c || weight.dim(3) != k || bias.dim(0) != o) {
    throw ShapeError("conv2d: input " + shape_string(x.shape()) + " incompatible with weight " +
                     shape_string(weight.shape()) + " / bias " + shape_string(bias.shape()));
  }
  if (p.stride == 0) throw ValueError("conv2d: stride must be positive");
  if (h + 2 * p.pad < k || w + 2 * p.pad < k) {
    throw ShapeError("conv2d: kernel larger than padded input " + shape_string(x.shape()));
  }
  const ConvGeometry g{c, h, w, k, p.stride, p.pad, (h + 2 * p.pad - k) / p.stride + 1,
                       (w + 2 * p.pad - k) / p.stride + 1};
  const std::size_t rows = g.rows(), cols = g.cols();

  std::vector<double> out(n * o * cols);
  std::vector<double> col(rows * cols);
  const double* wd = weight.data().data();
  const double* bd = bias.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    im2col(x.data().data() + b * c * h * w, g, col.data());
    for (std::size_t oc = 0; oc < o; ++oc) {
      double* orow = out.data() + (b * o + oc) * cols;
      std::fill(orow, orow + cols, bd[oc]);
      const double* wr = wd + oc * rows;
      for (std::size_t r = 0; r < rows; ++r) {
        const double wv = wr[r];
        const double* cr = col.data() + r * cols;
        for (std::size_t j = 0; j < cols; ++j) orow[j] += wv * cr[j];
      }
    }
  }

  return Tensor::make_result(
      {n, o, g.ho, g.wo}, std::move(out), {x, weight, bias},
      [=](detail::Node& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        auto& bn = *self.parents[2];
        const double* gy = self.grad.data();
        if (bn.requires_grad) {
          double* gb = bn.ensure_grad().data();
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t oc = 0; oc < o; ++oc) {
              const double* gr = gy + (b * o + oc) * cols;
              double acc = 0.0;
              for (std::size_t j = 0; j < cols; ++j) acc += gr[j];
              gb[oc] += acc;
            }
        }
        double* gx = xn.requires_grad ? xn.ensure_grad().data() : nullptr;
        double* gw = wn.requires_grad ? wn.ensure_grad().data() : nullptr;
        if (!gx && !gw) return;
        const double* wv = wn.data.data();
        std::vector<double> colbuf(rows * cols);
        std::vector<double> gcol(gx ? rows * cols : 0);
        for (std::size_t b = 0; b < n; ++b) {
          const double* gyb = gy + b * o * cols;
          if (gw) {
            im2col(xn.data.data() + b * c * h * w, g, colbuf.data());
            for (std::size_t oc = 0; oc < o; ++oc) {
              const double* gr = gyb + oc * cols;
              double* gwr = gw + oc * rows;
              for (std::size_t r = 0; r < rows; ++r) {
                gwr[r] += dot(gr, colbuf.data() + r * cols, cols);
              }
            }
          }
          if (gx) {
            std::fill(gcol.begin(), gcol.end(), 0.0);
            for (std::size_t oc = 0; oc < o; ++oc) {
              const double* gr = gyb + oc * cols;
              const double* wr = wv + oc * rows;
              for (std::size_t r = 0; r < rows; ++r) {
                const double kv = wr[r];
                double* gc = gcol.data() + r * cols;
                for (std::size_t j = 0; j < cols; ++j) gc[j] += kv * gr[j];
              }
            }
            col2im_add(gcol.data(), g, gx + b * c * h * w);
          }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear weight");
  require_rank(bias, 1, "linear bias");
  const std::size_t n = x.dim(0), in = x.dim(1), outw = weight.dim(0);
  if (weight.dim(1) != in || bias.dim(0) != outw) {
    throw ShapeError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                     shape_string(weight.shape()));
  }
  std::vector<double> out(n * outw);
  const double* xd = x.data().data();
  const double* wd = weight.data().data();
  const double* bd = bias.data().data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < outw; ++j) {
      const double* xr = xd + b * in;
      const double* wr = wd + j * in;
      double acc = bd[j];
      for (std::size_t i = 0; i < in; ++i) acc += wr[i] * xr[i];
      out[b * outw + j] = acc;
    }
  return Tensor::make_result({n, outw}, std::move(out), {x, weight, bias},
                             [=](detail::Node& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    auto& bn = *self.parents[2];
    const double* gy = self.grad.data();
    if (xn.requires_grad) {
      double* gx = xn.ensure_grad().data();
      const double* wv = wn.data.data();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t j = 0; j < outw; ++j) {
          const double g = gy[b * outw + j];
          const double* wr = wv + j * in;
          double* gr = gx + b * in;
          for (std::size_t i = 0; i < in; ++i) gr[i] += g * wr[i];
        }
    }
    if (wn.requires_grad) {
      double* gw = wn.ensure_grad().data();
      const double* xv = xn.data.data();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t j = 0; j < outw; ++j) {
          const double g = gy[b * outw + j];
          const double* xr = xv + b * in;
          double* gr = gw + j * in;
          for (std::size_t i = 0; i < in; ++i) gr[i] += g * xr[i];
        }
    }
    if (bn.requires_grad) {
      double* gb = bn.ensure_grad().data();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t j = 0; j < outw; ++j) gb[j] += gy[b * outw + j];
    }
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return Tensor::make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& xn = *self.parents[0];
    double* gx = xn.ensure_grad().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (xn.data[i] > 0.0) gx[i] += self.grad[i];
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& xn = *self.parents[0];
    double* gx = xn.ensure_grad().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double y = self.data[i];
      gx[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < hw; ++j) acc += x[i * hw + j];
    out[i] = acc / static_cast<double>(hw);
  }
  return Tensor::make_result({n, c}, std::move(out), {x}, [=](detail::Node& self) {
    double* gx = self.parents[0]->ensure_grad().data();
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t i = 0; i < n * c; ++i) {
      const double g = self.grad[i] * inv;
      for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += g;
    }
  });
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& t : parts) require_rank(t, 4, "concat_channels");
  const std::size_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::vector<std::size_t> chans;
  std::size_t total = 0;
  for (const auto& t : parts) {
    if (t.dim(0) != n || t.dim(2) != h || t.dim(3) != w) {
      throw ShapeError("concat_channels: mismatched " + shape_string(t.shape()) + " vs " +
                       shape_string(parts[0].shape()));
    }
    chans.push_back(t.dim(1));
    total += t.dim(1);
  }
  const std::size_t hw = h * w;
  std::vector<double> out(n * total * hw);
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const double* src = parts[k].data().data() + b * chans[k] * hw;
      std::copy(src, src + chans[k] * hw, out.data() + (b * total + offset) * hw);
      offset += chans[k];
    }
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return Tensor::make_result({n, total, h, w}, std::move(out), std::move(parents),
                             [=](detail::Node& self) {
    for (std::size_t b = 0; b < n; ++b) {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < chans.size(); ++k) {
        auto& pn = *self.parents[k];
        if (pn.requires_grad) {
          double* dst = pn.ensure_grad().data() + b * chans[k] * hw;
          const double* src = self.grad.data() + (b * total + offset) * hw;
          for (std::size_t i = 0; i < chans[k] * hw; ++i) dst[i] += src[i];
        }
        offset += chans[k];
      }
    }
  });
}

Tensor flatten(const Tensor& x) {
  if (!x.defined() || x.rank() < 2) throw ShapeError("flatten: expected rank >= 2 input");
  const std::size_t n = x.dim(0);
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::make_result({n, x.size() / n}, std::move(out), {x}, [](detail::Node& self) {
    double* gx = self.parents[0]->ensure_grad().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor columns(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank(x, 2, "columns");
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (count == 0 || begin + count > m) {
    throw ShapeError("columns: range [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") outside " + shape_string(x.shape()));
  }
  std::vector<double> out(n * count);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < count; ++j) out[b * count + j] = x[b * m + begin + j];
  return Tensor::make_result({n, count}, std::move(out), {x}, [=](detail::Node& self) {
    double* gx = self.parents[0]->ensure_grad().data();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t j = 0; j < count; ++j) gx[b * m + begin + j] += self.grad[b * count + j];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      double* g = p->ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return Tensor::make_result(x.shape(), std::move(out), {x}, [factor](detail::Node& self) {
    double* g = self.parents[0]->ensure_grad().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += factor * self.grad[i];
  });
}

std::vector<double> softmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "softmax_rows");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> out(n * k);
  for (std::size_t b = 0; b < n; ++b) {
    const double* row = logits.data().data() + b * k;
    double m = row[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (out[b * k + j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < k; ++j) out[b * k + j] /= s;
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(n));
  }
  std::vector<int> lab(labels.begin(), labels.end());
  for (int l : lab) {
    if (l < 0 || static_cast<std::size_t>(l) >= k) {
      throw ValueError("cross_entropy: label " + std::to_string(l) + " outside [0," +
                       std::to_string(k - 1) + "]");
    }
  }
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    const double* row = logits.data().data() + b * k;
    total += log_sum_exp(row, k) - row[lab[b]];
  }
  return Tensor::make_result({1}, {total / static_cast<double>(n)}, {logits},
                             [=](detail::Node& self) {
    auto& ln = *self.parents[0];
    double* g = ln.ensure_grad().data();
    const double scale_ = self.grad[0] / static_cast<double>(n);
    for (std::size_t b = 0; b < n; ++b) {
      const double* row = ln.data.data() + b * k;
      const double lse = log_sum_exp(row, k);
      for (std::size_t j = 0; j < k; ++j) {
        const double p = std::exp(row[j] - lse);
        g[b * k + j] += scale_ * (p - (static_cast<int>(j) == lab[b] ? 1.0 : 0.0));
      }
    }
  });
}

Tensor mse(const Tensor& pred, std::span<const double> targets) {
  if (!pred.defined()) throw ShapeError("mse: undefined prediction");
  const std::size_t n = pred.size();
  if (targets.size() != n) {
    throw ShapeError("mse: " + std::to_string(n) + " predictions vs " +
                     std::to_string(targets.size()) + " targets");
  }
  std::vector<double> t(targets.begin(), targets.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pred[i] - t[i];
    total += d * d;
  }
  return Tensor::make_result({1}, {total / static_cast<double>(n)}, {pred},
                             [=](detail::Node& self) {
    auto& pn = *self.parents[0];
    double* g = pn.ensure_grad().data();
    const double s = 2.0 * self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) g[i] += s * (pn.data[i] - t[i]);
  });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
  if (!logits.defined() || logits.size() != targets.size()) {
    throw ShapeError("bce_with_logits: logits/targets size mismatch");
  }
  std::vector<double> t(targets.begin(), targets.end());
  const std::size_t m = t.size();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double z = logits[i];
    // log(1 + e^z) - t z, stable for both signs.
    total += std::max(z, 0.0) - z * t[i] + std::log1p(std::exp(-std::abs(z)));
  }
  return Tensor::make_result({1}, {total / static_cast<double>(m)}, {logits},
                             [=](detail::Node& self) {
    auto& ln = *self.parents[0];
    double* g = ln.ensure_grad().data();
    const double s = self.grad[0] / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) {
      const double z = ln.data[i];
      const double p = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      g[i] += s * (p - t[i]);
    }
  });
}

}  // namespace klg::ops
