#include "osreg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>

namespace osreg {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  require(a == b, std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

struct ConvGeom {
  std::size_t n, c, h, w, m, f, oh, ow;
  int stride, pad;
  std::size_t patch() const { return c * f * f; }
  std::size_t out_pixels() const { return oh * ow; }
  bool pointwise() const { return f == 1 && stride == 1 && pad == 0; }
};

// Valid output columns [lo, hi) for kernel offset k: those with
// 0 <= o*stride - pad + k < extent.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t extent, int stride, int pad,
                                                       std::size_t k) {
  const long off = static_cast<long>(k) - pad;
  const long s = stride;
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long hi = (static_cast<long>(extent) - off + s - 1) / s;
  hi = std::clamp(hi, 0L, static_cast<long>(out));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

template <typename T>
void im2col(const T* img, const ConvGeom& g, T* cols, std::size_t ld) {
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.f; ++ki)
      for (std::size_t kj = 0; kj < g.f; ++kj) {
        T* row = cols + ((c * g.f + ki) * g.f + kj) * ld;
        const auto [x0, x1] = valid_range(g.ow, g.w, g.stride, g.pad, kj);
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          T* dst = row + oy * g.ow;
          const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ki);
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, T{0});
            continue;
          }
          const T* src = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          std::fill(dst, dst + x0, T{0});
          const long base = static_cast<long>(kj) - g.pad;
          if (g.stride == 1) {
            std::copy(src + (static_cast<long>(x0) + base), src + (static_cast<long>(x1) + base), dst + x0);
          } else {
            for (std::size_t ox = x0; ox < x1; ++ox) dst[ox] = src[static_cast<long>(ox) * g.stride + base];
          }
          std::fill(dst + x1, dst + g.ow, T{0});
        }
      }
}

template <typename T>
void col2im(const T* cols, const ConvGeom& g, T* img, std::size_t ld) {
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.f; ++ki)
      for (std::size_t kj = 0; kj < g.f; ++kj) {
        const T* row = cols + ((c * g.f + ki) * g.f + kj) * ld;
        const auto [x0, x1] = valid_range(g.ow, g.w, g.stride, g.pad, kj);
        const long base = static_cast<long>(kj) - g.pad;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ki);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          const T* src = row + oy * g.ow;
          T* dst = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = x0; ox < x1; ++ox) dst[static_cast<long>(ox) * g.stride + base] += src[ox];
        }
      }
}

// im2col for one image into columns with row stride ld; for 1x1 kernels
// the image already is its column matrix.
template <typename T>
void lower(const T* img, const ConvGeom& g, T* cols, std::size_t ld) {
  if (!g.pointwise()) return im2col(img, g, cols, ld);
  const auto P = g.out_pixels();
  for (std::size_t c = 0; c < g.c; ++c) std::copy_n(img + c * P, P, cols + c * ld);
}

// Adjoint of lower(): accumulates columns back into the image.
template <typename T>
void raise(const T* cols, const ConvGeom& g, T* img, std::size_t ld) {
  if (!g.pointwise()) return col2im(cols, g, img, ld);
  const auto P = g.out_pixels();
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t p = 0; p < P; ++p) img[c * P + p] += cols[c * ld + p];
}

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::MaxPool2d: return "max_pool2d";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::Dense: return "dense";
    case OpKind::LeakyRelu: return "leaky_relu";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::Dropout: return "dropout";
    case OpKind::Softmax: return "softmax";
    case OpKind::ChannelMask: return "channel_mask";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::PickColumn: return "pick_column";
    case OpKind::CrossEntropyMasked: return "cross_entropy_masked";
    case OpKind::Consistency: return "consistency";
    case OpKind::Sntg: return "sntg";
    case OpKind::Amc: return "amc";
    case OpKind::SphereProject: return "sphere_project";
    case OpKind::OsLoss: return "os_loss";
  }
  return "unknown";
}

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, int stride, int pad) {
  const auto& xs = input.shape();
  const auto& ks = kernel.shape();
  require(xs.size() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(xs));
  require(ks.size() == 4, "conv2d: kernel must be [M,C,f,f], got " + shape_str(ks));
  require(ks[2] == ks[3], "conv2d: kernel must be square, got " + shape_str(ks));
  require(xs[1] == ks[1], "conv2d: input has " + std::to_string(xs[1]) +
                              " channels but kernel expects " + std::to_string(ks[1]));
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(pad >= 0, "conv2d: pad must be >= 0");
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], 0, 0, stride, pad};
  require(g.h + 2 * pad >= g.f && g.w + 2 * pad >= g.f,
          "conv2d: kernel " + std::to_string(g.f) + " larger than padded input " + shape_str(xs));
  g.oh = (g.h + 2 * pad - g.f) / stride + 1;
  g.ow = (g.w + 2 * pad - g.f) / stride + 1;

  // The whole batch is lowered to one [K, N*P] column matrix so that each
  // direction is a single GEMM.
  const auto P = g.out_pixels();
  const auto K = g.patch();
  const auto NP = g.n * P;
  const auto in_size = g.c * g.h * g.w;
  const T* x = input.value().data();
  CMapMat<T> kmat(kernel.value().data(), g.m, K);
  std::vector<T> cols(K * NP);
  for (std::size_t n = 0; n < g.n; ++n) lower(x + n * in_size, g, cols.data() + n * P, NP);
  RowMat<T> y = kmat * CMapMat<T>(cols.data(), K, NP);
  Tensor<T> out(Shape{g.n, g.m, g.oh, g.ow});
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.m; ++o)
      std::copy_n(y.data() + o * NP + n * P, P, out.data() + (n * g.m + o) * P);

  return input.graph().record(
      OpKind::Conv2d, {input, kernel}, std::move(out), [g](Graph<T>& gr, std::size_t self) {
        const auto& node = gr.node(self);
        const auto xi = node.inputs[0];
        const auto ki = node.inputs[1];
        const auto P = g.out_pixels();
        const auto K = g.patch();
        const auto NP = g.n * P;
        const auto in_size = g.c * g.h * g.w;
        const T* dy = gr.grad(self).data();
        RowMat<T> dout(g.m, NP);
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t o = 0; o < g.m; ++o)
            std::copy_n(dy + (n * g.m + o) * P, P, dout.data() + o * NP + n * P);
        if (gr.requires_grad(ki)) {
          const T* x = gr.value(xi).data();
          std::vector<T> cols(K * NP);
          for (std::size_t n = 0; n < g.n; ++n) lower(x + n * in_size, g, cols.data() + n * P, NP);
          MapMat<T>(gr.grad_buffer(ki).data(), g.m, K).noalias() +=
              dout * CMapMat<T>(cols.data(), K, NP).transpose();
        }
        if (gr.requires_grad(xi)) {
          CMapMat<T> kmat(gr.value(ki).data(), g.m, K);
          RowMat<T> dcols = kmat.transpose() * dout;
          T* dx = gr.grad_buffer(xi).data();
          for (std::size_t n = 0; n < g.n; ++n) raise(dcols.data() + n * P, g, dx + n * in_size, NP);
        }
      });
}

template <typename T>
Var<T> max_pool2d(Var<T> input, int window, int stride) {
  const auto& s = input.shape();
  require(s.size() == 4, "max_pool2d: input must be [N,C,H,W], got " + shape_str(s));
  require(window >= 1, "max_pool2d: window must be >= 1");
  require(stride >= 1, "max_pool2d: stride must be >= 1");
  const auto win = static_cast<std::size_t>(window);
  require(win <= s[2] && win <= s[3],
          "max_pool2d: window " + std::to_string(window) + " exceeds spatial extent " + shape_str(s));
  const std::size_t nc = s[0] * s[1], h = s[2], w = s[3];
  const std::size_t oh = (h - win) / stride + 1, ow = (w - win) / stride + 1;
  Tensor<T> out(Shape{s[0], s[1], oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const T* x = input.value().data();
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = p * h * w + (oy * stride) * w + ox * stride;
        for (std::size_t dy = 0; dy < win; ++dy)
          for (std::size_t dx = 0; dx < win; ++dx) {
            const std::size_t idx = p * h * w + (oy * stride + dy) * w + (ox * stride + dx);
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = x[best];
        (*argmax)[o] = best;
      }
  return input.graph().record(OpKind::MaxPool2d, {input}, std::move(out),
                              [argmax](Graph<T>& gr, std::size_t self) {
                                const auto xi = gr.node(self).inputs[0];
                                auto& dx = gr.grad_buffer(xi);
                                const auto& dy = gr.grad(self);
                                for (std::size_t o = 0; o < dy.size(); ++o) dx[(*argmax)[o]] += dy[o];
                              });
}

template <typename T>
Var<T> global_avg_pool(Var<T> input) {
  const auto& s = input.shape();
  require(s.size() == 4, "global_avg_pool: input must be [N,M,h,w], got " + shape_str(s));
  const std::size_t nm = s[0] * s[1], hw = s[2] * s[3];
  Tensor<T> out(Shape{s[0], s[1]});
  const T* x = input.value().data();
  for (std::size_t p = 0; p < nm; ++p) {
    T acc{0};
    for (std::size_t i = 0; i < hw; ++i) acc += x[p * hw + i];
    out[p] = acc / static_cast<T>(hw);
  }
  return input.graph().record(OpKind::GlobalAvgPool, {input}, std::move(out),
                              [nm, hw](Graph<T>& gr, std::size_t self) {
                                const auto xi = gr.node(self).inputs[0];
                                auto& dx = gr.grad_buffer(xi);
                                const auto& dy = gr.grad(self);
                                const T inv = T{1} / static_cast<T>(hw);
                                for (std::size_t p = 0; p < nm; ++p)
                                  for (std::size_t i = 0; i < hw; ++i) dx[p * hw + i] += dy[p] * inv;
                              });
}

template <typename T>
Var<T> dense(Var<T> input, Var<T> weight, Var<T> bias) {
  const auto& xs = input.shape();
  const auto& ws = weight.shape();
  const auto& bs = bias.shape();
  require(xs.size() == 2 && ws.size() == 2 && bs.size() == 1,
          "dense: expected [N,A] x [A,B] + [B], got " + shape_str(xs) + " " + shape_str(ws) + " " +
              shape_str(bs));
  require(xs[1] == ws[0], "dense: inner extents differ, " + shape_str(xs) + " x " + shape_str(ws));
  require(bs[0] == ws[1], "dense: bias " + shape_str(bs) + " does not match weight " + shape_str(ws));
  const std::size_t n = xs[0], a = xs[1], b = ws[1];
  Tensor<T> out(Shape{n, b});
  MapMat<T> o(out.data(), n, b);
  o.noalias() = CMapMat<T>(input.value().data(), n, a) * CMapMat<T>(weight.value().data(), a, b);
  o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.value().data(), b);
  return input.graph().record(
      OpKind::Dense, {input, weight, bias}, std::move(out), [n, a, b](Graph<T>& gr, std::size_t self) {
        const auto& node = gr.node(self);
        const auto xi = node.inputs[0], wi = node.inputs[1], bi = node.inputs[2];
        CMapMat<T> dy(gr.grad(self).data(), n, b);
        if (gr.requires_grad(xi))
          MapMat<T>(gr.grad_buffer(xi).data(), n, a).noalias() +=
              dy * CMapMat<T>(gr.value(wi).data(), a, b).transpose();
        if (gr.requires_grad(wi))
          MapMat<T>(gr.grad_buffer(wi).data(), a, b).noalias() +=
              CMapMat<T>(gr.value(xi).data(), n, a).transpose() * dy;
        if (gr.requires_grad(bi)) {
          auto& db = gr.grad_buffer(bi);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < b; ++j) db[j] += dy(i, j);
        }
      });
}

template <typename T>
Var<T> leaky_relu(Var<T> input, T alpha) {
  require(alpha >= T{0} && alpha < T{1}, "leaky_relu: alpha must be in [0,1)");
  Tensor<T> out = input.value();
  for (auto& v : out.values())
    if (!(v > T{0})) v *= alpha;
  return input.graph().record(OpKind::LeakyRelu, {input}, std::move(out),
                              [alpha](Graph<T>& gr, std::size_t self) {
                                const auto xi = gr.node(self).inputs[0];
                                const auto& x = gr.value(xi);
                                const auto& dy = gr.grad(self);
                                auto& dx = gr.grad_buffer(xi);
                                for (std::size_t i = 0; i < dy.size(); ++i)
                                  dx[i] += x[i] > T{0} ? dy[i] : alpha * dy[i];
                              });
}

template <typename T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormState<T>& state, Mode mode,
                  T eps, bool update_running) {
  const auto& s = input.shape();
  require(s.size() >= 2, "batch_norm: input must be [N,C,...], got " + shape_str(s));
  const std::size_t n = s[0], c = s[1];
  const std::size_t sp = input.value().size() / (n * c);
  require(gamma.value().size() == c && beta.value().size() == c,
          "batch_norm: gamma/beta must have " + std::to_string(c) + " entries");
  require(state.running_mean.size() == c && state.running_var.size() == c,
          "batch_norm: running statistics must have " + std::to_string(c) + " entries");
  require(eps >= T{0}, "batch_norm: eps must be >= 0");
  if (mode == Mode::Train)
    require(n >= 2, "batch_norm: train mode needs a batch of at least 2 (variance undefined)");

  const T* x = input.value().data();
  const T* gm = gamma.value().data();
  const T* bt = beta.value().data();
  const std::size_t count = n * sp;
  std::vector<T> mu(c), invstd(c);
  if (mode == Mode::Train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < sp; ++k) acc += x[(i * c + ch) * sp + k];
      const double m = acc / static_cast<double>(count);
      double var = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < sp; ++k) {
          const double d = x[(i * c + ch) * sp + k] - m;
          var += d * d;
        }
      var /= static_cast<double>(count);
      mu[ch] = static_cast<T>(m);
      invstd[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      if (update_running) {
        const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
        state.running_mean[ch] = state.momentum * state.running_mean[ch] +
                                 (T{1} - state.momentum) * static_cast<T>(m);
        state.running_var[ch] = state.momentum * state.running_var[ch] +
                                (T{1} - state.momentum) * static_cast<T>(unbiased);
      }
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = state.running_mean[ch];
      invstd[ch] = T{1} / std::sqrt(state.running_var[ch] + eps);
    }
  }

  Tensor<T> out(s);
  auto xhat = std::make_shared<std::vector<T>>(input.value().size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < sp; ++k) {
        const std::size_t idx = (i * c + ch) * sp + k;
        const T xh = (x[idx] - mu[ch]) * invstd[ch];
        (*xhat)[idx] = xh;
        out[idx] = gm[ch] * xh + bt[ch];
      }

  const bool batch_stats = mode == Mode::Train;
  return input.graph().record(
      OpKind::BatchNorm, {input, gamma, beta}, std::move(out),
      [xhat, invstd, n, c, sp, batch_stats](Graph<T>& gr, std::size_t self) {
        const auto& node = gr.node(self);
        const auto xi = node.inputs[0], gi = node.inputs[1], bi = node.inputs[2];
        const auto& dy = gr.grad(self);
        const T* gm = gr.value(gi).data();
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t k = 0; k < sp; ++k) {
              const std::size_t idx = (i * c + ch) * sp + k;
              sum_dy[ch] += dy[idx];
              sum_dy_xhat[ch] += dy[idx] * (*xhat)[idx];
            }
        if (gr.requires_grad(gi)) {
          auto& dg = gr.grad_buffer(gi);
          for (std::size_t ch = 0; ch < c; ++ch) dg[ch] += static_cast<T>(sum_dy_xhat[ch]);
        }
        if (gr.requires_grad(bi)) {
          auto& db = gr.grad_buffer(bi);
          for (std::size_t ch = 0; ch < c; ++ch) db[ch] += static_cast<T>(sum_dy[ch]);
        }
        if (!gr.requires_grad(xi)) return;
        auto& dx = gr.grad_buffer(xi);
        const double count = static_cast<double>(n * sp);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t k = 0; k < sp; ++k) {
              const std::size_t idx = (i * c + ch) * sp + k;
              if (batch_stats) {
                const double g = static_cast<double>(gm[ch]) * invstd[ch];
                dx[idx] += static_cast<T>(
                    g * (dy[idx] - sum_dy[ch] / count - (*xhat)[idx] * sum_dy_xhat[ch] / count));
              } else {
                dx[idx] += gm[ch] * invstd[ch] * dy[idx];
              }
            }
      });
}

template <typename T>
Var<T> dropout(Var<T> input, double rate, Rng& rng, Mode mode) {
  require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1), got " + std::to_string(rate));
  if (mode == Mode::Eval || rate == 0.0) return input;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(input.value().size());
  Tensor<T> out = input.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < rate ? T{0} : keep_scale;
    out[i] *= (*mask)[i];
  }
  return input.graph().record(OpKind::Dropout, {input}, std::move(out),
                              [mask](Graph<T>& gr, std::size_t self) {
                                const auto xi = gr.node(self).inputs[0];
                                const auto& dy = gr.grad(self);
                                auto& dx = gr.grad_buffer(xi);
                                for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * (*mask)[i];
                              });
}

template <typename T>
Var<T> softmax(Var<T> logits) {
  const auto& s = logits.shape();
  require(s.size() == 2, "softmax: logits must be [N,K], got " + shape_str(s));
  require(s[1] >= 2, "softmax: need at least 2 classes");
  const std::size_t n = s[0], k = s[1];
  Tensor<T> out(s);
  const T* z = logits.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    const T mx = *std::max_element(z + i * k, z + (i + 1) * k);
    T total{0};
    for (std::size_t j = 0; j < k; ++j) {
      out[i * k + j] = std::exp(z[i * k + j] - mx);
      total += out[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] /= total;
  }
  return logits.graph().record(OpKind::Softmax, {logits}, std::move(out),
                               [n, k](Graph<T>& gr, std::size_t self) {
                                 const auto zi = gr.node(self).inputs[0];
                                 const auto& y = gr.value(self);
                                 const auto& dy = gr.grad(self);
                                 auto& dz = gr.grad_buffer(zi);
                                 for (std::size_t i = 0; i < n; ++i) {
                                   T dot{0};
                                   for (std::size_t j = 0; j < k; ++j) dot += dy[i * k + j] * y[i * k + j];
                                   for (std::size_t j = 0; j < k; ++j)
                                     dz[i * k + j] += y[i * k + j] * (dy[i * k + j] - dot);
                                 }
                               });
}

template <typename T>
Var<T> channel_mask(Var<T> input, std::span<const T> mask) {
  const auto& s = input.shape();
  require(s.size() >= 2, "channel_mask: input must be [N,C,...], got " + shape_str(s));
  require(mask.size() == s[1], "channel_mask: mask length " + std::to_string(mask.size()) +
                                   " does not match " + std::to_string(s[1]) + " channels");
  const std::size_t n = s[0], c = s[1], sp = input.value().size() / (n * c);
  auto m = std::make_shared<std::vector<T>>(mask.begin(), mask.end());
  Tensor<T> out = input.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < sp; ++k) out[(i * c + ch) * sp + k] *= (*m)[ch];
  return input.graph().record(OpKind::ChannelMask, {input}, std::move(out),
                              [m, n, c, sp](Graph<T>& gr, std::size_t self) {
                                const auto xi = gr.node(self).inputs[0];
                                const auto& dy = gr.grad(self);
                                auto& dx = gr.grad_buffer(xi);
                                for (std::size_t i = 0; i < n; ++i)
                                  for (std::size_t ch = 0; ch < c; ++ch)
                                    for (std::size_t k = 0; k < sp; ++k) {
                                      const auto idx = (i * c + ch) * sp + k;
                                      dx[idx] += dy[idx] * (*m)[ch];
                                    }
                              });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.graph().record(OpKind::Add, {a, b}, std::move(out), [](Graph<T>& gr, std::size_t self) {
    const auto& node = gr.node(self);
    gr.accumulate(node.inputs[0], gr.grad(self));
    gr.accumulate(node.inputs[1], gr.grad(self));
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.graph().record(OpKind::Sub, {a, b}, std::move(out), [](Graph<T>& gr, std::size_t self) {
    const auto& node = gr.node(self);
    gr.accumulate(node.inputs[0], gr.grad(self));
    if (gr.requires_grad(node.inputs[1])) {
      auto& db = gr.grad_buffer(node.inputs[1]);
      const auto& dy = gr.grad(self);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.graph().record(OpKind::Mul, {a, b}, std::move(out), [](Graph<T>& gr, std::size_t self) {
    const auto& node = gr.node(self);
    const auto ai = node.inputs[0], bi = node.inputs[1];
    const auto& dy = gr.grad(self);
    if (gr.requires_grad(ai)) {
      auto& da = gr.grad_buffer(ai);
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * gr.value(bi)[i];
    }
    if (gr.requires_grad(bi)) {
      auto& db = gr.grad_buffer(bi);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * gr.value(ai)[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= factor;
  return a.graph().record(OpKind::Scale, {a}, std::move(out), [factor](Graph<T>& gr, std::size_t self) {
    const auto ai = gr.node(self).inputs[0];
    const auto& dy = gr.grad(self);
    auto& da = gr.grad_buffer(ai);
    for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * factor;
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T acc{0};
  for (auto v : a.value().values()) acc += v;
  return a.graph().record(OpKind::Sum, {a}, Tensor<T>::scalar(acc), [](Graph<T>& gr, std::size_t self) {
    const auto ai = gr.node(self).inputs[0];
    const T g = gr.grad(self)[0];
    auto& da = gr.grad_buffer(ai);
    for (auto& v : da.values()) v += g;
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const auto count = static_cast<T>(a.value().size());
  return scale(sum(a), T{1} / count);
}

template <typename T>
Var<T> pick_column(Var<T> matrix, std::size_t col) {
  const auto& s = matrix.shape();
  require(s.size() == 2, "pick_column: expected [N,K], got " + shape_str(s));
  require(col < s[1], "pick_column: column " + std::to_string(col) + " out of range for " + shape_str(s));
  const std::size_t n = s[0], k = s[1];
  Tensor<T> out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) out[i] = matrix.value()[i * k + col];
  return matrix.graph().record(OpKind::PickColumn, {matrix}, std::move(out),
                               [n, k, col](Graph<T>& gr, std::size_t self) {
                                 const auto mi = gr.node(self).inputs[0];
                                 const auto& dy = gr.grad(self);
                                 auto& dm = gr.grad_buffer(mi);
                                 for (std::size_t i = 0; i < n; ++i) dm[i * k + col] += dy[i];
                               });
}

#define OSREG_INSTANTIATE_OPS(T)                                                                   \
  template Var<T> conv2d(Var<T>, Var<T>, int, int);                                                \
  template Var<T> max_pool2d(Var<T>, int, int);                                                    \
  template Var<T> global_avg_pool(Var<T>);                                                         \
  template Var<T> dense(Var<T>, Var<T>, Var<T>);                                                   \
  template Var<T> leaky_relu(Var<T>, T);                                                           \
  template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, BatchNormState<T>&, Mode, T, bool);           \
  template Var<T> dropout(Var<T>, double, Rng&, Mode);                                             \
  template Var<T> softmax(Var<T>);                                                                 \
  template Var<T> channel_mask(Var<T>, std::span<const T>);                                        \
  template Var<T> add(Var<T>, Var<T>);                                                             \
  template Var<T> sub(Var<T>, Var<T>);                                                             \
  template Var<T> mul(Var<T>, Var<T>);                                                             \
  template Var<T> scale(Var<T>, T);                                                                \
  template Var<T> sum(Var<T>);                                                                     \
  template Var<T> mean(Var<T>);                                                                    \
  template Var<T> pick_column(Var<T>, std::size_t);

OSREG_INSTANTIATE_OPS(float)
OSREG_INSTANTIATE_OPS(double)

}  // namespace osreg
