#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "densegrade/tensor.hpp"

namespace densegrade {

struct Stride2D {
  int h = 1;
  int w = 1;
};
struct Pad2D {
  int h = 0;
  int w = 0;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

template <typename S>
void require_rank(const TensorT<S>& t, std::size_t rank, const char* what) {
  require(t.defined() && t.shape().size() == rank,
          std::string(what) + ": expected rank " + std::to_string(rank) + " tensor, got " +
              (t.defined() ? shape_to_string(t.shape()) : std::string("<undefined>")));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_to_string(a.shape()) +
                                              " vs " + shape_to_string(b.shape()));
  std::vector<S> out(a.size());
  const S* pa = a.data();
  const S* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];

  auto an = a.node();
  auto bn = b.node();
  const bool need_a = a.requires_grad();
  const bool need_b = b.requires_grad();
  return detail::make_op_result<S>(
      "add", a.shape(), std::move(out), {a, b},
      [an, bn, need_a, need_b](typename TensorT<S>::Node& self) {
        const auto& g = self.ensure_grad();
        if (need_a) {
          auto& ga = an->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (need_b) {
          auto& gb = bn->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      });
}

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
  std::vector<S> out(x.size());
  const S* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] > S(0) ? px[i] : S(0);

  auto xn = x.node();
  return detail::make_op_result<S>(
      "relu", x.shape(), std::move(out), {x},
      [xn](typename TensorT<S>::Node& self) {
        const auto& g = self.ensure_grad();
        auto& gx = xn->ensure_grad();
        const S* px = xn->data.data();
        // subgradient at exactly 0 is 0
        for (std::size_t i = 0; i < g.size(); ++i)
          if (px[i] > S(0)) gx[i] += g[i];
      });
}

template <typename S>
TensorT<S> sum(const TensorT<S>& x) {
  double acc = 0.0;
  for (S v : x.values()) acc += v;
  auto xn = x.node();
  return detail::make_op_result<S>(
      "sum", Shape{1}, std::vector<S>{static_cast<S>(acc)}, {x},
      [xn](typename TensorT<S>::Node& self) {
        const S g = self.ensure_grad()[0];
        auto& gx = xn->ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
      });
}

// Scalar view of one element; backward scatters into that slot.
template <typename S>
TensorT<S> pick(const TensorT<S>& x, std::size_t flat_index) {
  detail::require(flat_index < x.size(),
                  "pick: index " + std::to_string(flat_index) + " out of range for " +
                      shape_to_string(x.shape()));
  auto xn = x.node();
  return detail::make_op_result<S>(
      "pick", Shape{1}, std::vector<S>{x.data()[flat_index]}, {x},
      [xn, flat_index](typename TensorT<S>::Node& self) {
        xn->ensure_grad()[flat_index] += self.ensure_grad()[0];
      });
}

// ---------------------------------------------------------------------------
// conv2d: N x C x H x W  (*)  O x C x kH x kW  ->  N x O x H' x W'
// cross-correlation convention, no kernel flip
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> conv2d(const TensorT<S>& input, const TensorT<S>& kernel, const TensorT<S>& bias,
                  Stride2D stride = {1, 1}, Pad2D pad = {0, 0}) {
  detail::require_rank(input, 4, "conv2d input");
  detail::require_rank(kernel, 4, "conv2d kernel");
  detail::require(stride.h > 0 && stride.w > 0, "conv2d: stride must be positive");
  detail::require(pad.h >= 0 && pad.w >= 0, "conv2d: padding must be non-negative");

  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t O = kernel.dim(0), KC = kernel.dim(1), KH = kernel.dim(2), KW = kernel.dim(3);
  detail::require(KC == C, "conv2d: kernel channels " + shape_to_string(kernel.shape()) +
                               " do not match input " + shape_to_string(input.shape()));
  if (bias.defined()) {
    detail::require(bias.shape() == Shape{O}, "conv2d: bias shape " +
                                                  shape_to_string(bias.shape()) +
                                                  " must be [" + std::to_string(O) + "]");
  }
  const long hp = static_cast<long>(H) + 2 * pad.h - static_cast<long>(KH);
  const long wp = static_cast<long>(W) + 2 * pad.w - static_cast<long>(KW);
  detail::require(hp >= 0 && wp >= 0,
                  "conv2d: kernel " + shape_to_string(kernel.shape()) +
                      " exceeds padded input " + shape_to_string(input.shape()) +
                      " (zero-size output)");
  const std::size_t OH = static_cast<std::size_t>(hp / stride.h) + 1;
  const std::size_t OW = static_cast<std::size_t>(wp / stride.w) + 1;

  std::vector<S> out(N * O * OH * OW);
  const S* in = input.data();
  const S* k = kernel.data();
  const S* b = bias.defined() ? bias.data() : nullptr;

  for (std::size_t n = 0; n < N; ++n) {
    const S* in_n = in + n * C * H * W;
    for (std::size_t o = 0; o < O; ++o) {
      const S* k_o = k + o * C * KH * KW;
      S* out_no = out.data() + (n * O + o) * OH * OW;
      const S b_o = b ? b[o] : S(0);
      for (std::size_t oh = 0; oh < OH; ++oh) {
        const long ih0 = static_cast<long>(oh) * stride.h - pad.h;
        for (std::size_t ow = 0; ow < OW; ++ow) {
          const long iw0 = static_cast<long>(ow) * stride.w - pad.w;
          S acc = b_o;
          for (std::size_t c = 0; c < C; ++c) {
            const S* in_nc = in_n + c * H * W;
            const S* k_oc = k_o + c * KH * KW;
            for (std::size_t kh = 0; kh < KH; ++kh) {
              const long ih = ih0 + static_cast<long>(kh);
              if (ih < 0 || ih >= static_cast<long>(H)) continue;
              const S* in_row = in_nc + static_cast<std::size_t>(ih) * W;
              const S* k_row = k_oc + kh * KW;
              for (std::size_t kw = 0; kw < KW; ++kw) {
                const long iw = iw0 + static_cast<long>(kw);
                if (iw < 0 || iw >= static_cast<long>(W)) continue;
                acc += in_row[iw] * k_row[kw];
              }
            }
          }
          out_no[oh * OW + ow] = acc;
        }
      }
    }
  }

  auto in_n = input.node();
  auto k_n = kernel.node();
  auto b_n = bias.defined() ? bias.node() : nullptr;
  const bool need_in = input.requires_grad();
  const bool need_k = kernel.requires_grad();
  const bool need_b = bias.defined() && bias.requires_grad();
  std::vector<TensorT<S>> inputs = {input, kernel};
  if (bias.defined()) inputs.push_back(bias);

  return detail::make_op_result<S>(
      "conv2d", Shape{N, O, OH, OW}, std::move(out), std::move(inputs),
      [in_n, k_n, b_n, need_in, need_k, need_b, N, C, H, W, O, KH, KW, OH, OW,
       stride, pad](typename TensorT<S>::Node& self) {
        const S* g = self.ensure_grad().data();
        const S* in = in_n->data.data();
        const S* k = k_n->data.data();
        S* gin = need_in ? in_n->ensure_grad().data() : nullptr;
        S* gk = need_k ? k_n->ensure_grad().data() : nullptr;
        S* gb = need_b ? b_n->ensure_grad().data() : nullptr;

        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t o = 0; o < O; ++o) {
            const S* g_no = g + (n * O + o) * OH * OW;
            const S* k_o = k + o * C * KH * KW;
            for (std::size_t oh = 0; oh < OH; ++oh) {
              const long ih0 = static_cast<long>(oh) * stride.h - pad.h;
              for (std::size_t ow = 0; ow < OW; ++ow) {
                const S go = g_no[oh * OW + ow];
                if (go == S(0)) continue;
                const long iw0 = static_cast<long>(ow) * stride.w - pad.w;
                if (gb) gb[o] += go;
                for (std::size_t c = 0; c < C; ++c) {
                  const std::size_t in_base = (n * C + c) * H * W;
                  const std::size_t k_base = o * C * KH * KW + c * KH * KW;
                  for (std::size_t kh = 0; kh < KH; ++kh) {
                    const long ih = ih0 + static_cast<long>(kh);
                    if (ih < 0 || ih >= static_cast<long>(H)) continue;
                    for (std::size_t kw = 0; kw < KW; ++kw) {
                      const long iw = iw0 + static_cast<long>(kw);
                      if (iw < 0 || iw >= static_cast<long>(W)) continue;
                      const std::size_t in_idx =
                          in_base + static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw);
                      if (gin) gin[in_idx] += go * k_o[c * KH * KW + kh * KW + kw];
                      if (gk) gk[k_base + kh * KW + kw] += go * in[in_idx];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

template <typename S>
TensorT<S> conv2d(const TensorT<S>& input, const TensorT<S>& kernel, Stride2D stride = {1, 1},
                  Pad2D pad = {0, 0}) {
  return conv2d(input, kernel, TensorT<S>(), stride, pad);
}

// ---------------------------------------------------------------------------
// batch normalization over N,H,W per channel
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> batch_norm(const TensorT<S>& input, const TensorT<S>& gamma, const TensorT<S>& beta,
                      TensorT<S>& running_mean, TensorT<S>& running_var, bool training,
                      double momentum = 0.1, double epsilon = 1e-5) {
  detail::require_rank(input, 4, "batch_norm input");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  detail::require(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
                  "batch_norm: gamma/beta must be [" + std::to_string(C) + "], got " +
                      shape_to_string(gamma.shape()) + " and " + shape_to_string(beta.shape()));
  detail::require(running_mean.shape() == Shape{C} && running_var.shape() == Shape{C},
                  "batch_norm: running stats must be [" + std::to_string(C) + "]");
  const std::size_t count = N * H * W;
  if (training)
    detail::require(count >= 2,
                    "batch_norm: train-mode variance over a single element is undefined "
                    "(N*H*W = " + std::to_string(count) + ")");

  const std::size_t plane = H * W;
  std::vector<S> out(input.size());
  std::vector<double> mean(C), inv_std(C);
  const S* in = input.data();
  const S* g = gamma.data();
  const S* bt = beta.data();

  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      double m = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const S* p = in + (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) m += p[i];
      }
      m /= static_cast<double>(count);
      double v = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const S* p = in + (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - m;
          v += d * d;
        }
      }
      v /= static_cast<double>(count);  // biased, consistent with what eval consumes
      mean[c] = m;
      inv_std[c] = 1.0 / std::sqrt(v + epsilon);
      running_mean.values()[c] =
          static_cast<S>((1.0 - momentum) * running_mean.values()[c] + momentum * m);
      running_var.values()[c] =
          static_cast<S>((1.0 - momentum) * running_var.values()[c] + momentum * v);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running_mean.values()[c];
      inv_std[c] = 1.0 / std::sqrt(static_cast<double>(running_var.values()[c]) + epsilon);
    }
  }

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const S* p = in + (n * C + c) * plane;
      S* q = out.data() + (n * C + c) * plane;
      const S scale = static_cast<S>(inv_std[c]) * g[c];
      const S shift = bt[c] - static_cast<S>(mean[c]) * scale;
      for (std::size_t i = 0; i < plane; ++i) q[i] = p[i] * scale + shift;
    }
  }

  auto in_n = input.node();
  auto g_n = gamma.node();
  auto b_n = beta.node();
  const bool need_in = input.requires_grad();
  const bool need_g = gamma.requires_grad();
  const bool need_b = beta.requires_grad();

  return detail::make_op_result<S>(
      "batch_norm", input.shape(), std::move(out), {input, gamma, beta},
      [in_n, g_n, b_n, need_in, need_g, need_b, N, C, plane, count, training,
       mean = std::move(mean), inv_std = std::move(inv_std)](typename TensorT<S>::Node& self) {
        const S* dy = self.ensure_grad().data();
        const S* in = in_n->data.data();
        const S* g = g_n->data.data();
        S* gin = need_in ? in_n->ensure_grad().data() : nullptr;
        S* gg = need_g ? g_n->ensure_grad().data() : nullptr;
        S* gb = need_b ? b_n->ensure_grad().data() : nullptr;

        for (std::size_t c = 0; c < C; ++c) {
          const double m = mean[c];
          const double is = inv_std[c];
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            const S* p = in + (n * C + c) * plane;
            const S* d = dy + (n * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy += d[i];
              sum_dy_xhat += d[i] * (p[i] - m) * is;
            }
          }
          if (gb) gb[c] += static_cast<S>(sum_dy);
          if (gg) gg[c] += static_cast<S>(sum_dy_xhat);
          if (!gin) continue;
          if (training) {
            const double inv_n = 1.0 / static_cast<double>(count);
            for (std::size_t n = 0; n < N; ++n) {
              const S* p = in + (n * C + c) * plane;
              const S* d = dy + (n * C + c) * plane;
              S* q = gin + (n * C + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                const double xhat = (p[i] - m) * is;
                q[i] += static_cast<S>(g[c] * is *
                                       (d[i] - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat));
              }
            }
          } else {
            // running stats are constants in eval mode
            for (std::size_t n = 0; n < N; ++n) {
              const S* d = dy + (n * C + c) * plane;
              S* q = gin + (n * C + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) q[i] += static_cast<S>(g[c] * is * d[i]);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

namespace detail {
template <typename S>
void check_pool_args(const TensorT<S>& x, Stride2D window, Stride2D stride, Pad2D pad) {
  require_rank(x, 4, "pool input");
  require(window.h > 0 && window.w > 0 && stride.h > 0 && stride.w > 0,
          "pool: window and stride must be positive");
  require(static_cast<long>(x.dim(2)) + 2 * pad.h >= window.h &&
              static_cast<long>(x.dim(3)) + 2 * pad.w >= window.w,
          "pool: window larger than (padded) input " + shape_to_string(x.shape()));
}
}  // namespace detail

template <typename S>
TensorT<S> avg_pool2d(const TensorT<S>& input, Stride2D window = {2, 2}, Stride2D stride = {2, 2}) {
  detail::check_pool_args(input, window, stride, {0, 0});
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t OH = (H - window.h) / stride.h + 1;
  const std::size_t OW = (W - window.w) / stride.w + 1;
  const S inv_area = S(1) / static_cast<S>(window.h * window.w);

  std::vector<S> out(N * C * OH * OW);
  const S* in = input.data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const S* p = in + nc * H * W;
    S* q = out.data() + nc * OH * OW;
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        S acc = S(0);
        for (int kh = 0; kh < window.h; ++kh)
          for (int kw = 0; kw < window.w; ++kw)
            acc += p[(oh * stride.h + kh) * W + ow * stride.w + kw];
        q[oh * OW + ow] = acc * inv_area;
      }
  }

  auto in_n = input.node();
  return detail::make_op_result<S>(
      "avg_pool2d", Shape{N, C, OH, OW}, std::move(out), {input},
      [in_n, N, C, H, W, OH, OW, window, stride, inv_area](typename TensorT<S>::Node& self) {
        const S* g = self.ensure_grad().data();
        S* gin = in_n->ensure_grad().data();
        for (std::size_t nc = 0; nc < N * C; ++nc) {
          const S* gq = g + nc * OH * OW;
          S* gp = gin + nc * H * W;
          for (std::size_t oh = 0; oh < OH; ++oh)
            for (std::size_t ow = 0; ow < OW; ++ow) {
              const S go = gq[oh * OW + ow] * inv_area;
              for (int kh = 0; kh < window.h; ++kh)
                for (int kw = 0; kw < window.w; ++kw)
                  gp[(oh * stride.h + kh) * W + ow * stride.w + kw] += go;
            }
        }
      });
}

template <typename S>
TensorT<S> max_pool2d(const TensorT<S>& input, Stride2D window, Stride2D stride,
                      Pad2D pad = {0, 0}) {
  detail::check_pool_args(input, window, stride, pad);
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t OH = (H + 2 * pad.h - window.h) / stride.h + 1;
  const std::size_t OW = (W + 2 * pad.w - window.w) / stride.w + 1;

  std::vector<S> out(N * C * OH * OW);
  // argmax recorded for the backward route; ties go to the first scan position
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const S* in = input.data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const S* p = in + nc * H * W;
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        S best = -std::numeric_limits<S>::infinity();
        std::size_t best_idx = 0;
        for (int kh = 0; kh < window.h; ++kh) {
          const long ih = static_cast<long>(oh) * stride.h - pad.h + kh;
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          for (int kw = 0; kw < window.w; ++kw) {
            const long iw = static_cast<long>(ow) * stride.w - pad.w + kw;
            if (iw < 0 || iw >= static_cast<long>(W)) continue;
            const std::size_t idx = static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw);
            if (p[idx] > best) {
              best = p[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o_idx = nc * OH * OW + oh * OW + ow;
        out[o_idx] = best;
        (*argmax)[o_idx] = nc * H * W + best_idx;
      }
  }

  auto in_n = input.node();
  return detail::make_op_result<S>(
      "max_pool2d", Shape{N, C, OH, OW}, std::move(out), {input},
      [in_n, argmax](typename TensorT<S>::Node& self) {
        const auto& g = self.ensure_grad();
        auto& gin = in_n->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gin[(*argmax)[i]] += g[i];
      });
}

// N x C x H x W  ->  N x C
template <typename S>
TensorT<S> global_avg_pool(const TensorT<S>& input) {
  detail::require_rank(input, 4, "global_avg_pool input");
  const std::size_t N = input.dim(0), C = input.dim(1), plane = input.dim(2) * input.dim(3);
  std::vector<S> out(N * C);
  const S* in = input.data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    double acc = 0.0;
    const S* p = in + nc * plane;
    for (std::size_t i = 0; i < plane; ++i) acc += p[i];
    out[nc] = static_cast<S>(acc / static_cast<double>(plane));
  }

  auto in_n = input.node();
  return detail::make_op_result<S>(
      "global_avg_pool", Shape{N, C}, std::move(out), {input},
      [in_n, plane](typename TensorT<S>::Node& self) {
        const auto& g = self.ensure_grad();
        auto& gin = in_n->ensure_grad();
        const S inv = S(1) / static_cast<S>(plane);
        for (std::size_t nc = 0; nc < g.size(); ++nc) {
          const S go = g[nc] * inv;
          S* gp = gin.data() + nc * plane;
          for (std::size_t i = 0; i < plane; ++i) gp[i] += go;
        }
      });
}

// ---------------------------------------------------------------------------
// channel concatenation, the dense-connectivity primitive
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> concat_channels(const std::vector<TensorT<S>>& inputs) {
  detail::require(!inputs.empty(), "concat_channels: empty input list");
  const std::size_t N = inputs[0].dim(0), H = inputs[0].dim(2), W = inputs[0].dim(3);
  std::size_t total_c = 0;
  for (const auto& t : inputs) {
    detail::require_rank(t, 4, "concat_channels input");
    detail::require(t.dim(0) == N && t.dim(2) == H && t.dim(3) == W,
                    "concat_channels: batch/spatial mismatch " + shape_to_string(t.shape()) +
                        " vs " + shape_to_string(inputs[0].shape()));
    total_c += t.dim(1);
  }

  const std::size_t plane = H * W;
  std::vector<S> out(N * total_c * plane);
  std::size_t c_off = 0;
  for (const auto& t : inputs) {
    const std::size_t c = t.dim(1);
    const S* p = t.data();
    for (std::size_t n = 0; n < N; ++n)
      std::copy(p + n * c * plane, p + (n + 1) * c * plane,
                out.data() + (n * total_c + c_off) * plane);
    c_off += c;
  }

  struct Piece {
    std::shared_ptr<typename TensorT<S>::Node> node;
    std::size_t c_off, c;
    bool need;
  };
  auto pieces = std::make_shared<std::vector<Piece>>();
  c_off = 0;
  for (const auto& t : inputs) {
    pieces->push_back({t.node(), c_off, t.dim(1), t.requires_grad()});
    c_off += t.dim(1);
  }

  return detail::make_op_result<S>(
      "concat_channels", Shape{N, total_c, H, W}, std::move(out), inputs,
      [pieces, N, total_c, plane](typename TensorT<S>::Node& self) {
        const S* g = self.ensure_grad().data();
        for (const auto& piece : *pieces) {
          if (!piece.need) continue;
          S* gp = piece.node->ensure_grad().data();
          for (std::size_t n = 0; n < N; ++n) {
            const S* src = g + (n * total_c + piece.c_off) * plane;
            S* dst = gp + n * piece.c * plane;
            for (std::size_t i = 0; i < piece.c * plane; ++i) dst[i] += src[i];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// affine head: (N x F) @ (F x K) + b
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> linear(const TensorT<S>& input, const TensorT<S>& weight, const TensorT<S>& bias) {
  detail::require_rank(input, 2, "linear input");
  detail::require_rank(weight, 2, "linear weight");
  const std::size_t N = input.dim(0), F = input.dim(1), K = weight.dim(1);
  detail::require(weight.dim(0) == F, "linear: shape mismatch " + shape_to_string(input.shape()) +
                                          " @ " + shape_to_string(weight.shape()));
  if (bias.defined())
    detail::require(bias.shape() == Shape{K},
                    "linear: bias shape " + shape_to_string(bias.shape()) + " must be [" +
                        std::to_string(K) + "]");

  std::vector<S> out(N * K);
  const S* x = input.data();
  const S* w = weight.data();
  const S* b = bias.defined() ? bias.data() : nullptr;
  for (std::size_t n = 0; n < N; ++n) {
    S* o = out.data() + n * K;
    for (std::size_t k = 0; k < K; ++k) o[k] = b ? b[k] : S(0);
    for (std::size_t f = 0; f < F; ++f) {
      const S xv = x[n * F + f];
      const S* wf = w + f * K;
      for (std::size_t k = 0; k < K; ++k) o[k] += xv * wf[k];
    }
  }

  auto x_n = input.node();
  auto w_n = weight.node();
  auto b_n = bias.defined() ? bias.node() : nullptr;
  const bool need_x = input.requires_grad();
  const bool need_w = weight.requires_grad();
  const bool need_b = bias.defined() && bias.requires_grad();
  std::vector<TensorT<S>> track = {input, weight};
  if (bias.defined()) track.push_back(bias);

  return detail::make_op_result<S>(
      "linear", Shape{N, K}, std::move(out), std::move(track),
      [x_n, w_n, b_n, need_x, need_w, need_b, N, F, K](typename TensorT<S>::Node& self) {
        const S* g = self.ensure_grad().data();
        const S* x = x_n->data.data();
        const S* w = w_n->data.data();
        S* gx = need_x ? x_n->ensure_grad().data() : nullptr;
        S* gw = need_w ? w_n->ensure_grad().data() : nullptr;
        S* gb = need_b ? b_n->ensure_grad().data() : nullptr;
        for (std::size_t n = 0; n < N; ++n) {
          const S* gn = g + n * K;
          if (gb)
            for (std::size_t k = 0; k < K; ++k) gb[k] += gn[k];
          for (std::size_t f = 0; f < F; ++f) {
            const S* wf = w + f * K;
            if (gx) {
              S acc = S(0);
              for (std::size_t k = 0; k < K; ++k) acc += gn[k] * wf[k];
              gx[n * F + f] += acc;
            }
            if (gw) {
              const S xv = x[n * F + f];
              S* gwf = gw + f * K;
              for (std::size_t k = 0; k < K; ++k) gwf[k] += xv * gn[k];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// fused softmax + mean cross-entropy; returns detached probabilities as well
// ---------------------------------------------------------------------------

template <typename S>
struct SoftmaxLoss {
  TensorT<S> loss;           // scalar, on the tape
  TensorT<S> probabilities;  // N x K, detached
};

template <typename S>
SoftmaxLoss<S> softmax_cross_entropy(const TensorT<S>& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "softmax_cross_entropy logits");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  detail::require(labels.size() == N, "softmax_cross_entropy: " + std::to_string(labels.size()) +
                                          " labels for batch of " + std::to_string(N));
  for (std::size_t n = 0; n < N; ++n)
    detail::require(labels[n] >= 0 && static_cast<std::size_t>(labels[n]) < K,
                    "softmax_cross_entropy: label " + std::to_string(labels[n]) +
                        " out of range [0," + std::to_string(K) + ")");

  std::vector<S> probs(N * K);
  const S* z = logits.data();
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const S* zn = z + n * K;
    S* pn = probs.data() + n * K;
    double mx = zn[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max<double>(mx, zn[k]);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double e = std::exp(zn[k] - mx);
      pn[k] = static_cast<S>(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (std::size_t k = 0; k < K; ++k) pn[k] = static_cast<S>(pn[k] * inv);
    total += -(static_cast<double>(zn[labels[n]]) - mx - std::log(sum));
  }

  auto probs_t = TensorT<S>::from_vector(Shape{N, K}, std::move(probs));
  auto z_n = logits.node();
  auto p_n = probs_t.node();
  std::vector<int> labels_copy(labels.begin(), labels.end());

  auto loss = detail::make_op_result<S>(
      "softmax_cross_entropy", Shape{1},
      std::vector<S>{static_cast<S>(total / static_cast<double>(N))}, {logits},
      [z_n, p_n, labels_copy = std::move(labels_copy), N, K](typename TensorT<S>::Node& self) {
        const S up = self.ensure_grad()[0];
        auto& gz = z_n->ensure_grad();
        const S* p = p_n->data.data();
        const S inv_n = S(1) / static_cast<S>(N);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t k = 0; k < K; ++k) {
            S d = p[n * K + k];
            if (static_cast<std::size_t>(labels_copy[n]) == k) d -= S(1);
            gz[n * K + k] += up * d * inv_n;
          }
      });
  return {std::move(loss), std::move(probs_t)};
}

}  // namespace densegrade
