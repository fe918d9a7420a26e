#pragma once

#include <algorithm>
#include <cstring>
#include <limits>
#include <span>

#include "ssdctx/tensor.hpp"

namespace ssdctx {

// Geometry of a (possibly dilated) convolution. Pairs are (height, width).
struct ConvGeom {
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
  int dil_h = 1, dil_w = 1;

  static ConvGeom make(int stride, int pad, int dilation = 1) {
    return {stride, stride, pad, pad, dilation, dilation};
  }
};

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapRowMat = Eigen::Map<RowMat<S>>;
template <class S>
using CMapRowMat = Eigen::Map<const RowMat<S>>;

inline Index conv_out_dim(Index in, int k, int s, int p, int d) {
  return (in + 2 * p - d * (k - 1) - 1) / s + 1;
}

// Column buffer layout: row-major (C*kh*kw) x (Ho*Wo); row k is contiguous
// over output positions so the stride-1 path reduces to memcpy.
template <class S>
void im2col(const S* x, Index C, Index H, Index W, int kh, int kw,
            const ConvGeom& g, Index Ho, Index Wo, S* col) {
  for (Index c = 0; c < C; ++c) {
    const S* plane = x + c * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        S* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (Index oh = 0; oh < Ho; ++oh) {
          Index ih = oh * g.stride_h - g.pad_h + Index(ki) * g.dil_h;
          S* dst = row + oh * Wo;
          if (ih < 0 || ih >= H) {
            std::fill(dst, dst + Wo, S(0));
            continue;
          }
          const S* src_row = plane + ih * W;
          if (g.stride_w == 1 && g.dil_w == 1) {
            Index iw0 = -g.pad_w + kj;
            Index lo = std::max<Index>(0, -iw0);
            Index hi = std::min<Index>(Wo, W - iw0);
            if (lo > 0) std::fill(dst, dst + std::min(lo, Wo), S(0));
            if (hi > lo) std::memcpy(dst + lo, src_row + iw0 + lo, (hi - lo) * sizeof(S));
            if (hi < Wo) std::fill(dst + std::max(hi, lo), dst + Wo, S(0));
          } else {
            for (Index ow = 0; ow < Wo; ++ow) {
              Index iw = ow * g.stride_w - g.pad_w + Index(kj) * g.dil_w;
              dst[ow] = (iw >= 0 && iw < W) ? src_row[iw] : S(0);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds the column buffer back onto the image.
template <class S>
void col2im(const S* col, Index C, Index H, Index W, int kh, int kw,
            const ConvGeom& g, Index Ho, Index Wo, S* x) {
  for (Index c = 0; c < C; ++c) {
    S* plane = x + c * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const S* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (Index oh = 0; oh < Ho; ++oh) {
          Index ih = oh * g.stride_h - g.pad_h + Index(ki) * g.dil_h;
          if (ih < 0 || ih >= H) continue;
          const S* src = row + oh * Wo;
          S* dst_row = plane + ih * W;
          if (g.stride_w == 1 && g.dil_w == 1) {
            Index iw0 = -g.pad_w + kj;
            Index lo = std::max<Index>(0, -iw0);
            Index hi = std::min<Index>(Wo, W - iw0);
            if (hi > lo)
              Eigen::Map<Eigen::ArrayX<S>>(dst_row + iw0 + lo, hi - lo) +=
                  Eigen::Map<const Eigen::ArrayX<S>>(src + lo, hi - lo);
          } else {
            for (Index ow = 0; ow < Wo; ++ow) {
              Index iw = ow * g.stride_w - g.pad_w + Index(kj) * g.dil_w;
              if (iw >= 0 && iw < W) dst_row[iw] += src[ow];
            }
          }
        }
      }
    }
  }
}

// Column buffers above ~64 MB are recomputed in backward instead of cached.
inline constexpr size_t kColCacheBytes = size_t(64) << 20;

// Reused per-thread scratch for column buffers; ids separate buffers that
// are alive at the same time inside one op.
template <class S>
S* scratch(int id, Index n) {
  thread_local std::array<Eigen::ArrayX<S>, 4> bufs;
  auto& b = bufs[size_t(id)];
  if (b.size() < n) b.resize(n);
  return b.data();
}

}  // namespace detail

// ============================================================================
// convolution
// ============================================================================

/// 2-d convolution over NCHW input. weight is (out_ch, in_ch, kh, kw); bias,
/// when defined, is (1, out_ch, 1, 1). Differentiable w.r.t. all three.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 const ConvGeom& g) {
  const Shape4 xs = x.shape(), ws = weight.shape();
  if (xs.c != ws.c)
    throw std::invalid_argument("conv2d: input channels " + std::to_string(xs.c) +
                                " != weight in_channels " + std::to_string(ws.c));
  if (g.stride_h < 1 || g.stride_w < 1 || g.pad_h < 0 || g.pad_w < 0)
    throw std::invalid_argument("conv2d: stride must be >= 1 and padding >= 0");
  const int kh = int(ws.h), kw = int(ws.w);
  const Index Ho = detail::conv_out_dim(xs.h, kh, g.stride_h, g.pad_h, g.dil_h);
  const Index Wo = detail::conv_out_dim(xs.w, kw, g.stride_w, g.pad_w, g.dil_w);
  if (Ho < 1 || Wo < 1)
    throw std::invalid_argument("conv2d: non-positive output size for input " + xs.str());
  if (bias.defined() && bias.numel() != ws.n)
    throw std::invalid_argument("conv2d: bias size mismatch");

  const Index Cout = ws.n, K = ws.c * kh * kw, HWo = Ho * Wo;
  const bool unit_kernel = (kh == 1 && kw == 1 && g.stride_h == 1 && g.stride_w == 1 &&
                            g.pad_h == 0 && g.pad_w == 0);

  Shape4 os{xs.n, Cout, Ho, Wo};

  const bool want_cache = grad_enabled() && x.requires_grad() && !unit_kernel &&
                          size_t(xs.n) * K * HWo * sizeof(S) <= detail::kColCacheBytes;
  auto cols = std::make_shared<std::vector<Eigen::ArrayX<S>>>();

  Tensor<S> result = Tensor<S>::make_op(
      os, {x, weight, bias.defined() ? bias : Tensor<S>{}},
      [x, weight, bias, g, kh, kw, Ho, Wo, cols, unit_kernel](auto& node) {
        const Shape4 xs = x.shape();
        const Index Cout = weight.shape().n, K = weight.shape().c * kh * kw, HWo = Ho * Wo;
        detail::CMapRowMat<S> Wm(weight.data(), Cout, K);
        const bool cached = !cols->empty();
        for (Index n = 0; n < xs.n; ++n) {
          detail::CMapRowMat<S> dOm(node.grad.data() + n * Cout * HWo, Cout, HWo);
          if (weight.requires_grad()) {
            const S* colp;
            if (unit_kernel) {
              colp = x.data() + n * xs.c * xs.h * xs.w;
            } else if (cached) {
              colp = (*cols)[n].data();
            } else {
              S* buf = detail::scratch<S>(0, K * HWo);
              detail::im2col(x.data() + n * xs.c * xs.h * xs.w, xs.c, xs.h, xs.w, kh, kw,
                             g, Ho, Wo, buf);
              colp = buf;
            }
            detail::CMapRowMat<S> Cm(colp, K, HWo);
            weight.node()->ensure_grad();
            detail::MapRowMat<S>(weight.node()->grad.data(), Cout, K).noalias() +=
                dOm * Cm.transpose();
          }
          if (x.requires_grad()) {
            x.node()->ensure_grad();
            S* dxp = x.node()->grad.data() + n * xs.c * xs.h * xs.w;
            if (unit_kernel) {
              detail::MapRowMat<S>(dxp, K, HWo).noalias() += Wm.transpose() * dOm;
            } else {
              S* dcol = detail::scratch<S>(1, K * HWo);
              detail::MapRowMat<S>(dcol, K, HWo).noalias() = Wm.transpose() * dOm;
              detail::col2im(dcol, xs.c, xs.h, xs.w, kh, kw, g, Ho, Wo, dxp);
            }
          }
          if (bias.defined() && bias.requires_grad()) {
            bias.node()->ensure_grad();
            Eigen::Map<Eigen::Vector<S, Eigen::Dynamic>>(bias.node()->grad.data(), Cout) +=
                dOm.rowwise().sum();
          }
        }
      });

  detail::CMapRowMat<S> Wm(weight.data(), Cout, K);
  for (Index n = 0; n < xs.n; ++n) {
    const S* xp = x.data() + n * xs.c * xs.h * xs.w;
    const S* colp;
    if (unit_kernel) {
      colp = xp;
    } else {
      S* buf;
      if (want_cache) {
        cols->emplace_back(K * HWo);
        buf = cols->back().data();
      } else {
        buf = detail::scratch<S>(0, K * HWo);
      }
      detail::im2col(xp, xs.c, xs.h, xs.w, kh, kw, g, Ho, Wo, buf);
      colp = buf;
    }
    detail::MapRowMat<S> Om(result.data() + n * Cout * HWo, Cout, HWo);
    detail::CMapRowMat<S> Cm(colp, K, HWo);
    Om.noalias() = Wm * Cm;
    if (bias.defined())
      Om.colwise() += Eigen::Map<const Eigen::Vector<S, Eigen::Dynamic>>(bias.data(), Cout);
  }
  result.check_finite("conv2d");
  return result;
}

// ============================================================================
// transposed convolution
// ============================================================================

namespace detail {

// Weight permutation used by the transposed convolution GEMM:
// (out,in,kh,kw) -> row-major (out*kh*kw, in).
template <class S>
Eigen::ArrayX<S> permute_deconv_weight(const Tensor<S>& w) {
  const Shape4 ws = w.shape();
  Eigen::ArrayX<S> wr(ws.numel());
  const Index Cout = ws.n, Cin = ws.c, kh = ws.h, kw = ws.w;
  for (Index co = 0; co < Cout; ++co)
    for (Index ci = 0; ci < Cin; ++ci)
      for (Index ki = 0; ki < kh; ++ki)
        for (Index kj = 0; kj < kw; ++kj)
          wr[(((co * kh + ki) * kw + kj)) * Cin + ci] =
              w.data()[((co * Cin + ci) * kh + ki) * kw + kj];
  return wr;
}

}  // namespace detail

/// Raw transposed convolution: output spatial size (H-1)*s - 2p + k per axis.
/// weight is (out_ch, in_ch, kh, kw) like conv2d.
template <class S>
Tensor<S> conv_transpose2d_raw(const Tensor<S>& x, const Tensor<S>& weight,
                               const Tensor<S>& bias, const ConvGeom& g) {
  const Shape4 xs = x.shape(), ws = weight.shape();
  if (xs.c != ws.c)
    throw std::invalid_argument("conv_transpose2d: input channels " + std::to_string(xs.c) +
                                " != weight in_channels " + std::to_string(ws.c));
  const int kh = int(ws.h), kw = int(ws.w);
  if (kh < 1 || kw < 1 || g.stride_h < 1 || g.stride_w < 1)
    throw std::invalid_argument("conv_transpose2d: degenerate kernel or stride");
  const Index Ho = (xs.h - 1) * g.stride_h - 2 * g.pad_h + kh;
  const Index Wo = (xs.w - 1) * g.stride_w - 2 * g.pad_w + kw;
  if (Ho < 1 || Wo < 1)
    throw std::invalid_argument("conv_transpose2d: non-positive output size");
  const Index Cout = ws.n, Cin = ws.c, Kp = Cout * kh * kw, HWi = xs.h * xs.w;

  Shape4 os{xs.n, Cout, Ho, Wo};
  // the permuted weight is shared between forward and backward
  auto wr = std::make_shared<Eigen::ArrayX<S>>(detail::permute_deconv_weight(weight));
  Tensor<S> result = Tensor<S>::make_op(
      os, {x, weight, bias.defined() ? bias : Tensor<S>{}},
      [x, weight, bias, g, kh, kw, Ho, Wo, wr](auto& node) {
        const Shape4 xs = x.shape(), ws = weight.shape();
        const Index Cout = ws.n, Cin = ws.c, Kp = Cout * kh * kw, HWi = xs.h * xs.w;
        S* dcolT = detail::scratch<S>(0, Kp * HWi);
        S* dwr = nullptr;
        if (weight.requires_grad()) {
          dwr = detail::scratch<S>(1, Kp * Cin);
          Eigen::Map<Eigen::ArrayX<S>>(dwr, Kp * Cin).setZero();
        }
        for (Index n = 0; n < xs.n; ++n) {
          const S* dop = node.grad.data() + n * Cout * Ho * Wo;
          // adjoint of the col2im scatter is an im2col gather
          detail::im2col(dop, Cout, Ho, Wo, kh, kw, g, xs.h, xs.w, dcolT);
          if (x.requires_grad()) {
            x.node()->ensure_grad();
            detail::MapRowMat<S>(x.node()->grad.data() + n * Cin * HWi, Cin, HWi)
                .noalias() +=
                detail::CMapRowMat<S>(wr->data(), Kp, Cin).transpose() *
                detail::CMapRowMat<S>(dcolT, Kp, HWi);
          }
          if (weight.requires_grad()) {
            detail::MapRowMat<S>(dwr, Kp, Cin).noalias() +=
                detail::CMapRowMat<S>(dcolT, Kp, HWi) *
                detail::CMapRowMat<S>(x.data() + n * Cin * HWi, Cin, HWi).transpose();
          }
          if (bias.defined() && bias.requires_grad()) {
            bias.node()->ensure_grad();
            for (Index c = 0; c < Cout; ++c)
              bias.node()->grad[c] +=
                  Eigen::Map<const Eigen::ArrayX<S>>(dop + c * Ho * Wo, Ho * Wo).sum();
          }
        }
        if (weight.requires_grad()) {
          weight.node()->ensure_grad();
          for (Index co = 0; co < Cout; ++co)
            for (Index ci = 0; ci < Cin; ++ci)
              for (Index ki = 0; ki < kh; ++ki)
                for (Index kj = 0; kj < kw; ++kj)
                  weight.node()->grad[((co * Cin + ci) * kh + ki) * kw + kj] +=
                      dwr[((co * kh + ki) * kw + kj) * Cin + ci];
        }
      });

  result.value().setZero();  // col2im accumulates
  S* colT = detail::scratch<S>(0, Kp * HWi);
  for (Index n = 0; n < xs.n; ++n) {
    detail::CMapRowMat<S> Xm(x.data() + n * Cin * HWi, Cin, HWi);
    detail::CMapRowMat<S> Wr(wr->data(), Kp, Cin);
    detail::MapRowMat<S>(colT, Kp, HWi).noalias() = Wr * Xm;
    S* op = result.data() + n * Cout * Ho * Wo;
    detail::col2im(colT, Cout, Ho, Wo, kh, kw, g, xs.h, xs.w, op);
    if (bias.defined()) {
      for (Index c = 0; c < Cout; ++c)
        Eigen::Map<Eigen::ArrayX<S>>(op + c * Ho * Wo, Ho * Wo) += bias.data()[c];
    }
  }
  result.check_finite("conv_transpose2d");
  return result;
}

/// Center-crops or zero-pads the spatial dims to exactly (th, tw).
template <class S>
Tensor<S> resize_center(const Tensor<S>& x, Index th, Index tw) {
  const Shape4 xs = x.shape();
  if (th < 1 || tw < 1) throw std::invalid_argument("resize_center: bad target");
  if (xs.h == th && xs.w == tw) return x;
  Shape4 os{xs.n, xs.c, th, tw};
  Tensor<S> result = Tensor<S>::make_op(os, {x}, [x, th, tw](auto& node) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    const Shape4 xs = x.shape();
    const Index oh = (xs.h - th) / 2, ow = (xs.w - tw) / 2;  // may be negative (pad)
    for (Index n = 0; n < xs.n; ++n)
      for (Index c = 0; c < xs.c; ++c) {
        const S* gp = node.grad.data() + (n * xs.c + c) * th * tw;
        S* dxp = x.node()->grad.data() + (n * xs.c + c) * xs.h * xs.w;
        for (Index i = 0; i < th; ++i) {
          Index si = i + oh;
          if (si < 0 || si >= xs.h) continue;
          for (Index j = 0; j < tw; ++j) {
            Index sj = j + ow;
            if (sj >= 0 && sj < xs.w) dxp[si * xs.w + sj] += gp[i * tw + j];
          }
        }
      }
  });
  result.value().setZero();  // padded border stays zero
  const Index oh = (xs.h - th) / 2, ow = (xs.w - tw) / 2;
  for (Index n = 0; n < xs.n; ++n)
    for (Index c = 0; c < xs.c; ++c) {
      const S* xp = x.data() + (n * xs.c + c) * xs.h * xs.w;
      S* rp = result.data() + (n * xs.c + c) * th * tw;
      for (Index i = 0; i < th; ++i) {
        Index si = i + oh;
        if (si < 0 || si >= xs.h) continue;
        for (Index j = 0; j < tw; ++j) {
          Index sj = j + ow;
          if (sj >= 0 && sj < xs.w) rp[i * tw + j] = xp[si * xs.w + sj];
        }
      }
    }
  return result;
}

/// Transposed convolution whose output is center-cropped or zero-padded to
/// exactly target (th, tw). Requires target >= input spatial size.
template <class S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& weight,
                           const Tensor<S>& bias, const ConvGeom& g, Index th, Index tw) {
  if (th < x.shape().h || tw < x.shape().w)
    throw std::invalid_argument("conv_transpose2d: target " + std::to_string(th) + "x" +
                                std::to_string(tw) + " smaller than input " +
                                x.shape().str());
  Tensor<S> raw = conv_transpose2d_raw(x, weight, bias, g);
  return resize_center(raw, th, tw);
}

// ============================================================================
// normalization
// ============================================================================

/// Batch normalization over (N, H, W) per channel. In training mode the batch
/// statistics are used and running moments updated in place (outside the
/// graph); in eval mode the op is a pure function of x and the running
/// moments. Biased variance normalizes; the running variance update uses the
/// unbiased estimate.
template <class S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     Tensor<S>& running_mean, Tensor<S>& running_var, bool training,
                     S momentum = S(0.1), S eps = S(1e-5)) {
  const Shape4 xs = x.shape();
  const Index C = xs.c;
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C)
    throw std::invalid_argument("batch_norm: channel mismatch (x has " +
                                std::to_string(C) + " channels)");
  const Index M = xs.n * xs.h * xs.w;  // elements per channel
  const Index HW = xs.h * xs.w;

  Eigen::ArrayX<S> mean(C), inv_std(C);
  if (training) {
    for (Index c = 0; c < C; ++c) {
      S sum = 0, sq = 0;
      for (Index n = 0; n < xs.n; ++n) {
        Eigen::Map<const Eigen::ArrayX<S>> plane(x.data() + (n * C + c) * HW, HW);
        sum += plane.sum();
        sq += plane.square().sum();
      }
      S mu = sum / S(M);
      S var = sq / S(M) - mu * mu;
      if (var < 0) var = 0;
      mean[c] = mu;
      inv_std[c] = S(1) / std::sqrt(var + eps);
      running_mean.value()[c] = (S(1) - momentum) * running_mean.value()[c] + momentum * mu;
      S var_unbiased = M > 1 ? var * S(M) / S(M - 1) : var;
      running_var.value()[c] =
          (S(1) - momentum) * running_var.value()[c] + momentum * var_unbiased;
    }
  } else {
    for (Index c = 0; c < C; ++c) {
      mean[c] = running_mean.value()[c];
      inv_std[c] = S(1) / std::sqrt(running_var.value()[c] + eps);
    }
  }

  auto xhat = std::make_shared<Eigen::ArrayX<S>>(xs.numel());
  Tensor<S> result = Tensor<S>::make_op(
      xs, {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, training](auto& node) {
        const Shape4 xs = x.shape();
        const Index C = xs.c, HW = xs.h * xs.w, M = xs.n * HW;
        for (Index c = 0; c < C; ++c) {
          S g = gamma.value()[c];
          // per-channel reductions over the batch
          S sum_dy = 0, sum_dy_xhat = 0;
          for (Index n = 0; n < xs.n; ++n) {
            Index off = (n * C + c) * HW;
            Eigen::Map<const Eigen::ArrayX<S>> dy(node.grad.data() + off, HW);
            Eigen::Map<const Eigen::ArrayX<S>> xh(xhat->data() + off, HW);
            sum_dy += dy.sum();
            sum_dy_xhat += (dy * xh).sum();
          }
          if (gamma.requires_grad()) {
            gamma.node()->ensure_grad();
            gamma.node()->grad[c] += sum_dy_xhat;
          }
          if (beta.requires_grad()) {
            beta.node()->ensure_grad();
            beta.node()->grad[c] += sum_dy;
          }
          if (x.requires_grad()) {
            x.node()->ensure_grad();
            S k = g * inv_std[c];
            for (Index n = 0; n < xs.n; ++n) {
              Index off = (n * C + c) * HW;
              Eigen::Map<const Eigen::ArrayX<S>> dy(node.grad.data() + off, HW);
              Eigen::Map<const Eigen::ArrayX<S>> xh(xhat->data() + off, HW);
              Eigen::Map<Eigen::ArrayX<S>> dx(x.node()->grad.data() + off, HW);
              if (training)
                dx += k * (dy - sum_dy / S(M) - xh * (sum_dy_xhat / S(M)));
              else
                dx += k * dy;
            }
          }
        }
      });
  for (Index c = 0; c < C; ++c) {
    S g = gamma.value()[c], b = beta.value()[c], mu = mean[c], is = inv_std[c];
    for (Index n = 0; n < xs.n; ++n) {
      Index off = (n * C + c) * HW;
      Eigen::Map<const Eigen::ArrayX<S>> xp(x.data() + off, HW);
      Eigen::Map<Eigen::ArrayX<S>> xh(xhat->data() + off, HW);
      Eigen::Map<Eigen::ArrayX<S>> yp(result.data() + off, HW);
      xh = (xp - mu) * is;
      yp = g * xh + b;
    }
  }
  result.check_finite("batch_norm");
  return result;
}

/// Channelwise L2 normalization with learnable per-channel scale: each
/// spatial position's channel vector is divided by its (epsilon-guarded)
/// norm and multiplied by scale.
template <class S>
Tensor<S> l2_normalize_channels(const Tensor<S>& x, const Tensor<S>& scale,
                                S eps = S(1e-10)) {
  const Shape4 xs = x.shape();
  if (scale.numel() != xs.c)
    throw std::invalid_argument("l2_normalize_channels: scale length " +
                                std::to_string(scale.numel()) + " != channels " +
                                std::to_string(xs.c));
  const Index C = xs.c, HW = xs.h * xs.w;
  auto inv_norm = std::make_shared<Eigen::ArrayX<S>>(xs.n * HW);

  // all loops run per channel plane so memory access stays sequential
  Tensor<S> result = Tensor<S>::make_op(
      xs, {x, scale}, [x, scale, inv_norm](auto& node) {
        const Shape4 xs = x.shape();
        const Index C = xs.c, HW = xs.h * xs.w;
        Eigen::ArrayX<S> dot(HW);
        for (Index n = 0; n < xs.n; ++n) {
          const S* xp = x.data() + n * C * HW;
          const S* dyp = node.grad.data() + n * C * HW;
          Eigen::Map<const Eigen::ArrayX<S>> r(inv_norm->data() + n * HW, HW);
          dot.setZero();  // per position: sum_c dy[c] * s[c] * x[c]
          for (Index c = 0; c < C; ++c) {
            Eigen::Map<const Eigen::ArrayX<S>> dy(dyp + c * HW, HW);
            Eigen::Map<const Eigen::ArrayX<S>> xc(xp + c * HW, HW);
            dot += dy * xc * scale.value()[c];
            if (scale.requires_grad()) {
              scale.node()->ensure_grad();
              scale.node()->grad[c] += (dy * xc * r).sum();
            }
          }
          if (x.requires_grad()) {
            x.node()->ensure_grad();
            S* dxp = x.node()->grad.data() + n * C * HW;
            for (Index c = 0; c < C; ++c) {
              Eigen::Map<const Eigen::ArrayX<S>> dy(dyp + c * HW, HW);
              Eigen::Map<const Eigen::ArrayX<S>> xc(xp + c * HW, HW);
              Eigen::Map<Eigen::ArrayX<S>>(dxp + c * HW, HW) +=
                  scale.value()[c] * dy * r - xc * dot * r * r * r;
            }
          }
        }
      });
  for (Index n = 0; n < xs.n; ++n) {
    const S* xp = x.data() + n * C * HW;
    S* yp = result.data() + n * C * HW;
    Eigen::Map<Eigen::ArrayX<S>> r(inv_norm->data() + n * HW, HW);
    r.setZero();
    for (Index c = 0; c < C; ++c)
      r += Eigen::Map<const Eigen::ArrayX<S>>(xp + c * HW, HW).square();
    r = (r + eps).rsqrt();
    for (Index c = 0; c < C; ++c)
      Eigen::Map<Eigen::ArrayX<S>>(yp + c * HW, HW) =
          Eigen::Map<const Eigen::ArrayX<S>>(xp + c * HW, HW) * r * scale.value()[c];
  }
  result.check_finite("l2_normalize_channels");
  return result;
}

// ============================================================================
// activations
// ============================================================================

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> result = Tensor<S>::make_op(x.shape(), {x}, [x](auto& node) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    x.node()->grad += (x.value() > S(0)).select(node.grad, S(0));
  });
  result.value() = x.value().max(S(0));
  return result;
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> result = Tensor<S>::make_op(x.shape(), {x}, [x](auto& node) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    x.node()->grad += node.grad * node.value * (S(1) - node.value);
  });
  // overflow-safe in both tails; outputs pinned strictly inside (0,1) even
  // where exp underflows
  Eigen::ArrayX<S> t = (-x.value().abs()).exp();  // in (0,1]
  result.value() = (x.value() >= S(0))
                       .select(S(1) / (S(1) + t), t / (S(1) + t))
                       .max(std::numeric_limits<S>::min())
                       .min(S(1) - std::numeric_limits<S>::epsilon());
  result.check_finite("sigmoid");
  return result;
}

/// Softmax along one of the four axes, overflow-safe via max subtraction.
template <class S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  if (axis < 0 || axis > 3) throw std::invalid_argument("softmax: axis out of range");
  const Shape4 xs = x.shape();
  const Index dims[4] = {xs.n, xs.c, xs.h, xs.w};
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= dims[i];
  for (int i = axis + 1; i < 4; ++i) inner *= dims[i];
  const Index len = dims[axis];

  Tensor<S> result = Tensor<S>::make_op(xs, {x}, [x, outer, inner, len](auto& node) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    for (Index o = 0; o < outer; ++o)
      for (Index i = 0; i < inner; ++i) {
        const Index base = o * len * inner + i;
        S dot = 0;
        for (Index l = 0; l < len; ++l) {
          Index idx = base + l * inner;
          dot += node.value[idx] * node.grad[idx];
        }
        for (Index l = 0; l < len; ++l) {
          Index idx = base + l * inner;
          x.node()->grad[idx] += node.value[idx] * (node.grad[idx] - dot);
        }
      }
  });
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * len * inner + i;
      S m = -std::numeric_limits<S>::infinity();
      for (Index l = 0; l < len; ++l) m = std::max(m, x.value()[base + l * inner]);
      S denom = 0;
      for (Index l = 0; l < len; ++l) {
        Index idx = base + l * inner;
        S e = std::exp(x.value()[idx] - m);
        result.value()[idx] = e;
        denom += e;
      }
      for (Index l = 0; l < len; ++l) result.value()[base + l * inner] /= denom;
    }
  result.check_finite("softmax");
  return result;
}

// ============================================================================
// pooling / resampling
// ============================================================================

/// Max pooling. ceil_mode extends the output so partial windows at the
/// right/bottom edges (clamped to the input) are kept.
template <class S>
Tensor<S> max_pool2d(const Tensor<S>& x, int k, int stride, int pad = 0,
                     bool ceil_mode = false) {
  const Shape4 xs = x.shape();
  if (k < 1 || stride < 1) throw std::invalid_argument("max_pool2d: bad kernel/stride");
  auto out_dim = [&](Index in) {
    Index num = in + 2 * pad - k;
    Index o = ceil_mode ? (num + stride - 1) / stride + 1 : num / stride + 1;
    if (ceil_mode && (o - 1) * stride >= in + pad) --o;  // window fully in padding
    return o;
  };
  const Index Ho = out_dim(xs.h), Wo = out_dim(xs.w);
  if (Ho < 1 || Wo < 1) throw std::invalid_argument("max_pool2d: non-positive output");
  Shape4 os{xs.n, xs.c, Ho, Wo};

  auto argmax = std::make_shared<std::vector<Index>>(os.numel());
  Tensor<S> result = Tensor<S>::make_op(os, {x}, [x, argmax](auto& node) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    for (Index i = 0; i < node.grad.size(); ++i)
      x.node()->grad[(*argmax)[i]] += node.grad[i];
  });
  for (Index n = 0; n < xs.n; ++n)
    for (Index c = 0; c < xs.c; ++c) {
      const S* plane = x.data() + (n * xs.c + c) * xs.h * xs.w;
      const Index out_off = (n * xs.c + c) * Ho * Wo;
      for (Index oh = 0; oh < Ho; ++oh)
        for (Index ow = 0; ow < Wo; ++ow) {
          Index h0 = std::max<Index>(0, oh * stride - pad);
          Index w0 = std::max<Index>(0, ow * stride - pad);
          Index h1 = std::min<Index>(xs.h, oh * stride - pad + k);
          Index w1 = std::min<Index>(xs.w, ow * stride - pad + k);
          S best = -std::numeric_limits<S>::infinity();
          Index best_idx = h0 * xs.w + w0;
          for (Index ih = h0; ih < h1; ++ih)
            for (Index iw = w0; iw < w1; ++iw)
              if (plane[ih * xs.w + iw] > best) {
                best = plane[ih * xs.w + iw];
                best_idx = ih * xs.w + iw;
              }
          result.value()[out_off + oh * Wo + ow] = best;
          (*argmax)[out_off + oh * Wo + ow] = (n * xs.c + c) * xs.h * xs.w + best_idx;
        }
    }
  return result;
}

/// Nearest-neighbour resize to exactly (th, tw).
template <class S>
Tensor<S> upsample_nearest(const Tensor<S>& x, Index th, Index tw) {
  const Shape4 xs = x.shape();
  if (th < 1 || tw < 1) throw std::invalid_argument("upsample_nearest: bad target");
  Shape4 os{xs.n, xs.c, th, tw};
  Tensor<S> result = Tensor<S>::make_op(os, {x}, [x, th, tw](auto& node) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    const Shape4 xs = x.shape();
    for (Index n = 0; n < xs.n; ++n)
      for (Index c = 0; c < xs.c; ++c) {
        const S* gp = node.grad.data() + (n * xs.c + c) * th * tw;
        S* dxp = x.node()->grad.data() + (n * xs.c + c) * xs.h * xs.w;
        for (Index oh = 0; oh < th; ++oh) {
          Index ih = oh * xs.h / th;
          for (Index ow = 0; ow < tw; ++ow) dxp[ih * xs.w + ow * xs.w / tw] += gp[oh * tw + ow];
        }
      }
  });
  for (Index n = 0; n < xs.n; ++n)
    for (Index c = 0; c < xs.c; ++c) {
      const S* xp = x.data() + (n * xs.c + c) * xs.h * xs.w;
      S* rp = result.data() + (n * xs.c + c) * th * tw;
      for (Index oh = 0; oh < th; ++oh) {
        Index ih = oh * xs.h / th;
        for (Index ow = 0; ow < tw; ++ow) rp[oh * tw + ow] = xp[ih * xs.w + ow * xs.w / tw];
      }
    }
  return result;
}

// ============================================================================
// structural ops
// ============================================================================

/// Concatenates along the channel axis. Inputs must share batch and spatial
/// dims; output channel count is the sum of the inputs'.
template <class S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty input list");
  const Shape4 s0 = xs[0].shape();
  Index ctotal = 0;
  for (const auto& x : xs) {
    const Shape4 s = x.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
      throw std::invalid_argument("concat_channels: shape mismatch " + s.str() + " vs " +
                                  s0.str());
    ctotal += s.c;
  }
  Shape4 os{s0.n, ctotal, s0.h, s0.w};
  std::vector<Tensor<S>> parents(xs.begin(), xs.end());
  Tensor<S> result = Tensor<S>::make_op(os, parents, [xs, os](auto& node) {
    const Index HW = os.h * os.w;
    for (Index n = 0; n < os.n; ++n) {
      Index coff = 0;
      for (const auto& x : xs) {
        const Index cx = x.shape().c;
        if (x.requires_grad()) {
          x.node()->ensure_grad();
          Eigen::Map<Eigen::ArrayX<S>>(x.node()->grad.data() + n * cx * HW, cx * HW) +=
              Eigen::Map<const Eigen::ArrayX<S>>(
                  node.grad.data() + (n * os.c + coff) * HW, cx * HW);
        }
        coff += cx;
      }
    }
  });
  const Index HW = s0.h * s0.w;
  for (Index n = 0; n < s0.n; ++n) {
    Index coff = 0;
    for (const auto& x : xs) {
      const Index cx = x.shape().c;
      std::memcpy(result.data() + (n * ctotal + coff) * HW, x.data() + n * cx * HW,
                  cx * HW * sizeof(S));
      coff += cx;
    }
  }
  return result;
}

/// Copies channels [c0, c0+len) into a new tensor.
template <class S>
Tensor<S> slice_channels(const Tensor<S>& x, Index c0, Index len) {
  const Shape4 xs = x.shape();
  if (c0 < 0 || len < 1 || c0 + len > xs.c)
    throw std::invalid_argument("slice_channels: range [" + std::to_string(c0) + "," +
                                std::to_string(c0 + len) + ") out of " +
                                std::to_string(xs.c));
  Shape4 os{xs.n, len, xs.h, xs.w};
  Tensor<S> result = Tensor<S>::make_op(os, {x}, [x, c0, len](auto& node) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    const Shape4 xs = x.shape();
    const Index HW = xs.h * xs.w;
    for (Index n = 0; n < xs.n; ++n)
      Eigen::Map<Eigen::ArrayX<S>>(x.node()->grad.data() + (n * xs.c + c0) * HW,
                                   len * HW) +=
          Eigen::Map<const Eigen::ArrayX<S>>(node.grad.data() + n * len * HW, len * HW);
  });
  const Index HW = xs.h * xs.w;
  for (Index n = 0; n < xs.n; ++n)
    std::memcpy(result.data() + n * len * HW, x.data() + (n * xs.c + c0) * HW,
                len * HW * sizeof(S));
  return result;
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (!(a.shape() == b.shape()))
    throw std::invalid_argument("add: shape mismatch " + a.shape().str() + " vs " +
                                b.shape().str());
  Tensor<S> result = Tensor<S>::make_op(a.shape(), {a, b}, [a, b](auto& node) {
    if (a.requires_grad()) {
      a.node()->ensure_grad();
      a.node()->grad += node.grad;
    }
    if (b.requires_grad()) {
      b.node()->ensure_grad();
      b.node()->grad += node.grad;
    }
  });
  result.value() = a.value() + b.value();
  return result;
}

template <class S>
Tensor<S> elementwise_mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (!(a.shape() == b.shape()))
    throw std::invalid_argument("elementwise_mul: shape mismatch " + a.shape().str() +
                                " vs " + b.shape().str());
  Tensor<S> result = Tensor<S>::make_op(a.shape(), {a, b}, [a, b](auto& node) {
    if (a.requires_grad()) {
      a.node()->ensure_grad();
      a.node()->grad += node.grad * b.value();
    }
    if (b.requires_grad()) {
      b.node()->ensure_grad();
      b.node()->grad += node.grad * a.value();
    }
  });
  result.value() = a.value() * b.value();
  return result;
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& x, S v) {
  Tensor<S> result = Tensor<S>::make_op(x.shape(), {x}, [x](auto& node) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    x.node()->grad += node.grad;
  });
  result.value() = x.value() + v;
  return result;
}

/// Sum of all elements as a (1,1,1,1) tensor.
template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  Tensor<S> result = Tensor<S>::make_op({1, 1, 1, 1}, {x}, [x](auto& node) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    x.node()->grad += node.grad[0];
  });
  result.value()[0] = x.value().sum();
  return result;
}

/// Reorders a head map (N, A*k, H, W) into rows of k values per anchor:
/// (N, H*W*A, k, 1), anchors varying fastest within a cell, cells row-major.
template <class S>
Tensor<S> flatten_head(const Tensor<S>& x, Index k) {
  const Shape4 xs = x.shape();
  if (xs.c % k != 0)
    throw std::invalid_argument("flatten_head: channels " + std::to_string(xs.c) +
                                " not divisible by " + std::to_string(k));
  const Index A = xs.c / k, HW = xs.h * xs.w;
  Shape4 os{xs.n, HW * A, k, 1};
  Tensor<S> result = Tensor<S>::make_op(os, {x}, [x, k, A, HW](auto& node) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    const Shape4 xs = x.shape();
    for (Index n = 0; n < xs.n; ++n) {
      const S* gp = node.grad.data() + n * HW * A * k;
      S* dxp = x.node()->grad.data() + n * xs.c * HW;
      for (Index p = 0; p < HW; ++p)
        for (Index a = 0; a < A; ++a)
          for (Index j = 0; j < k; ++j)
            dxp[(a * k + j) * HW + p] += gp[(p * A + a) * k + j];
    }
  });
  for (Index n = 0; n < xs.n; ++n) {
    const S* xp = x.data() + n * xs.c * HW;
    S* rp = result.data() + n * HW * A * k;
    for (Index p = 0; p < HW; ++p)
      for (Index a = 0; a < A; ++a)
        for (Index j = 0; j < k; ++j) rp[(p * A + a) * k + j] = xp[(a * k + j) * HW + p];
  }
  return result;
}

}  // namespace ssdctx
