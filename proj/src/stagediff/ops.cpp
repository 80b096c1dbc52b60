// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include "stagediff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "stagediff/error.hpp"

namespace stagediff::ops {
namespace {

using Mat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<Mat>;
using MapCM = Eigen::Map<const Mat>;

using Arr = Eigen::Map<Eigen::Array<real, Eigen::Dynamic, 1>>;
using ConstArr = Eigen::Map<const Eigen::Array<real, Eigen::Dynamic, 1>>;

using ag::Node;

void require_rank(const Var& x, std::size_t rank, const char* op) {
  check(x.shape().size() == rank, ErrorCode::kShapeMismatch,
        std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(x.shape()));
}

void require_same(const Var& a, const Var& b, const char* op) {
  check(a.shape() == b.shape(), ErrorCode::kShapeMismatch,
        std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

real sigmoid(real v) {
  return v >= 0 ? real(1) / (real(1) + std::exp(-v)) : std::exp(v) / (real(1) + std::exp(v));
}

struct ConvGeom {
  int ci, h, w, k, stride, pad, ho, wo;
  bool direct() const { return k == 1 && stride == 1 && pad == 0; }
};

// Valid output columns [lo, hi) for kernel offset kx along a row of width w.
inline void valid_cols(const ConvGeom& g, int kx, int& lo, int& hi) {
  lo = 0;
  while (lo < g.wo && lo * g.stride - g.pad + kx < 0) ++lo;
  hi = g.wo;
  while (hi > lo && (hi - 1) * g.stride - g.pad + kx >= g.w) --hi;
}

void im2col(const real* x, const ConvGeom& g, real* cols) {
  const int hw_out = g.ho * g.wo;
  for (int c = 0; c < g.ci; ++c) {
    const real* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        real* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * hw_out;
        int lo, hi;
        valid_cols(g, kx, lo, hi);
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          real* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, real(0));
            continue;
          }
          const real* src = xc + iy * g.w - g.pad + kx;
          std::fill(dst, dst + lo, real(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + g.wo, real(0));
        }
      }
    }
  }
}

void col2im_add(const real* cols, const ConvGeom& g, real* dx) {
  const int hw_out = g.ho * g.wo;
  for (int c = 0; c < g.ci; ++c) {
    real* dc = dx + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const real* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * hw_out;
        int lo, hi;
        valid_cols(g, kx, lo, hi);
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          real* dst = dc + iy * g.w - g.pad + kx;
          const real* src = row + oy * g.wo;
          if (g.stride == 1) {
            for (int ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  const int n = x.dim(0), co = weight.dim(0), k = weight.dim(2);
  check(weight.dim(1) == x.dim(1) && weight.dim(3) == k, ErrorCode::kShapeMismatch,
        "conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  ConvGeom g{x.dim(1), x.dim(2), x.dim(3), k, stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - k) / stride + 1;
  g.wo = (g.w + 2 * pad - k) / stride + 1;
  check(g.ho > 0 && g.wo > 0, ErrorCode::kShapeMismatch, "conv2d: empty output");
  if (bias.defined()) check(static_cast<int>(bias.size()) == co, ErrorCode::kShapeMismatch, "conv2d: bias size");

  const int rows = g.ci * k * k;
  const int hw_out = g.ho * g.wo;
  const std::size_t in_stride = static_cast<std::size_t>(g.ci) * g.h * g.w;
  const std::size_t out_stride = static_cast<std::size_t>(co) * hw_out;

  Buffer out(static_cast<std::size_t>(n) * out_stride);
  Buffer cols(g.direct() ? 0 : static_cast<std::size_t>(rows) * hw_out);
  MapCM w(weight.data().data(), co, rows);
  for (int s = 0; s < n; ++s) {
    const real* xs = x.data().data() + s * in_stride;
    const real* colp = xs;
    if (!g.direct()) {
      im2col(xs, g, cols.data());
      colp = cols.data();
    }
    MapM o(out.data() + s * out_stride, co, hw_out);
    o.noalias() = w * MapCM(colp, rows, hw_out);
    if (bias.defined()) {
      for (int c = 0; c < co; ++c) o.row(c).array() += bias.data()[c];
    }
  }

  auto xn = x.ptr(), wn = weight.ptr(), bn = bias.defined() ? bias.ptr() : nullptr;
  return ag::make_result(
      {n, co, g.ho, g.wo}, std::move(out), {x, weight, bias},
      [xn, wn, bn, g, n, co, rows, hw_out, in_stride, out_stride](const Node& self) {
        Buffer cols(g.direct() ? 0 : static_cast<std::size_t>(rows) * hw_out);
        Buffer dcols(static_cast<std::size_t>(rows) * hw_out);
        MapCM w(wn->value.data(), co, rows);
        for (int s = 0; s < n; ++s) {
          MapCM dy(self.grad.data() + s * out_stride, co, hw_out);
          const real* xs = xn->value.data() + s * in_stride;
          if (wn->requires_grad) {
            const real* colp = xs;
            if (!g.direct()) {
              im2col(xs, g, cols.data());
              colp = cols.data();
            }
            MapM dw(wn->grad_buffer().data(), co, rows);
            dw.noalias() += dy * MapCM(colp, rows, hw_out).transpose();
          }
          if (bn && bn->requires_grad) {
            auto& db = bn->grad_buffer();
            for (int c = 0; c < co; ++c) db[c] += dy.row(c).sum();
          }
          if (xn->requires_grad) {
            real* dxs = xn->grad_buffer().data() + s * in_stride;
            if (g.direct()) {
              MapM dx(dxs, rows, hw_out);
              dx.noalias() += w.transpose() * dy;
            } else {
              MapM dc(dcols.data(), rows, hw_out);
              dc.noalias() = w.transpose() * dy;
              col2im_add(dcols.data(), g, dxs);
            }
          }
        }
      });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, real eps) {
  require_rank(x, 4, "group_norm");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  check(groups > 0 && c % groups == 0, ErrorCode::kShapeMismatch, "group_norm: channels not divisible by groups");
  check(static_cast<int>(gamma.size()) == c && static_cast<int>(beta.size()) == c, ErrorCode::kShapeMismatch,
        "group_norm: affine size");
  const int cg = c / groups;
  const auto m = static_cast<Eigen::Index>(cg) * hw;

  // xhat is kept for the backward pass.
  Buffer xhat(x.size()), out(x.size());
  Buffer rstd(static_cast<std::size_t>(n) * groups);
  for (int s = 0; s < n; ++s) {
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t base = (static_cast<std::size_t>(s) * c + gi * cg) * hw;
      ConstArr xg(x.data().data() + base, m);
      const double mu = xg.template cast<double>().mean();
      const double var = (xg.template cast<double>() - mu).square().mean();
      const real r = static_cast<real>(1.0 / std::sqrt(var + eps));
      rstd[s * groups + gi] = r;
      Arr xh(xhat.data() + base, m);
      xh = (xg - static_cast<real>(mu)) * r;
      for (int cc = 0; cc < cg; ++cc) {
        const int ch = gi * cg + cc;
        const std::size_t off = base + static_cast<std::size_t>(cc) * hw;
        Arr(out.data() + off, hw) = ConstArr(xhat.data() + off, hw) * gamma.data()[ch] + beta.data()[ch];
      }
    }
  }

  auto xn = x.ptr(), gn = gamma.ptr(), bn = beta.ptr();
  return ag::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, n, c, hw, groups, cg, m, xhat = std::move(xhat), rstd = std::move(rstd)](const Node& self) {
        real* dx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
        real* dg = gn->requires_grad ? gn->grad_buffer().data() : nullptr;
        real* db = bn->requires_grad ? bn->grad_buffer().data() : nullptr;
        Buffer dxh(static_cast<std::size_t>(m));
        for (int s = 0; s < n; ++s) {
          for (int gi = 0; gi < groups; ++gi) {
            const std::size_t base = (static_cast<std::size_t>(s) * c + gi * cg) * hw;
            for (int cc = 0; cc < cg; ++cc) {
              const int ch = gi * cg + cc;
              const std::size_t off = base + static_cast<std::size_t>(cc) * hw;
              ConstArr dy(self.grad.data() + off, hw), xh(xhat.data() + off, hw);
              if (dg) dg[ch] += (dy * xh).sum();
              if (db) db[ch] += dy.sum();
              Arr(dxh.data() + static_cast<std::size_t>(cc) * hw, hw) = dy * gn->value[ch];
            }
            if (!dx) continue;
            ConstArr d(dxh.data(), m), xh(xhat.data() + base, m);
            const real mean_d = static_cast<real>(d.template cast<double>().mean());
            const real mean_dx = static_cast<real>((d * xh).template cast<double>().mean());
            Arr(dx + base, m) += rstd[s * groups + gi] * (d - mean_d - xh * mean_dx);
          }
        }
      });
}

Var silu(const Var& x) {
  const auto n = static_cast<Eigen::Index>(x.size());
  Buffer out(x.size());
  Buffer sig(x.size());
  ConstArr xv(x.data().data(), n);
  Arr s(sig.data(), n);
  s = real(1) / (real(1) + (-xv).exp());
  Arr(out.data(), n) = xv * s;
  auto xn = x.ptr();
  return ag::make_result(x.shape(), std::move(out), {x}, [xn, n, sig = std::move(sig)](const Node& self) {
    ConstArr s(sig.data(), n), xv(xn->value.data(), n), g(self.grad.data(), n);
    Arr(xn->grad_buffer().data(), n) += g * s * (real(1) + xv * (real(1) - s));
  });
}

Var tanh(const Var& x) {
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.data()[i]);
  auto xn = x.ptr();
  return ag::make_result(x.shape(), out, {x}, [xn, out](const Node& self) {
    auto& dx = xn->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * (real(1) - out[i] * out[i]);
  });
}

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Buffer out(a.size());
  const auto len = static_cast<Eigen::Index>(a.size());
  Arr(out.data(), len) = ConstArr(a.data().data(), len) + ConstArr(b.data().data(), len);
  auto an = a.ptr(), bn = b.ptr();
  return ag::make_result(a.shape(), std::move(out), {a, b}, [an, bn](const Node& self) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      const auto len = static_cast<Eigen::Index>(self.grad.size());
      Arr(p->grad_buffer().data(), len) += ConstArr(self.grad.data(), len);
    }
  });
}

Var scale(const Var& x, real s) {
  Buffer out(x.size());
  const auto len = static_cast<Eigen::Index>(out.size());
  Arr(out.data(), len) = ConstArr(x.data().data(), len) * s;
  auto xn = x.ptr();
  return ag::make_result(x.shape(), std::move(out), {x}, [xn, s, len](const Node& self) {
    Arr(xn->grad_buffer().data(), len) += ConstArr(self.grad.data(), len) * s;
  });
}

Var add_channel_bias(const Var& x, const Var& v) {
  require_rank(x, 4, "add_channel_bias");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  check(v.shape() == Shape{n, c}, ErrorCode::kShapeMismatch,
        "add_channel_bias: bias " + shape_str(v.shape()) + " vs input " + shape_str(x.shape()));
  Buffer out(x.size());
  for (int s = 0; s < n; ++s)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
      const real b = v.data()[s * c + ch];
      for (int i = 0; i < hw; ++i) out[off + i] = x.data()[off + i] + b;
    }
  auto xn = x.ptr(), vn = v.ptr();
  return ag::make_result(x.shape(), std::move(out), {x, v}, [xn, vn, n, c, hw](const Node& self) {
    if (xn->requires_grad) {
      auto& d = xn->grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    }
    if (vn->requires_grad) {
      auto& d = vn->grad_buffer();
      for (int s = 0; s < n; ++s)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
          real acc = 0;
          for (int i = 0; i < hw; ++i) acc += self.grad[off + i];
          d[s * c + ch] += acc;
        }
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  const int n = x.dim(0), in = x.dim(1), outd = weight.dim(0);
  check(weight.dim(1) == in, ErrorCode::kShapeMismatch, "linear: weight/input mismatch");
  Buffer out(static_cast<std::size_t>(n) * outd);
  MapM o(out.data(), n, outd);
  o.noalias() = MapCM(x.data().data(), n, in) * MapCM(weight.data().data(), outd, in).transpose();
  if (bias.defined())
    for (int s = 0; s < n; ++s) o.row(s) += Eigen::Map<const Eigen::Matrix<real, 1, Eigen::Dynamic>>(bias.data().data(), outd);
  auto xn = x.ptr(), wn = weight.ptr(), bn = bias.defined() ? bias.ptr() : nullptr;
  return ag::make_result({n, outd}, std::move(out), {x, weight, bias}, [xn, wn, bn, n, in, outd](const Node& self) {
    MapCM dy(self.grad.data(), n, outd);
    if (xn->requires_grad) {
      MapM dx(xn->grad_buffer().data(), n, in);
      dx.noalias() += dy * MapCM(wn->value.data(), outd, in);
    }
    if (wn->requires_grad) {
      MapM dw(wn->grad_buffer().data(), outd, in);
      dw.noalias() += dy.transpose() * MapCM(xn->value.data(), n, in);
    }
    if (bn && bn->requires_grad) {
      auto& db = bn->grad_buffer();
      for (int j = 0; j < outd; ++j) db[j] += dy.col(j).sum();
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3), ErrorCode::kShapeMismatch,
        "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  const std::size_t sa = static_cast<std::size_t>(ca) * hw, sb = static_cast<std::size_t>(cb) * hw;
  Buffer out(a.size() + b.size());
  for (int s = 0; s < n; ++s) {
    std::copy_n(a.data().data() + s * sa, sa, out.data() + s * (sa + sb));
    std::copy_n(b.data().data() + s * sb, sb, out.data() + s * (sa + sb) + sa);
  }
  auto an = a.ptr(), bn = b.ptr();
  return ag::make_result({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b}, [an, bn, n, sa, sb](const Node& self) {
    for (int s = 0; s < n; ++s) {
      const real* g = self.grad.data() + s * (sa + sb);
      if (an->requires_grad) {
        real* d = an->grad_buffer().data() + s * sa;
        for (std::size_t i = 0; i < sa; ++i) d[i] += g[i];
      }
      if (bn->requires_grad) {
        real* d = bn->grad_buffer().data() + s * sb;
        for (std::size_t i = 0; i < sb; ++i) d[i] += g[sa + i];
      }
    }
  });
}

Var upsample_nearest2x(const Var& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const int nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Buffer out(x.size() * 4);
  for (int p = 0; p < nc; ++p) {
    const real* src = x.data().data() + static_cast<std::size_t>(p) * h * w;
    real* dst = out.data() + static_cast<std::size_t>(p) * h * w * 4;
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
  }
  auto xn = x.ptr();
  return ag::make_result({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x}, [xn, nc, h, w](const Node& self) {
    auto& d = xn->grad_buffer();
    for (int p = 0; p < nc; ++p) {
      const real* g = self.grad.data() + static_cast<std::size_t>(p) * h * w * 4;
      real* dp = d.data() + static_cast<std::size_t>(p) * h * w;
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) dp[(y / 2) * w + xx / 2] += g[y * 2 * w + xx];
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  check(numel(shape) == x.size(), ErrorCode::kShapeMismatch,
        "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto xn = x.ptr();
  return ag::make_result(std::move(shape), Buffer(x.data().begin(), x.data().end()), {x},
                         [xn](const Node& self) {
                           auto& d = xn->grad_buffer();
                           for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
                         });
}

Var bmm(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const int batch = a.dim(0);
  check(b.dim(0) == batch, ErrorCode::kShapeMismatch, "bmm: batch mismatch");
  const int ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  const int m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const int kb = trans_b ? bc : br, nn = trans_b ? br : bc;
  check(k == kb, ErrorCode::kShapeMismatch, "bmm: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t sa = static_cast<std::size_t>(ar) * ac, sb = static_cast<std::size_t>(br) * bc,
                    sc = static_cast<std::size_t>(m) * nn;
  Buffer out(batch * sc);
  for (int i = 0; i < batch; ++i) {
    MapCM am(a.data().data() + i * sa, ar, ac);
    MapCM bm(b.data().data() + i * sb, br, bc);
    MapM cm(out.data() + i * sc, m, nn);
    if (trans_a && trans_b) cm.noalias() = am.transpose() * bm.transpose();
    else if (trans_a) cm.noalias() = am.transpose() * bm;
    else if (trans_b) cm.noalias() = am * bm.transpose();
    else cm.noalias() = am * bm;
  }
  auto an = a.ptr(), bn = b.ptr();
  return ag::make_result(
      {batch, m, nn}, std::move(out), {a, b},
      [an, bn, batch, ar, ac, br, bc, m, nn, sa, sb, sc, trans_a, trans_b](const Node& self) {
        for (int i = 0; i < batch; ++i) {
          MapCM dc(self.grad.data() + i * sc, m, nn);
          MapCM am(an->value.data() + i * sa, ar, ac);
          MapCM bm(bn->value.data() + i * sb, br, bc);
          if (an->requires_grad) {
            MapM da(an->grad_buffer().data() + i * sa, ar, ac);
            // dA_op = dC * op(B)^T; undo the transpose of A if needed.
            if (!trans_a) {
              if (trans_b) da.noalias() += dc * bm;
              else da.noalias() += dc * bm.transpose();
            } else {
              if (trans_b) da.noalias() += bm.transpose() * dc.transpose();
              else da.noalias() += bm * dc.transpose();
            }
          }
          if (bn->requires_grad) {
            MapM db(bn->grad_buffer().data() + i * sb, br, bc);
            // dB_op = op(A)^T * dC
            if (!trans_b) {
              if (trans_a) db.noalias() += am * dc;
              else db.noalias() += am.transpose() * dc;
            } else {
              if (trans_a) db.noalias() += dc.transpose() * am.transpose();
              else db.noalias() += dc.transpose() * am;
            }
          }
        }
      });
}

Var softmax_lastdim(const Var& x, real scale) {
  const int cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  Buffer out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    ConstArr src(x.data().data() + r * cols, cols);
    Arr dst(out.data() + r * cols, cols);
    dst = ((src - src.maxCoeff()) * scale).exp();
    dst /= dst.sum();
  }
  auto xn = x.ptr();
  return ag::make_result(x.shape(), std::move(out), {x}, [xn, rows, cols, scale](const Node& self) {
    real* d = xn->grad_buffer().data();
    for (std::size_t r = 0; r < rows; ++r) {
      ConstArr y(self.value.data() + r * cols, cols), g(self.grad.data() + r * cols, cols);
      const real dot = (g * y).sum();
      Arr(d + r * cols, cols) += scale * y * (g - dot);
    }
  });
}

Var mse_loss(const Var& pred, const std::vector<real>& target) {
  check(pred.size() == target.size(), ErrorCode::kShapeMismatch, "mse_loss: shape mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = static_cast<double>(pred.data()[i]) - target[i];
    acc += d * d;
  }
  const std::size_t n = target.size();
  auto pn = pred.ptr();
  return ag::make_result({1}, {static_cast<real>(acc / static_cast<double>(n))}, {pred},
                         [pn, target, n](const Node& self) {
                           auto& d = pn->grad_buffer();
                           const real k = self.grad[0] * real(2) / static_cast<real>(n);
                           for (std::size_t i = 0; i < n; ++i) d[i] += k * (pn->value[i] - target[i]);
                         });
}

Var soft_dice_loss(const Var& logits, const std::vector<real>& mask, real smooth) {
  check(logits.size() == mask.size(), ErrorCode::kShapeMismatch, "soft_dice_loss: shape mismatch");
  const int n = logits.dim(0);
  const std::size_t per = logits.size() / static_cast<std::size_t>(n);
  Buffer p(logits.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid(logits.data()[i]);
  std::vector<double> inter(n, 0), denom(n, 0);
  double loss = 0;
  for (int s = 0; s < n; ++s) {
    for (std::size_t i = s * per; i < (s + 1) * per; ++i) {
      inter[s] += static_cast<double>(p[i]) * mask[i];
      denom[s] += static_cast<double>(p[i]) + mask[i];
    }
    denom[s] += smooth;
    loss += 1.0 - (2.0 * inter[s] + smooth) / denom[s];
  }
  auto ln = logits.ptr();
  return ag::make_result(
      {1}, {static_cast<real>(loss / n)}, {logits},
      [ln, mask, smooth, n, per, p = std::move(p), inter = std::move(inter), denom = std::move(denom)](const Node& self) {
        auto& d = ln->grad_buffer();
        for (int s = 0; s < n; ++s) {
          const double num = 2.0 * inter[s] + smooth;
          const double den2 = denom[s] * denom[s];
          for (std::size_t i = s * per; i < (s + 1) * per; ++i) {
            const double dp = -(2.0 * mask[i] * denom[s] - num) / den2 / n;
            d[i] += static_cast<real>(self.grad[0] * dp * p[i] * (1.0 - p[i]));
          }
        }
      });
}

Var bce_with_logits(const Var& logits, const std::vector<real>& mask) {
  check(logits.size() == mask.size(), ErrorCode::kShapeMismatch, "bce_with_logits: shape mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double l = logits.data()[i];
    acc += std::max(l, 0.0) - l * mask[i] + std::log1p(std::exp(-std::abs(l)));
  }
  const std::size_t n = mask.size();
  auto ln = logits.ptr();
  return ag::make_result({1}, {static_cast<real>(acc / static_cast<double>(n))}, {logits},
                         [ln, mask, n](const Node& self) {
                           auto& d = ln->grad_buffer();
                           const real k = self.grad[0] / static_cast<real>(n);
                           for (std::size_t i = 0; i < n; ++i) d[i] += k * (sigmoid(ln->value[i]) - mask[i]);
                         });
}

Var weighted_sum(const std::vector<std::pair<Var, real>>& terms) {
  real total = 0;
  std::vector<Var> inputs;
  std::vector<std::pair<std::shared_ptr<Node>, real>> held;
  for (const auto& [v, c] : terms) {
    check(v.size() == 1, ErrorCode::kShapeMismatch, "weighted_sum: terms must be scalars");
    total += c * v.item();
    inputs.push_back(v);
    held.emplace_back(v.ptr(), c);
  }
  return ag::make_result({1}, {total}, std::move(inputs), [held](const Node& self) {
    for (const auto& [p, c] : held)
      if (p->requires_grad) p->grad_buffer()[0] += c * self.grad[0];
  });
}

}  // namespace stagediff::ops
