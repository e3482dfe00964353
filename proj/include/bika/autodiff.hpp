#pragma once

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "bika/tensor.hpp"

namespace bika::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

namespace detail {

struct ConvDims {
  int n, c, h, w, oc, kh, kw, stride, pad, oh, ow;
};

inline ConvDims conv_dims(const Tensor& x, const Tensor& wt, int stride, int pad,
                          bool transposed) {
  check(x.rank() == 4 && wt.rank() == 4, "conv expects 4-D tensors");
  ConvDims d;
  d.n = static_cast<int>(x.dim(0));
  d.c = static_cast<int>(x.dim(1));
  d.h = static_cast<int>(x.dim(2));
  d.w = static_cast<int>(x.dim(3));
  d.kh = static_cast<int>(wt.dim(2));
  d.kw = static_cast<int>(wt.dim(3));
  d.stride = stride;
  d.pad = pad;
  if (!transposed) {
    check(wt.dim(1) == d.c, "conv weight input-channel mismatch");
    d.oc = static_cast<int>(wt.dim(0));
    check(d.h + 2 * pad >= d.kh && d.w + 2 * pad >= d.kw,
          "conv kernel larger than padded input");
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    check(d.oh >= 1 && d.ow >= 1, "conv output would be empty");
  } else {
    check(wt.dim(0) == d.c, "transposed conv weight input-channel mismatch");
    d.oc = static_cast<int>(wt.dim(1));
    d.oh = (d.h - 1) * stride - 2 * pad + d.kh;
    d.ow = (d.w - 1) * stride - 2 * pad + d.kw;
    check(d.oh >= 1 && d.ow >= 1, "transposed conv output would be empty");
  }
  return d;
}

// x sample (c, h, w) -> col (c*kh*kw, oh*ow), zero padding
inline void im2col(const double* x, int c, int h, int w, int kh, int kw, int stride, int pad,
                   int oh, int ow, double* col) {
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        double* row = col + (static_cast<size_t>(ch) * kh * kw + i * kw + j) *
                                (static_cast<size_t>(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
          const int y = oy * stride - pad + i;
          if (y < 0 || y >= h) {
            for (int ox = 0; ox < ow; ++ox) row[oy * ow + ox] = 0.0;
            continue;
          }
          const double* src = x + (static_cast<size_t>(ch) * h + y) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int xx = ox * stride - pad + j;
            row[oy * ow + ox] = (xx < 0 || xx >= w) ? 0.0 : src[xx];
          }
        }
      }
}

// col (c*kh*kw, oh*ow) scattered back into x sample (c, h, w), accumulating
inline void col2im_add(const double* col, int c, int h, int w, int kh, int kw, int stride,
                       int pad, int oh, int ow, double* x) {
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        const double* row = col + (static_cast<size_t>(ch) * kh * kw + i * kw + j) *
                                      (static_cast<size_t>(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
          const int y = oy * stride - pad + i;
          if (y < 0 || y >= h) continue;
          double* dst = x + (static_cast<size_t>(ch) * h + y) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int xx = ox * stride - pad + j;
            if (xx >= 0 && xx < w) dst[xx] += row[oy * ow + ox];
          }
        }
      }
}

}  // namespace detail

// Reverse-mode tape. Nodes are created in topological order by construction;
// backward() walks them in reverse. Values and gradients are plain Tensors.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int leaf(Tensor value, bool requires_grad) {
    Node n;
    n.val = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Tensor& val(int id) const { return nodes_[static_cast<size_t>(id)].val; }

  Tensor& grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty()) n.grad = Tensor(n.val.shape);
    return n.grad;
  }

  bool has_grad(int id) const { return !nodes_[static_cast<size_t>(id)].grad.data.empty(); }
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  void backward(int loss_id) {
    check(val(loss_id).numel() == 1, "backward expects a scalar loss");
    check(requires_grad(loss_id), "loss does not depend on any parameter");
    grad(loss_id).data[0] = 1.0;
    for (int i = loss_id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.backward && !n.grad.data.empty()) n.backward(*this);
    }
  }

  // ------------------------------------------------------------------ ops

  int conv2d(int x, int w, int b, int stride, int pad) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    const auto d = detail::conv_dims(xv, wv, stride, pad, false);
    if (b >= 0) check(val(b).numel() == d.oc, "conv bias size mismatch");
    Tensor out({d.n, d.oc, d.oh, d.ow});
    const int ckk = d.c * d.kh * d.kw;
    Tensor col({ckk, d.oh * d.ow});
    CMapMat wm(wv.data.data(), d.oc, ckk);
    for (int n = 0; n < d.n; ++n) {
      detail::im2col(xv.data.data() + static_cast<size_t>(n) * d.c * d.h * d.w, d.c, d.h, d.w,
                     d.kh, d.kw, stride, pad, d.oh, d.ow, col.data.data());
      CMapMat cm(col.data.data(), ckk, d.oh * d.ow);
      MapMat om(out.data.data() + static_cast<size_t>(n) * d.oc * d.oh * d.ow, d.oc,
                d.oh * d.ow);
      om.noalias() = wm * cm;
      if (b >= 0) om.colwise() += Eigen::Map<const Eigen::VectorXd>(val(b).data.data(), d.oc);
    }
    return make_node(std::move(out), {x, w, b}, [x, w, b, stride, pad, d](Tape& t) {
      const Tensor& g = t.grad_of_self_;
      const Tensor& xv = t.val(x);
      const Tensor& wv = t.val(w);
      const int ckk = d.c * d.kh * d.kw;
      Tensor col({ckk, d.oh * d.ow});
      if (t.requires_grad(w)) {
        MapMat dwm(t.grad(w).data.data(), d.oc, ckk);
        for (int n = 0; n < d.n; ++n) {
          detail::im2col(xv.data.data() + static_cast<size_t>(n) * d.c * d.h * d.w, d.c, d.h,
                         d.w, d.kh, d.kw, stride, pad, d.oh, d.ow, col.data.data());
          CMapMat cm(col.data.data(), ckk, d.oh * d.ow);
          CMapMat gm(g.data.data() + static_cast<size_t>(n) * d.oc * d.oh * d.ow, d.oc,
                     d.oh * d.ow);
          dwm.noalias() += gm * cm.transpose();
        }
      }
      if (b >= 0 && t.requires_grad(b)) {
        Tensor& db = t.grad(b);
        for (int n = 0; n < d.n; ++n)
          for (int oc = 0; oc < d.oc; ++oc) {
            const double* gp = g.data.data() +
                               (static_cast<size_t>(n) * d.oc + oc) * d.oh * d.ow;
            double s = 0.0;
            for (int i = 0; i < d.oh * d.ow; ++i) s += gp[i];
            db.data[static_cast<size_t>(oc)] += s;
          }
      }
      if (t.requires_grad(x)) {
        Tensor& dx = t.grad(x);
        CMapMat wm(wv.data.data(), d.oc, ckk);
        for (int n = 0; n < d.n; ++n) {
          CMapMat gm(g.data.data() + static_cast<size_t>(n) * d.oc * d.oh * d.ow, d.oc,
                     d.oh * d.ow);
          MapMat cm(col.data.data(), ckk, d.oh * d.ow);
          cm.noalias() = wm.transpose() * gm;
          detail::col2im_add(col.data.data(), d.c, d.h, d.w, d.kh, d.kw, stride, pad, d.oh,
                             d.ow, dx.data.data() + static_cast<size_t>(n) * d.c * d.h * d.w);
        }
      }
    });
  }

  // weight shape (in_ch, out_ch, kh, kw); output (h-1)*stride - 2*pad + kh
  int conv2d_transpose(int x, int w, int b, int stride, int pad) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    const auto d = detail::conv_dims(xv, wv, stride, pad, true);
    if (b >= 0) check(val(b).numel() == d.oc, "conv bias size mismatch");
    Tensor out({d.n, d.oc, d.oh, d.ow});
    const int ockk = d.oc * d.kh * d.kw;
    Tensor col({ockk, d.h * d.w});
    CMapMat wm(wv.data.data(), d.c, ockk);
    for (int n = 0; n < d.n; ++n) {
      CMapMat xm(xv.data.data() + static_cast<size_t>(n) * d.c * d.h * d.w, d.c, d.h * d.w);
      MapMat cm(col.data.data(), ockk, d.h * d.w);
      cm.noalias() = wm.transpose() * xm;
      detail::col2im_add(col.data.data(), d.oc, d.oh, d.ow, d.kh, d.kw, stride, pad, d.h, d.w,
                         out.data.data() + static_cast<size_t>(n) * d.oc * d.oh * d.ow);
      if (b >= 0) {
        MapMat om(out.data.data() + static_cast<size_t>(n) * d.oc * d.oh * d.ow, d.oc,
                  d.oh * d.ow);
        om.colwise() += Eigen::Map<const Eigen::VectorXd>(val(b).data.data(), d.oc);
      }
    }
    return make_node(std::move(out), {x, w, b}, [x, w, b, stride, pad, d](Tape& t) {
      const Tensor& g = t.grad_of_self_;  // (n, oc, oh, ow)
      const Tensor& xv = t.val(x);
      const Tensor& wv = t.val(w);
      const int ockk = d.oc * d.kh * d.kw;
      Tensor col({ockk, d.h * d.w});
      if (t.requires_grad(x)) {
        // dX = conv(g, w) with (oc_conv = c, ic_conv = oc)
        Tensor& dx = t.grad(x);
        CMapMat wm(wv.data.data(), d.c, ockk);
        for (int n = 0; n < d.n; ++n) {
          detail::im2col(g.data.data() + static_cast<size_t>(n) * d.oc * d.oh * d.ow, d.oc,
                         d.oh, d.ow, d.kh, d.kw, stride, pad, d.h, d.w, col.data.data());
          CMapMat cm(col.data.data(), ockk, d.h * d.w);
          MapMat dxm(dx.data.data() + static_cast<size_t>(n) * d.c * d.h * d.w, d.c,
                     d.h * d.w);
          dxm.noalias() += wm * cm;
        }
      }
      if (t.requires_grad(w)) {
        Tensor& dw = t.grad(w);
        MapMat dwm(dw.data.data(), d.c, ockk);
        for (int n = 0; n < d.n; ++n) {
          detail::im2col(g.data.data() + static_cast<size_t>(n) * d.oc * d.oh * d.ow, d.oc,
                         d.oh, d.ow, d.kh, d.kw, stride, pad, d.h, d.w, col.data.data());
          CMapMat cm(col.data.data(), ockk, d.h * d.w);
          CMapMat xm(xv.data.data() + static_cast<size_t>(n) * d.c * d.h * d.w, d.c,
                     d.h * d.w);
          dwm.noalias() += xm * cm.transpose();
        }
      }
      if (b >= 0 && t.requires_grad(b)) {
        Tensor& db = t.grad(b);
        for (int n = 0; n < d.n; ++n)
          for (int oc = 0; oc < d.oc; ++oc) {
            const double* gp = g.data.data() +
                               (static_cast<size_t>(n) * d.oc + oc) * d.oh * d.ow;
            double s = 0.0;
            for (int i = 0; i < d.oh * d.ow; ++i) s += gp[i];
            db.data[static_cast<size_t>(oc)] += s;
          }
      }
    });
  }

  // x (n, in), w (out, in), b (out) -> (n, out)
  int linear(int x, int w, int b) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    check(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(1),
          "linear shape mismatch");
    const int n = static_cast<int>(xv.dim(0)), in = static_cast<int>(xv.dim(1)),
              out_dim = static_cast<int>(wv.dim(0));
    if (b >= 0) check(val(b).numel() == out_dim, "linear bias size mismatch");
    Tensor out({n, out_dim});
    CMapMat xm(xv.data.data(), n, in);
    CMapMat wm(wv.data.data(), out_dim, in);
    MapMat om(out.data.data(), n, out_dim);
    om.noalias() = xm * wm.transpose();
    if (b >= 0)
      om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(val(b).data.data(), out_dim);
    return make_node(std::move(out), {x, w, b}, [x, w, b, n, in, out_dim](Tape& t) {
      const Tensor& g = t.grad_of_self_;
      CMapMat gm(g.data.data(), n, out_dim);
      if (t.requires_grad(x)) {
        MapMat dxm(t.grad(x).data.data(), n, in);
        CMapMat wm(t.val(w).data.data(), out_dim, in);
        dxm.noalias() += gm * wm;
      }
      if (t.requires_grad(w)) {
        MapMat dwm(t.grad(w).data.data(), out_dim, in);
        CMapMat xm(t.val(x).data.data(), n, in);
        dwm.noalias() += gm.transpose() * xm;
      }
      if (b >= 0 && t.requires_grad(b)) {
        Eigen::Map<Eigen::RowVectorXd> dbm(t.grad(b).data.data(), out_dim);
        dbm += gm.colwise().sum();
      }
    });
  }

  int relu(int x) {
    Tensor out = val(x);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return make_node(std::move(out), {x}, [x](Tape& t) {
      if (!t.requires_grad(x)) return;
      const Tensor& g = t.grad_of_self_;
      const Tensor& xv = t.val(x);
      Tensor& dx = t.grad(x);
      for (size_t i = 0; i < g.data.size(); ++i)
        if (xv.data[i] > 0.0) dx.data[i] += g.data[i];
    });
  }

  int leaky_relu(int x, double slope) {
    Tensor out = val(x);
    for (double& v : out.data) v = v > 0.0 ? v : slope * v;
    return make_node(std::move(out), {x}, [x, slope](Tape& t) {
      if (!t.requires_grad(x)) return;
      const Tensor& g = t.grad_of_self_;
      const Tensor& xv = t.val(x);
      Tensor& dx = t.grad(x);
      for (size_t i = 0; i < g.data.size(); ++i)
        dx.data[i] += (xv.data[i] > 0.0 ? 1.0 : slope) * g.data[i];
    });
  }

  int sigmoid(int x) {
    Tensor out = val(x);
    for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    const Tensor saved = out;
    return make_node(std::move(out), {x}, [x, saved](Tape& t) {
      if (!t.requires_grad(x)) return;
      const Tensor& g = t.grad_of_self_;
      Tensor& dx = t.grad(x);
      for (size_t i = 0; i < g.data.size(); ++i)
        dx.data[i] += saved.data[i] * (1.0 - saved.data[i]) * g.data[i];
    });
  }

  // ca*a + cb*b, elementwise
  int weighted_add(int a, double ca, int b, double cb) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check(av.same_shape(bv), "weighted_add shape mismatch");
    Tensor out(av.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = ca * av.data[i] + cb * bv.data[i];
    return make_node(std::move(out), {a, b}, [a, ca, b, cb](Tape& t) {
      const Tensor& g = t.grad_of_self_;
      if (t.requires_grad(a)) {
        Tensor& da = t.grad(a);
        for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += ca * g.data[i];
      }
      if (t.requires_grad(b)) {
        Tensor& db = t.grad(b);
        for (size_t i = 0; i < g.data.size(); ++i) db.data[i] += cb * g.data[i];
      }
    });
  }

  int add(int a, int b) { return weighted_add(a, 1.0, b, 1.0); }

  // a*x + c, elementwise with scalars
  int affine(int x, double a, double c) {
    Tensor out = val(x);
    for (double& v : out.data) v = a * v + c;
    return make_node(std::move(out), {x}, [x, a](Tape& t) {
      if (!t.requires_grad(x)) return;
      const Tensor& g = t.grad_of_self_;
      Tensor& dx = t.grad(x);
      for (size_t i = 0; i < g.data.size(); ++i) dx.data[i] += a * g.data[i];
    });
  }

  int square(int x) {
    Tensor out = val(x);
    for (double& v : out.data) v = v * v;
    return make_node(std::move(out), {x}, [x](Tape& t) {
      if (!t.requires_grad(x)) return;
      const Tensor& g = t.grad_of_self_;
      const Tensor& xv = t.val(x);
      Tensor& dx = t.grad(x);
      for (size_t i = 0; i < g.data.size(); ++i) dx.data[i] += 2.0 * xv.data[i] * g.data[i];
    });
  }

  // AdaIN: per (sample, channel), y = s * (x - mean)/sqrt(var + eps) + b.
  // Statistics are over spatial dims; s, b have shape (n, c).
  int adain(int x, int s, int b, double eps = 1e-5) {
    const Tensor& xv = val(x);
    check(xv.rank() == 4, "adain expects (n,c,h,w)");
    const int n = static_cast<int>(xv.dim(0)), c = static_cast<int>(xv.dim(1));
    const int m = static_cast<int>(xv.dim(2) * xv.dim(3));
    check(val(s).rank() == 2 && val(s).dim(0) == n && val(s).dim(1) == c,
          "adain scale shape mismatch");
    check(val(b).same_shape(val(s)), "adain bias shape mismatch");
    Tensor out(xv.shape);
    Tensor mean({n, c}), inv({n, c});
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const double* xp = xv.data.data() + (static_cast<size_t>(i) * c + ch) * m;
        double mu = 0.0;
        for (int k = 0; k < m; ++k) mu += xp[k];
        mu /= m;
        double var = 0.0;
        for (int k = 0; k < m; ++k) var += (xp[k] - mu) * (xp[k] - mu);
        var /= m;
        const double iv = 1.0 / std::sqrt(var + eps);
        mean.at(i, ch) = mu;
        inv.at(i, ch) = iv;
        const double sc = val(s).at(i, ch), bi = val(b).at(i, ch);
        double* op = out.data.data() + (static_cast<size_t>(i) * c + ch) * m;
        for (int k = 0; k < m; ++k) op[k] = sc * (xp[k] - mu) * iv + bi;
      }
    return make_node(std::move(out), {x, s, b},
                     [x, s, b, n, c, m, mean, inv](Tape& t) {
      const Tensor& g = t.grad_of_self_;
      const Tensor& xv = t.val(x);
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
          const double* xp = xv.data.data() + (static_cast<size_t>(i) * c + ch) * m;
          const double* gp = g.data.data() + (static_cast<size_t>(i) * c + ch) * m;
          const double mu = mean.at(i, ch), iv = inv.at(i, ch);
          const double sc = t.val(s).at(i, ch);
          double gsum = 0.0, gxhat = 0.0;
          for (int k = 0; k < m; ++k) {
            gsum += gp[k];
            gxhat += gp[k] * (xp[k] - mu) * iv;
          }
          if (t.requires_grad(s)) t.grad(s).at(i, ch) += gxhat;
          if (t.requires_grad(b)) t.grad(b).at(i, ch) += gsum;
          if (t.requires_grad(x)) {
            // dxhat = g*s; dx = iv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
            double* dxp = t.grad(x).data.data() + (static_cast<size_t>(i) * c + ch) * m;
            const double mean_dxhat = sc * gsum / m;
            const double mean_dxhat_xhat = sc * gxhat / m;
            for (int k = 0; k < m; ++k) {
              const double xhat = (xp[k] - mu) * iv;
              dxp[k] += iv * (sc * gp[k] - mean_dxhat - xhat * mean_dxhat_xhat);
            }
          }
        }
    });
  }

  int avg_pool(int x, int k) {
    const Tensor& xv = val(x);
    check(xv.rank() == 4, "avg_pool expects (n,c,h,w)");
    const int n = static_cast<int>(xv.dim(0)), c = static_cast<int>(xv.dim(1)),
              h = static_cast<int>(xv.dim(2)), w = static_cast<int>(xv.dim(3));
    check(h % k == 0 && w % k == 0, "avg_pool dims must be divisible by k");
    const int oh = h / k, ow = w / k;
    Tensor out({n, c, oh, ow});
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            double s = 0.0;
            for (int dy = 0; dy < k; ++dy)
              for (int dx = 0; dx < k; ++dx) s += xv.at(i, ch, oy * k + dy, ox * k + dx);
            out.at(i, ch, oy, ox) = s / (k * k);
          }
    return make_node(std::move(out), {x}, [x, k](Tape& t) {
      if (!t.requires_grad(x)) return;
      const Tensor& g = t.grad_of_self_;
      Tensor& dx = t.grad(x);
      const int n = static_cast<int>(g.dim(0)), c = static_cast<int>(g.dim(1)),
                oh = static_cast<int>(g.dim(2)), ow = static_cast<int>(g.dim(3));
      const double scale = 1.0 / (k * k);
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
          for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
              const double gv = g.at(i, ch, oy, ox) * scale;
              for (int dy = 0; dy < k; ++dy)
                for (int dx2 = 0; dx2 < k; ++dx2)
                  dx.at(i, ch, oy * k + dy, ox * k + dx2) += gv;
            }
    });
  }

  int concat_ch(int a, int b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check(av.rank() == 4 && bv.rank() == 4 && av.dim(0) == bv.dim(0) &&
              av.dim(2) == bv.dim(2) && av.dim(3) == bv.dim(3),
          "concat_ch shape mismatch");
    const int n = static_cast<int>(av.dim(0)), ca = static_cast<int>(av.dim(1)),
              cb = static_cast<int>(bv.dim(1)), h = static_cast<int>(av.dim(2)),
              w = static_cast<int>(av.dim(3));
    Tensor out({n, ca + cb, h, w});
    const size_t plane = static_cast<size_t>(h) * w;
    for (int i = 0; i < n; ++i) {
      std::copy_n(av.data.data() + static_cast<size_t>(i) * ca * plane, ca * plane,
                  out.data.data() + static_cast<size_t>(i) * (ca + cb) * plane);
      std::copy_n(bv.data.data() + static_cast<size_t>(i) * cb * plane, cb * plane,
                  out.data.data() + (static_cast<size_t>(i) * (ca + cb) + ca) * plane);
    }
    return make_node(std::move(out), {a, b}, [a, b, n, ca, cb, plane](Tape& t) {
      const Tensor& g = t.grad_of_self_;
      for (int i = 0; i < n; ++i) {
        if (t.requires_grad(a)) {
          double* da = t.grad(a).data.data() + static_cast<size_t>(i) * ca * plane;
          const double* gp = g.data.data() + static_cast<size_t>(i) * (ca + cb) * plane;
          for (size_t k = 0; k < ca * plane; ++k) da[k] += gp[k];
        }
        if (t.requires_grad(b)) {
          double* db = t.grad(b).data.data() + static_cast<size_t>(i) * cb * plane;
          const double* gp =
              g.data.data() + (static_cast<size_t>(i) * (ca + cb) + ca) * plane;
          for (size_t k = 0; k < cb * plane; ++k) db[k] += gp[k];
        }
      }
    });
  }

  int crop_hw(int x, int top, int left, int h, int w) {
    const Tensor& xv = val(x);
    check(xv.rank() == 4, "crop_hw expects (n,c,h,w)");
    check(top >= 0 && left >= 0 && top + h <= xv.dim(2) && left + w <= xv.dim(3),
          "crop_hw out of bounds");
    const int n = static_cast<int>(xv.dim(0)), c = static_cast<int>(xv.dim(1));
    Tensor out({n, c, h, w});
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            out.at(i, ch, y, xx) = xv.at(i, ch, top + y, left + xx);
    return make_node(std::move(out), {x}, [x, top, left, h, w, n, c](Tape& t) {
      if (!t.requires_grad(x)) return;
      const Tensor& g = t.grad_of_self_;
      Tensor& dx = t.grad(x);
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
              dx.at(i, ch, top + y, left + xx) += g.at(i, ch, y, xx);
    });
  }

  // reverse both spatial dims; conv layers that must realize true convolution
  // pass their weights through this
  int flip_hw(int x) {
    const Tensor& xv = val(x);
    check(xv.rank() == 4, "flip_hw expects 4-D");
    const int d0 = static_cast<int>(xv.dim(0)), d1 = static_cast<int>(xv.dim(1)),
              h = static_cast<int>(xv.dim(2)), w = static_cast<int>(xv.dim(3));
    Tensor out(xv.shape);
    for (int a = 0; a < d0; ++a)
      for (int b = 0; b < d1; ++b)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            out.at(a, b, y, xx) = xv.at(a, b, h - 1 - y, w - 1 - xx);
    return make_node(std::move(out), {x}, [x, d0, d1, h, w](Tape& t) {
      if (!t.requires_grad(x)) return;
      const Tensor& g = t.grad_of_self_;
      Tensor& dx = t.grad(x);
      for (int a = 0; a < d0; ++a)
        for (int b = 0; b < d1; ++b)
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
              dx.at(a, b, h - 1 - y, w - 1 - xx) += g.at(a, b, y, xx);
    });
  }

  int reshape(int x, std::vector<int64_t> shape) {
    const Tensor& xv = val(x);
    check(Tensor::numel_of(shape) == xv.numel(), "reshape element count mismatch");
    Tensor out(shape, xv.data);
    return make_node(std::move(out), {x}, [x](Tape& t) {
      if (!t.requires_grad(x)) return;
      const Tensor& g = t.grad_of_self_;
      Tensor& dx = t.grad(x);
      for (size_t i = 0; i < g.data.size(); ++i) dx.data[i] += g.data[i];
    });
  }

  // x (n, d) -> columns [c0, c1)
  int slice_cols(int x, int c0, int c1) {
    const Tensor& xv = val(x);
    check(xv.rank() == 2 && c0 >= 0 && c1 <= xv.dim(1) && c0 < c1, "slice_cols bad range");
    const int n = static_cast<int>(xv.dim(0)), d = static_cast<int>(xv.dim(1));
    Tensor out({n, c1 - c0});
    for (int i = 0; i < n; ++i)
      for (int j = c0; j < c1; ++j) out.at(i, j - c0) = xv.at(i, j);
    return make_node(std::move(out), {x}, [x, c0, c1, n, d](Tape& t) {
      if (!t.requires_grad(x)) return;
      const Tensor& g = t.grad_of_self_;
      Tensor& dx = t.grad(x);
      for (int i = 0; i < n; ++i)
        for (int j = c0; j < c1; ++j) dx.at(i, j) += g.at(i, j - c0);
    });
  }

  int sum(int x) {
    Tensor out({1});
    out.data[0] = val(x).sum();
    return make_node(std::move(out), {x}, [x](Tape& t) {
      if (!t.requires_grad(x)) return;
      const double g = t.grad_of_self_.data[0];
      Tensor& dx = t.grad(x);
      for (double& v : dx.data) v += g;
    });
  }

  int mean(int x) {
    const double n = static_cast<double>(val(x).numel());
    Tensor out({1});
    out.data[0] = val(x).sum() / n;
    return make_node(std::move(out), {x}, [x, n](Tape& t) {
      if (!t.requires_grad(x)) return;
      const double g = t.grad_of_self_.data[0] / n;
      Tensor& dx = t.grad(x);
      for (double& v : dx.data) v += g;
    });
  }

  int mean_abs_diff(int a, int b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check(av.same_shape(bv), "mean_abs_diff shape mismatch");
    const double n = static_cast<double>(av.numel());
    Tensor out({1});
    double s = 0.0;
    for (size_t i = 0; i < av.data.size(); ++i) s += std::abs(av.data[i] - bv.data[i]);
    out.data[0] = s / n;
    return make_node(std::move(out), {a, b}, [a, b, n](Tape& t) {
      const double g = t.grad_of_self_.data[0] / n;
      const Tensor& av = t.val(a);
      const Tensor& bv = t.val(b);
      for (size_t i = 0; i < av.data.size(); ++i) {
        const double d = av.data[i] - bv.data[i];
        const double sg = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        if (t.requires_grad(a)) t.grad(a).data[i] += sg * g;
        if (t.requires_grad(b)) t.grad(b).data[i] -= sg * g;
      }
    });
  }

  int mean_sq_diff(int a, int b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check(av.same_shape(bv), "mean_sq_diff shape mismatch");
    const double n = static_cast<double>(av.numel());
    Tensor out({1});
    double s = 0.0;
    for (size_t i = 0; i < av.data.size(); ++i) {
      const double d = av.data[i] - bv.data[i];
      s += d * d;
    }
    out.data[0] = s / n;
    return make_node(std::move(out), {a, b}, [a, b, n](Tape& t) {
      const double g = 2.0 * t.grad_of_self_.data[0] / n;
      const Tensor& av = t.val(a);
      const Tensor& bv = t.val(b);
      for (size_t i = 0; i < av.data.size(); ++i) {
        const double d = av.data[i] - bv.data[i];
        if (t.requires_grad(a)) t.grad(a).data[i] += g * d;
        if (t.requires_grad(b)) t.grad(b).data[i] -= g * d;
      }
    });
  }

  // mean((x - c)^2)
  int mse_to_const(int x, double c) {
    const Tensor& xv = val(x);
    const double n = static_cast<double>(xv.numel());
    Tensor out({1});
    double s = 0.0;
    for (double v : xv.data) s += (v - c) * (v - c);
    out.data[0] = s / n;
    return make_node(std::move(out), {x}, [x, c, n](Tape& t) {
      if (!t.requires_grad(x)) return;
      const double g = 2.0 * t.grad_of_self_.data[0] / n;
      const Tensor& xv = t.val(x);
      Tensor& dx = t.grad(x);
      for (size_t i = 0; i < xv.data.size(); ++i) dx.data[i] += g * (xv.data[i] - c);
    });
  }

  // sum |x| .* mask, mask is a constant
  int abs_dot_mask(int x, Tensor mask) {
    const Tensor& xv = val(x);
    check(xv.numel() == mask.numel(), "abs_dot_mask size mismatch");
    Tensor out({1});
    double s = 0.0;
    for (size_t i = 0; i < xv.data.size(); ++i) s += std::abs(xv.data[i]) * mask.data[i];
    out.data[0] = s;
    return make_node(std::move(out), {x}, [x, mask = std::move(mask)](Tape& t) {
      if (!t.requires_grad(x)) return;
      const double g = t.grad_of_self_.data[0];
      const Tensor& xv = t.val(x);
      Tensor& dx = t.grad(x);
      for (size_t i = 0; i < xv.data.size(); ++i) {
        const double sg = xv.data[i] > 0.0 ? 1.0 : (xv.data[i] < 0.0 ? -1.0 : 0.0);
        dx.data[i] += g * sg * mask.data[i];
      }
    });
  }

  // smooth sparsity: sum ((x^2 + eps^2)^(p/2) - eps^p); zero at x == 0
  int pow_abs_smooth(int x, double p, double eps) {
    const Tensor& xv = val(x);
    Tensor out({1});
    double s = 0.0;
    const double floor_v = std::pow(eps * eps, p / 2.0);
    for (double v : xv.data) s += std::pow(v * v + eps * eps, p / 2.0) - floor_v;
    out.data[0] = s;
    return make_node(std::move(out), {x}, [x, p, eps](Tape& t) {
      if (!t.requires_grad(x)) return;
      const double g = t.grad_of_self_.data[0];
      const Tensor& xv = t.val(x);
      Tensor& dx = t.grad(x);
      for (size_t i = 0; i < xv.data.size(); ++i) {
        const double v = xv.data[i];
        dx.data[i] += g * p * v * std::pow(v * v + eps * eps, p / 2.0 - 1.0);
      }
    });
  }

  // squared distance between the |x|-mass centroid of the trailing 2-D plane
  // and the geometric center; leading dims are summed
  int centroid_penalty(int x) {
    const Tensor& xv = val(x);
    check(xv.rank() >= 2, "centroid_penalty expects >= 2-D");
    const int h = static_cast<int>(xv.dim(xv.rank() - 2));
    const int w = static_cast<int>(xv.dim(xv.rank() - 1));
    const int planes = static_cast<int>(xv.numel() / (h * w));
    const double cy0 = 0.5 * (h - 1), cx0 = 0.5 * (w - 1), epsm = 1e-12;
    Tensor out({1});
    std::vector<double> cys(planes), cxs(planes), ms(planes);
    for (int pl = 0; pl < planes; ++pl) {
      const double* xp = xv.data.data() + static_cast<size_t>(pl) * h * w;
      double m = epsm, sy = 0.0, sx = 0.0;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const double a = std::abs(xp[y * w + xx]);
          m += a;
          sy += a * (y - cy0);
          sx += a * (xx - cx0);
        }
      cys[pl] = sy / m;
      cxs[pl] = sx / m;
      ms[pl] = m;
      out.data[0] += cys[pl] * cys[pl] + cxs[pl] * cxs[pl];
    }
    return make_node(std::move(out), {x},
                     [x, h, w, planes, cy0, cx0, cys, cxs, ms](Tape& t) {
      if (!t.requires_grad(x)) return;
      const double g = t.grad_of_self_.data[0];
      const Tensor& xv = t.val(x);
      Tensor& dx = t.grad(x);
      for (int pl = 0; pl < planes; ++pl) {
        const double* xp = xv.data.data() + static_cast<size_t>(pl) * h * w;
        double* dp = dx.data.data() + static_cast<size_t>(pl) * h * w;
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            const double v = xp[y * w + xx];
            const double sg = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
            const double dm = 2.0 * cys[pl] * ((y - cy0) - cys[pl]) / ms[pl] +
                              2.0 * cxs[pl] * ((xx - cx0) - cxs[pl]) / ms[pl];
            dp[y * w + xx] += g * sg * dm;
          }
      }
    });
  }

  // Power-iteration state for spectral normalization. One iteration advances
  // per forward build; u persists across builds.
  struct SnState {
    std::vector<double> u;
    void init(int rows, Rng& rng) {
      u.resize(static_cast<size_t>(rows));
      double norm = 0.0;
      for (double& x : u) {
        x = rng.normal();
        norm += x * x;
      }
      norm = std::sqrt(norm) + 1e-12;
      for (double& x : u) x /= norm;
    }
  };

  // wbar = w / sigma_max(w), with the weight flattened to (dim0, rest)
  int spectral_norm(int w, SnState& st) {
    const Tensor& wv = val(w);
    check(wv.rank() >= 2, "spectral_norm expects rank >= 2");
    const int rows = static_cast<int>(wv.dim(0));
    const int cols = static_cast<int>(wv.numel() / rows);
    check(static_cast<int>(st.u.size()) == rows, "spectral_norm state not initialized");
    CMapMat wm(wv.data.data(), rows, cols);
    Eigen::Map<Eigen::VectorXd> um(st.u.data(), rows);
    Eigen::VectorXd v = wm.transpose() * um;
    v /= v.norm() + 1e-12;
    Eigen::VectorXd u_new = wm * v;
    u_new /= u_new.norm() + 1e-12;
    um = u_new;
    const double sigma = std::max(u_new.dot(wm * v), 1e-12);
    Tensor out(wv.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = wv.data[i] / sigma;
    // capture u, v, sigma for the backward pass
    std::vector<double> uc(u_new.data(), u_new.data() + rows);
    std::vector<double> vc(v.data(), v.data() + cols);
    return make_node(std::move(out), {w},
                     [w, rows, cols, sigma, uc = std::move(uc), vc = std::move(vc)](Tape& t) {
      if (!t.requires_grad(w)) return;
      const Tensor& g = t.grad_of_self_;
      const Tensor& wv = t.val(w);
      double dot = 0.0;  // <g, wbar>
      for (size_t i = 0; i < g.data.size(); ++i) dot += g.data[i] * wv.data[i] / sigma;
      Tensor& dw = t.grad(w);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
          const size_t i = static_cast<size_t>(r) * cols + c;
          dw.data[i] += g.data[i] / sigma - dot * uc[static_cast<size_t>(r)] *
                                                vc[static_cast<size_t>(c)] / sigma;
        }
    });
  }

  // ----------------------------------------------------------------- state

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Tape&)> backward;
  };

  int make_node(Tensor val_, std::initializer_list<int> parents,
                std::function<void(Tape&)> bwd) {
    Node n;
    n.val = std::move(val_);
    for (int p : parents)
      if (p >= 0 && requires_grad(p)) n.requires_grad = true;
    if (n.requires_grad) n.backward = std::move(bwd);
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    if (nodes_[static_cast<size_t>(id)].backward) {
      // wrap so the closure sees its own upstream gradient
      auto inner = std::move(nodes_[static_cast<size_t>(id)].backward);
      nodes_[static_cast<size_t>(id)].backward = [id, inner](Tape& t) {
        t.grad_of_self_ = std::move(t.nodes_[static_cast<size_t>(id)].grad);
        inner(t);
        t.nodes_[static_cast<size_t>(id)].grad = std::move(t.grad_of_self_);
      };
    }
    return id;
  }

  std::vector<Node> nodes_;
  Tensor grad_of_self_;  // scratch: the node's upstream grad during its backward
};

}  // namespace bika::ad
