#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "bika/common.hpp"
#include "bika/tensor.hpp"

namespace bika {

enum class ColorSpace { RGB, GRAY };

// H x W x C image with values in [0,1]. C is 1 or 3; [0,1] is enforced by
// clamping at the I/O boundaries, intermediate math may leave the range.
struct ImageTensor {
  int h = 0, w = 0, c = 0;
  ColorSpace color = ColorSpace::RGB;
  std::vector<double> data;  // row-major, interleaved channels

  ImageTensor() = default;
  ImageTensor(int h_, int w_, int c_)
      : h(h_), w(w_), c(c_), color(c_ == 1 ? ColorSpace::GRAY : ColorSpace::RGB),
        data(static_cast<size_t>(h_) * w_ * c_, 0.0) {
    check(h >= 1 && w >= 1 && (c == 1 || c == 3), "bad image dimensions");
  }

  double& at(int y, int x, int ch) {
    return data[(static_cast<size_t>(y) * w + x) * c + ch];
  }
  double at(int y, int x, int ch) const {
    return data[(static_cast<size_t>(y) * w + x) * c + ch];
  }

  size_t numel() const { return data.size(); }

  bool same_dims(const ImageTensor& o) const { return h == o.h && w == o.w && c == o.c; }

  void clamp01() {
    for (double& v : data) v = std::clamp(v, 0.0, 1.0);
  }

  ImageTensor crop(int y0, int x0, int ch_, int cw_) const {
    check(y0 >= 0 && x0 >= 0 && y0 + ch_ <= h && x0 + cw_ <= w, "crop out of bounds");
    ImageTensor out(ch_, cw_, c);
    out.color = color;
    for (int y = 0; y < ch_; ++y)
      for (int x = 0; x < cw_; ++x)
        for (int k = 0; k < c; ++k) out.at(y, x, k) = at(y0 + y, x0 + x, k);
    return out;
  }
};

// ITU-R BT.601 luma; identity for single-channel input
inline std::vector<double> to_luma(const ImageTensor& img) {
  std::vector<double> y(static_cast<size_t>(img.h) * img.w);
  if (img.c == 1) {
    y.assign(img.data.begin(), img.data.end());
    return y;
  }
  for (int i = 0; i < img.h; ++i)
    for (int j = 0; j < img.w; ++j)
      y[static_cast<size_t>(i) * img.w + j] = 0.299 * img.at(i, j, 0) +
                                              0.587 * img.at(i, j, 1) +
                                              0.114 * img.at(i, j, 2);
  return y;
}

// (N=1, C, H, W) layout used by the network stack
inline Tensor image_to_nchw(const ImageTensor& img) {
  Tensor t({1, img.c, img.h, img.w});
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) t.at(0, ch, y, x) = img.at(y, x, ch);
  return t;
}

inline ImageTensor nchw_to_image(const Tensor& t, int n_index = 0) {
  check(t.rank() == 4, "nchw_to_image expects a 4-D tensor");
  ImageTensor img(static_cast<int>(t.dim(2)), static_cast<int>(t.dim(3)),
                  static_cast<int>(t.dim(1)));
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) img.at(y, x, ch) = t.at(n_index, ch, y, x);
  return img;
}

inline double mse(const ImageTensor& a, const ImageTensor& b) {
  check(a.same_dims(b), "mse: dimension mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return s / static_cast<double>(a.data.size());
}

}  // namespace bika
