#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "bika/image.hpp"
#include "bika/kernel.hpp"

namespace bika {

// Per-pixel (u, v) displacement in pixels. u moves along x, v along y.
struct MotionFlowField {
  int h = 0, w = 0;
  std::vector<double> uv;  // row-major, interleaved (u, v)

  MotionFlowField() = default;
  MotionFlowField(int h_, int w_) : h(h_), w(w_), uv(static_cast<size_t>(h_) * w_ * 2, 0.0) {}

  double& u(int y, int x) { return uv[(static_cast<size_t>(y) * w + x) * 2]; }
  double u(int y, int x) const { return uv[(static_cast<size_t>(y) * w + x) * 2]; }
  double& v(int y, int x) { return uv[(static_cast<size_t>(y) * w + x) * 2 + 1]; }
  double v(int y, int x) const { return uv[(static_cast<size_t>(y) * w + x) * 2 + 1]; }

  bool finite() const {
    for (double x : uv)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

// FLOW1 file: 5-byte magic "FLOW1", u32le height, u32le width, then
// height*width*(u,v) float32le.
inline void save_flow(const MotionFlowField& f, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "cannot open flow file for writing: " + path);
  os.write("FLOW1", 5);
  detail::put_u32le(os, static_cast<uint32_t>(f.h));
  detail::put_u32le(os, static_cast<uint32_t>(f.w));
  for (double v : f.uv) detail::put_f32le(os, static_cast<float>(v));
  check(os.good(), "failed writing flow file: " + path);
}

inline MotionFlowField load_flow(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "cannot open flow file: " + path);
  char magic[5];
  is.read(magic, 5);
  check(is.good() && std::memcmp(magic, "FLOW1", 5) == 0, "bad flow file magic: " + path);
  const uint32_t h = detail::get_u32le(is);
  const uint32_t w = detail::get_u32le(is);
  MotionFlowField f(static_cast<int>(h), static_cast<int>(w));
  for (double& v : f.uv) v = static_cast<double>(detail::get_f32le(is));
  check(is.good(), "truncated flow file: " + path);
  return f;
}

namespace detail {

inline double bilinear_clamped(const ImageTensor& img, double y, double x, int ch) {
  y = std::clamp(y, 0.0, static_cast<double>(img.h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(img.w - 1));
  const int y0 = std::min(static_cast<int>(y), img.h - 2 >= 0 ? img.h - 2 : 0);
  const int x0 = std::min(static_cast<int>(x), img.w - 2 >= 0 ? img.w - 2 : 0);
  const int y1 = std::min(y0 + 1, img.h - 1);
  const int x1 = std::min(x0 + 1, img.w - 1);
  const double ty = y - y0, tx = x - x0;
  return (1 - ty) * ((1 - tx) * img.at(y0, x0, ch) + tx * img.at(y0, x1, ch)) +
         ty * ((1 - tx) * img.at(y1, x0, ch) + tx * img.at(y1, x1, ch));
}

}  // namespace detail

// Per-pixel linear motion blur: each output pixel averages `steps` bilinear
// samples along the segment [-flow/2, +flow/2] centered at the pixel.
inline ImageTensor synthesize_motion_blur(const ImageTensor& sharp, const MotionFlowField& flow,
                                          int steps = 17) {
  check(steps >= 1, "steps must be >= 1");
  check(flow.h == sharp.h && flow.w == sharp.w, "flow dims must match image");
  check(flow.finite(), "flow field contains non-finite values");
  ImageTensor out(sharp.h, sharp.w, sharp.c);
  out.color = sharp.color;
  for (int y = 0; y < sharp.h; ++y)
    for (int x = 0; x < sharp.w; ++x) {
      const double u = flow.u(y, x), v = flow.v(y, x);
      if (u == 0.0 && v == 0.0) {
        for (int ch = 0; ch < sharp.c; ++ch) out.at(y, x, ch) = sharp.at(y, x, ch);
        continue;
      }
      for (int ch = 0; ch < sharp.c; ++ch) {
        double acc = 0.0;
        for (int t = 0; t < steps; ++t) {
          const double a = steps == 1 ? 0.0 : static_cast<double>(t) / (steps - 1) - 0.5;
          acc += detail::bilinear_clamped(sharp, y + a * v, x + a * u, ch);
        }
        out.at(y, x, ch) = acc / steps;
      }
    }
  return out;
}

// Smooth random flow, affine in normalized image coordinates. Coefficient
// magnitudes are bounded by max_mag (pixels).
inline MotionFlowField random_affine_flow(int h, int w, double max_mag, uint64_t seed) {
  check(max_mag >= 0.0, "max_mag must be non-negative");
  Rng rng(seed);
  double cu[3], cv[3];
  for (int i = 0; i < 3; ++i) cu[i] = rng.uniform(-max_mag, max_mag);
  for (int i = 0; i < 3; ++i) cv[i] = rng.uniform(-max_mag, max_mag);
  MotionFlowField f(h, w);
  for (int y = 0; y < h; ++y) {
    const double ny = h > 1 ? static_cast<double>(y) / (h - 1) - 0.5 : 0.0;
    for (int x = 0; x < w; ++x) {
      const double nx = w > 1 ? static_cast<double>(x) / (w - 1) - 0.5 : 0.0;
      f.u(y, x) = cu[0] + cu[1] * nx + cu[2] * ny;
      f.v(y, x) = cv[0] + cv[1] * nx + cv[2] * ny;
    }
  }
  return f;
}

}  // namespace bika
