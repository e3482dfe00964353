#pragma once

#include <string>

#include "bika/convolve.hpp"
#include "bika/image.hpp"
#include "bika/kernel.hpp"

namespace bika {

// image + iid zero-mean Gaussian noise of std sigma, clamped to [0,1].
// Deterministic given seed; sigma = 0 returns the input bit-for-bit.
inline ImageTensor add_noise(const ImageTensor& img, double sigma, uint64_t seed) {
  check(sigma >= 0.0, "noise sigma must be non-negative");
  if (sigma == 0.0) return img;
  ImageTensor out = img;
  Rng rng(seed);
  for (double& v : out.data) v += sigma * rng.normal();
  out.clamp01();
  return out;
}

struct SynthesizedSample {
  ImageTensor sharp;
  ImageTensor blurred;
  BlurSpec spec;
  double noise_sigma = 0.0;
  uint64_t seed = 0;
};

// blurred = clamp(k(spec) * sharp + noise), replicate boundary
inline SynthesizedSample synthesize_blur(const ImageTensor& sharp, const BlurSpec& spec,
                                         double noise_sigma, uint64_t seed) {
  const BlurKernel k = make_kernel(spec);
  ImageTensor blurred = convolve(sharp, k, Boundary::replicate);
  blurred = add_noise(blurred, noise_sigma, seed);
  blurred.clamp01();
  return SynthesizedSample{sharp, std::move(blurred), spec, noise_sigma, seed};
}

// Multi-octave value noise, scale-invariant-ish texture. Used by the demo
// tooling and tests as a stand-in for natural sharp images.
inline ImageTensor fractal_texture(int h, int w, int c, uint64_t seed, int octaves = 5) {
  check(h >= 4 && w >= 4 && (c == 1 || c == 3), "fractal_texture: bad dims");
  Rng rng(seed);
  ImageTensor img(h, w, c);
  double total_amp = 0.0;
  for (int o = 0; o < octaves; ++o) {
    const int gh = std::max(2, (h >> (octaves - 1 - o)) + 1);
    const int gw = std::max(2, (w >> (octaves - 1 - o)) + 1);
    const double amp = 1.0 / (1 << o);
    total_amp += amp;
    std::vector<double> grid(static_cast<size_t>(gh) * gw * c);
    for (double& g : grid) g = rng.uniform();
    for (int y = 0; y < h; ++y) {
      const double fy = static_cast<double>(y) / (h - 1) * (gh - 1);
      const int y0 = std::min(static_cast<int>(fy), gh - 2);
      const double ty = fy - y0;
      for (int x = 0; x < w; ++x) {
        const double fx = static_cast<double>(x) / (w - 1) * (gw - 1);
        const int x0 = std::min(static_cast<int>(fx), gw - 2);
        const double tx = fx - x0;
        for (int ch = 0; ch < c; ++ch) {
          auto g = [&](int yy, int xx) {
            return grid[(static_cast<size_t>(yy) * gw + xx) * c + ch];
          };
          const double v = (1 - ty) * ((1 - tx) * g(y0, x0) + tx * g(y0, x0 + 1)) +
                           ty * ((1 - tx) * g(y0 + 1, x0) + tx * g(y0 + 1, x0 + 1));
          img.at(y, x, ch) += amp * v;
        }
      }
    }
  }
  for (double& v : img.data) v /= total_amp;
  img.clamp01();
  return img;
}

}  // namespace bika
