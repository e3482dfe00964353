#pragma once

#include <complex>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "bika/common.hpp"

namespace bika {

// 2-D complex FFT by row-column decomposition. Arbitrary sizes are fine
// (kissfft backend, mixed radix). Eigen::FFT scales each 1-D inverse by 1/n,
// so the row-column inverse comes out scaled by 1/(h*w) and
// ifft2(fft2(x)) == x.
class Fft2 {
 public:
  using Cd = std::complex<double>;

  static void forward(std::vector<Cd>& a, int h, int w) { run(a, h, w, false); }
  static void inverse(std::vector<Cd>& a, int h, int w) { run(a, h, w, true); }

 private:
  static void run(std::vector<Cd>& a, int h, int w, bool inverse) {
    check(static_cast<int64_t>(a.size()) == static_cast<int64_t>(h) * w,
          "fft2: buffer size mismatch");
    Eigen::FFT<double> fft;
    std::vector<Cd> line(std::max(h, w)), out(std::max(h, w));
    for (int y = 0; y < h; ++y) {
      Cd* row = a.data() + static_cast<size_t>(y) * w;
      if (inverse)
        fft.inv(out.data(), row, w);
      else
        fft.fwd(out.data(), row, w);
      std::copy(out.begin(), out.begin() + w, row);
    }
    for (int x = 0; x < w; ++x) {
      for (int y = 0; y < h; ++y) line[y] = a[static_cast<size_t>(y) * w + x];
      if (inverse)
        fft.inv(out.data(), line.data(), h);
      else
        fft.fwd(out.data(), line.data(), h);
      for (int y = 0; y < h; ++y) a[static_cast<size_t>(y) * w + x] = out[y];
    }
  }
};

}  // namespace bika
