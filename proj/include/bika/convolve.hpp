#pragma once

#include <complex>
#include <vector>

#include "bika/fft.hpp"
#include "bika/image.hpp"
#include "bika/kernel.hpp"

namespace bika {

enum class Boundary { replicate, zero, circular };

enum class ConvPath { direct, fft };

namespace detail {

inline int wrap_index(int i, int n) {
  i %= n;
  return i < 0 ? i + n : i;
}

// Fetch with boundary handling. For zero, out-of-range reads are 0.
inline double sample(const ImageTensor& img, int y, int x, int ch, Boundary b) {
  switch (b) {
    case Boundary::replicate:
      y = std::clamp(y, 0, img.h - 1);
      x = std::clamp(x, 0, img.w - 1);
      return img.at(y, x, ch);
    case Boundary::zero:
      if (y < 0 || y >= img.h || x < 0 || x >= img.w) return 0.0;
      return img.at(y, x, ch);
    case Boundary::circular:
      return img.at(wrap_index(y, img.h), wrap_index(x, img.w), ch);
  }
  return 0.0;
}

inline ImageTensor convolve_direct(const ImageTensor& img, const BlurKernel& k, Boundary b) {
  const int c = k.size / 2;
  ImageTensor out(img.h, img.w, img.c);
  out.color = img.color;
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        double s = 0.0;
        for (int i = 0; i < k.size; ++i)
          for (int j = 0; j < k.size; ++j)
            s += k.at(i, j) * sample(img, y - (i - c), x - (j - c), ch, b);
        out.at(y, x, ch) = s;
      }
  return out;
}

// Circular convolution via the DFT product; the kernel is embedded with its
// center tap at (0,0) so there is no phase shift.
inline ImageTensor convolve_circular_fft(const ImageTensor& img, const BlurKernel& k) {
  const int h = img.h, w = img.w, c0 = k.size / 2;
  std::vector<std::complex<double>> khat(static_cast<size_t>(h) * w, 0.0);
  for (int i = 0; i < k.size; ++i)
    for (int j = 0; j < k.size; ++j) {
      const int y = wrap_index(i - c0, h);
      const int x = wrap_index(j - c0, w);
      khat[static_cast<size_t>(y) * w + x] += k.at(i, j);
    }
  Fft2::forward(khat, h, w);

  ImageTensor out(h, w, img.c);
  out.color = img.color;
  std::vector<std::complex<double>> buf(static_cast<size_t>(h) * w);
  for (int ch = 0; ch < img.c; ++ch) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        buf[static_cast<size_t>(y) * w + x] = img.at(y, x, ch);
    Fft2::forward(buf, h, w);
    for (size_t i = 0; i < buf.size(); ++i) buf[i] *= khat[i];
    Fft2::inverse(buf, h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(y, x, ch) = buf[static_cast<size_t>(y) * w + x].real();
  }
  return out;
}

inline ImageTensor pad_image(const ImageTensor& img, int r, Boundary b) {
  ImageTensor out(img.h + 2 * r, img.w + 2 * r, img.c);
  out.color = img.color;
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x)
        out.at(y, x, ch) = sample(img, y - r, x - r, ch, b);
  return out;
}

}  // namespace detail

// True 2-D convolution of every channel: out(p) = sum_q k(q) * img(p - (q-c)).
// The kernel is flipped relative to cross-correlation; the impulse response is
// the kernel itself. Both paths produce the same result within 1e-5; the FFT
// path realizes replicate/zero boundaries by explicit padding followed by a
// circular product, so the agreement holds over the full output.
inline ImageTensor convolve(const ImageTensor& img, const BlurKernel& k,
                            Boundary boundary = Boundary::replicate,
                            ConvPath path = ConvPath::direct) {
  check(k.size <= std::min(img.h, img.w), "kernel larger than image");
  if (path == ConvPath::direct) return detail::convolve_direct(img, k, boundary);
  if (boundary == Boundary::circular) return detail::convolve_circular_fft(img, k);
  const int r = k.size / 2;
  ImageTensor padded = detail::pad_image(img, r, boundary);
  ImageTensor conv = detail::convolve_circular_fft(padded, k);
  return conv.crop(r, r, img.h, img.w);
}

// Frequency-domain Wiener estimate conj(K).B / (|K|^2 + nsr), per channel on
// circular boundaries. A machine-epsilon floor on the denominator keeps the
// nsr=0 case finite at spectral zeros.
inline ImageTensor wiener_deconvolve(const ImageTensor& blurred, const BlurKernel& k,
                                     double nsr) {
  check(nsr >= 0.0, "nsr must be non-negative");
  check(k.size <= std::min(blurred.h, blurred.w), "kernel larger than image");
  const int h = blurred.h, w = blurred.w, c0 = k.size / 2;
  std::vector<std::complex<double>> khat(static_cast<size_t>(h) * w, 0.0);
  for (int i = 0; i < k.size; ++i)
    for (int j = 0; j < k.size; ++j) {
      const int y = detail::wrap_index(i - c0, h);
      const int x = detail::wrap_index(j - c0, w);
      khat[static_cast<size_t>(y) * w + x] += k.at(i, j);
    }
  Fft2::forward(khat, h, w);

  const double floor = std::numeric_limits<double>::epsilon();
  ImageTensor out(h, w, blurred.c);
  out.color = blurred.color;
  std::vector<std::complex<double>> buf(static_cast<size_t>(h) * w);
  for (int ch = 0; ch < blurred.c; ++ch) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        buf[static_cast<size_t>(y) * w + x] = blurred.at(y, x, ch);
    Fft2::forward(buf, h, w);
    for (size_t i = 0; i < buf.size(); ++i) {
      const double denom = std::max(std::norm(khat[i]) + nsr, floor);
      buf[i] = std::conj(khat[i]) * buf[i] / denom;
    }
    Fft2::inverse(buf, h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(y, x, ch) = buf[static_cast<size_t>(y) * w + x].real();
  }
  out.clamp01();
  return out;
}

}  // namespace bika
