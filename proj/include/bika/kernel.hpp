#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bika/common.hpp"

namespace bika {

enum class KernelKind { isotropic, anisotropic };

// Parametric description of a Gaussian blur kernel. theta rotates the
// principal axis; the quadratic form is pi-periodic in theta by construction.
struct BlurSpec {
  KernelKind kind = KernelKind::isotropic;
  int size = 17;
  double sigma_x = 1.0;
  double sigma_y = 1.0;
  double theta = 0.0;

  void validate() const {
    check(size >= 3 && size % 2 == 1, "kernel size must be odd and >= 3");
    check(sigma_x > 0.0 && sigma_y > 0.0, "kernel sigmas must be positive");
    if (kind == KernelKind::isotropic) {
      check(sigma_x == sigma_y && theta == 0.0,
            "isotropic spec requires sigma_x == sigma_y and theta == 0");
    }
  }
};

// Normalized non-negative 2-D kernel. Entries sum to 1, so convolving a
// constant image leaves it unchanged.
struct BlurKernel {
  int size = 0;
  std::vector<double> values;  // row-major size x size
  std::optional<BlurSpec> spec;

  double& at(int i, int j) { return values[static_cast<size_t>(i) * size + j]; }
  double at(int i, int j) const { return values[static_cast<size_t>(i) * size + j]; }

  double sum() const {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }

  // (row, col) centroid in pixel coordinates
  std::array<double, 2> centroid() const {
    double m = 0.0, ci = 0.0, cj = 0.0;
    for (int i = 0; i < size; ++i)
      for (int j = 0; j < size; ++j) {
        const double v = at(i, j);
        m += v;
        ci += v * i;
        cj += v * j;
      }
    if (m == 0.0) return {0.5 * (size - 1), 0.5 * (size - 1)};
    return {ci / m, cj / m};
  }

  // Second moments about the centroid: {mxx, mxy, myy} with x = col, y = row.
  std::array<double, 3> second_moments() const {
    const auto c = centroid();
    double m = 0.0, mxx = 0.0, mxy = 0.0, myy = 0.0;
    for (int i = 0; i < size; ++i)
      for (int j = 0; j < size; ++j) {
        const double v = at(i, j);
        const double dy = i - c[0], dx = j - c[1];
        m += v;
        mxx += v * dx * dx;
        mxy += v * dx * dy;
        myy += v * dy * dy;
      }
    if (m == 0.0) return {0.0, 0.0, 0.0};
    return {mxx / m, mxy / m, myy / m};
  }

  // Orientation of the principal axis in radians, in [0, pi)
  double principal_axis() const {
    const auto m = second_moments();
    double a = 0.5 * std::atan2(2.0 * m[1], m[0] - m[2]);
    if (a < 0.0) a += M_PI;
    return std::fmod(a, M_PI);
  }
};

namespace detail {

inline BlurKernel normalized(int size, std::vector<double> v, std::optional<BlurSpec> spec) {
  double s = 0.0;
  for (double x : v) s += x;
  check(s > 0.0, "kernel has zero mass");
  for (double& x : v) x /= s;
  return BlurKernel{size, std::move(v), std::move(spec)};
}

}  // namespace detail

inline BlurKernel make_kernel(const BlurSpec& spec) {
  spec.validate();
  const int n = spec.size;
  const double c = 0.5 * (n - 1);
  // Inverse covariance of R(theta) diag(sx^2, sy^2) R(theta)^T
  const double ct = std::cos(spec.theta), st = std::sin(spec.theta);
  const double ix = 1.0 / (spec.sigma_x * spec.sigma_x);
  const double iy = 1.0 / (spec.sigma_y * spec.sigma_y);
  const double a = ct * ct * ix + st * st * iy;
  const double b = ct * st * (ix - iy);
  const double d = st * st * ix + ct * ct * iy;
  std::vector<double> v(static_cast<size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    const double y = i - c;
    for (int j = 0; j < n; ++j) {
      const double x = j - c;
      v[static_cast<size_t>(i) * n + j] =
          std::exp(-0.5 * (a * x * x + 2.0 * b * x * y + d * y * y));
    }
  }
  return detail::normalized(n, std::move(v), spec);
}

inline BlurKernel make_isotropic_gaussian(int size, double sigma) {
  check(sigma > 0.0, "sigma must be positive");
  return make_kernel(BlurSpec{KernelKind::isotropic, size, sigma, sigma, 0.0});
}

inline BlurKernel make_anisotropic_gaussian(int size, double sigma_x, double sigma_y,
                                            double theta) {
  return make_kernel(BlurSpec{KernelKind::anisotropic, size, sigma_x, sigma_y, theta});
}

inline BlurKernel delta_kernel(int size) {
  check(size >= 1 && size % 2 == 1, "kernel size must be odd");
  std::vector<double> v(static_cast<size_t>(size) * size, 0.0);
  v[static_cast<size_t>(size / 2) * size + size / 2] = 1.0;
  return BlurKernel{size, std::move(v), std::nullopt};
}

// The 16-kernel bank: 4 isotropic sigmas plus 2 anisotropic shapes crossed
// with 6 rotation angles. The parameter values are defaults of this toolkit,
// overridable through a bank manifest file.
inline std::vector<BlurSpec> default_bank_specs(int size = 17) {
  std::vector<BlurSpec> specs;
  for (double s : {1.0, 2.0, 3.0, 4.0})
    specs.push_back(BlurSpec{KernelKind::isotropic, size, s, s, 0.0});
  const std::array<std::array<double, 2>, 2> shapes = {{{3.0, 1.0}, {4.0, 1.5}}};
  for (const auto& sh : shapes)
    for (int k = 0; k < 6; ++k)
      specs.push_back(BlurSpec{KernelKind::anisotropic, size, sh[0], sh[1], k * M_PI / 6.0});
  return specs;
}

inline std::vector<BlurKernel> make_default_bank(int size = 17) {
  std::vector<BlurKernel> bank;
  for (const auto& s : default_bank_specs(size)) bank.push_back(make_kernel(s));
  return bank;
}

struct KernelDistance {
  double plain = 0.0;           // L2 of the difference
  double shift_tolerant = 0.0;  // min L2 over integer shifts within +-2 px
};

inline KernelDistance kernel_distance(const BlurKernel& a, const BlurKernel& b) {
  check(a.size == b.size, "kernel_distance: size mismatch");
  const int n = a.size;
  auto l2_shift = [&](int dy, int dx) {
    double s = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const int bi = i + dy, bj = j + dx;
        const double bv =
            (bi >= 0 && bi < n && bj >= 0 && bj < n) ? b.at(bi, bj) : 0.0;
        const double d = a.at(i, j) - bv;
        s += d * d;
      }
    return std::sqrt(s);
  };
  KernelDistance out;
  out.plain = l2_shift(0, 0);
  out.shift_tolerant = out.plain;
  for (int dy = -2; dy <= 2; ++dy)
    for (int dx = -2; dx <= 2; ++dx)
      out.shift_tolerant = std::min(out.shift_tolerant, l2_shift(dy, dx));
  return out;
}

// ---------------------------------------------------------------------------
// KERN1 file format: 5-byte magic "KERN1", u32le height, u32le width, then
// height*width float32le, row-major.

namespace detail {

inline void put_u32le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void put_f32le(std::ostream& os, float f) {
  static_assert(sizeof(float) == 4);
  uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32le(os, v);
}

inline float get_f32le(std::istream& is) {
  const uint32_t v = get_u32le(is);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace detail

inline void save_kernel(const BlurKernel& k, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "cannot open kernel file for writing: " + path);
  os.write("KERN1", 5);
  detail::put_u32le(os, static_cast<uint32_t>(k.size));
  detail::put_u32le(os, static_cast<uint32_t>(k.size));
  for (double v : k.values) detail::put_f32le(os, static_cast<float>(v));
  check(os.good(), "failed writing kernel file: " + path);
}

inline BlurKernel load_kernel(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "cannot open kernel file: " + path);
  char magic[5];
  is.read(magic, 5);
  check(is.good() && std::memcmp(magic, "KERN1", 5) == 0,
        "bad kernel file magic: " + path);
  const uint32_t h = detail::get_u32le(is);
  const uint32_t w = detail::get_u32le(is);
  check(h == w && h >= 1, "kernel file must be square: " + path);
  BlurKernel k;
  k.size = static_cast<int>(h);
  k.values.resize(static_cast<size_t>(h) * w);
  for (double& v : k.values) v = static_cast<double>(detail::get_f32le(is));
  check(is.good(), "truncated kernel file: " + path);
  return k;
}

// ---------------------------------------------------------------------------
// Bank manifest: JSON array of BlurSpec objects.

inline nlohmann::ordered_json spec_to_json(const BlurSpec& s) {
  nlohmann::ordered_json j;
  j["kind"] = s.kind == KernelKind::isotropic ? "isotropic" : "anisotropic";
  j["size"] = s.size;
  j["sigma_x"] = s.sigma_x;
  j["sigma_y"] = s.sigma_y;
  j["theta"] = s.theta;
  return j;
}

inline BlurSpec spec_from_json(const nlohmann::json& j) {
  BlurSpec s;
  const std::string kind = j.at("kind").get<std::string>();
  check(kind == "isotropic" || kind == "anisotropic", "bad kernel kind: " + kind);
  s.kind = kind == "isotropic" ? KernelKind::isotropic : KernelKind::anisotropic;
  s.size = j.at("size").get<int>();
  s.sigma_x = j.at("sigma_x").get<double>();
  s.sigma_y = j.at("sigma_y").get<double>();
  s.theta = j.at("theta").get<double>();
  s.validate();
  return s;
}

inline nlohmann::ordered_json bank_to_json(const std::vector<BlurSpec>& bank) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& s : bank) arr.push_back(spec_to_json(s));
  return arr;
}

inline std::vector<BlurSpec> bank_from_json(const nlohmann::json& arr) {
  check(arr.is_array(), "bank manifest must be a JSON array");
  std::vector<BlurSpec> bank;
  for (const auto& j : arr) bank.push_back(spec_from_json(j));
  return bank;
}

inline std::vector<BlurSpec> load_bank(const std::string& path) {
  std::ifstream is(path);
  check(is.good(), "cannot open bank manifest: " + path);
  nlohmann::json j;
  is >> j;
  return bank_from_json(j);
}

inline void save_bank(const std::vector<BlurSpec>& bank, const std::string& path) {
  std::ofstream os(path);
  check(os.good(), "cannot open bank manifest for writing: " + path);
  os << bank_to_json(bank).dump(2) << "\n";
}

}  // namespace bika
