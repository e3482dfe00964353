#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "bika/dataset.hpp"
#include "bika/image.hpp"

namespace bika {

// 10*log10(max^2 / MSE) over all channels; +inf for identical images.
inline double psnr(const ImageTensor& a, const ImageTensor& b, double max_val = 1.0) {
  const double m = mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / m);
}

namespace detail {

inline std::vector<double> ssim_window() {
  // 11x11 Gaussian, sigma 1.5, normalized
  std::vector<double> w(121);
  double s = 0.0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      const double dy = i - 5, dx = j - 5;
      w[static_cast<size_t>(i) * 11 + j] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
      s += w[static_cast<size_t>(i) * 11 + j];
    }
  for (double& v : w) v /= s;
  return w;
}

}  // namespace detail

// Canonical single-scale SSIM: 11x11 Gaussian window sigma 1.5,
// C1=(0.01 L)^2, C2=(0.03 L)^2, mean over valid window positions. RGB inputs
// are reduced to BT.601 luma first.
inline double ssim(const ImageTensor& a, const ImageTensor& b, double max_val = 1.0) {
  check(a.same_dims(b), "ssim: dimension mismatch");
  check(a.h >= 11 && a.w >= 11, "ssim: image smaller than 11x11 window");
  const std::vector<double> ya = to_luma(a), yb = to_luma(b);
  static const std::vector<double> win = detail::ssim_window();
  const double c1 = (0.01 * max_val) * (0.01 * max_val);
  const double c2 = (0.03 * max_val) * (0.03 * max_val);
  const int h = a.h, w = a.w;
  double total = 0.0;
  int64_t count = 0;
  for (int y = 0; y + 11 <= h; ++y)
    for (int x = 0; x + 11 <= w; ++x) {
      double mx = 0.0, my = 0.0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double wv = win[static_cast<size_t>(i) * 11 + j];
          mx += wv * ya[static_cast<size_t>(y + i) * w + (x + j)];
          my += wv * yb[static_cast<size_t>(y + i) * w + (x + j)];
        }
      double vx = 0.0, vy = 0.0, cxy = 0.0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double wv = win[static_cast<size_t>(i) * 11 + j];
          const double da = ya[static_cast<size_t>(y + i) * w + (x + j)] - mx;
          const double db = yb[static_cast<size_t>(y + i) * w + (x + j)] - my;
          vx += wv * da * da;
          vy += wv * db * db;
          cxy += wv * da * db;
        }
      const double num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
      const double den = (mx * mx + my * my + c1) * (vx + vy + c2);
      total += num / den;
      ++count;
    }
  return total / static_cast<double>(count);
}

struct PerImageMetric {
  int id = 0;
  double psnr_db = 0.0;
  double ssim_val = 0.0;
};

struct MetricReport {
  std::string dataset;
  std::string checkpoint;
  std::vector<PerImageMetric> per_image;
  std::vector<int> failures;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  int count = 0;
};

namespace detail {

// +inf is not representable in JSON numbers; the sentinel is the string "inf"
inline nlohmann::ordered_json json_psnr(double v) {
  if (std::isinf(v)) return "inf";
  return v;
}

inline double psnr_from_json(const nlohmann::json& j) {
  if (j.is_string()) return std::numeric_limits<double>::infinity();
  return j.get<double>();
}

}  // namespace detail

inline nlohmann::ordered_json report_to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["dataset"] = r.dataset;
  j["checkpoint"] = r.checkpoint;
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (const auto& p : r.per_image) {
    nlohmann::ordered_json jp;
    jp["id"] = p.id;
    jp["psnr"] = detail::json_psnr(p.psnr_db);
    jp["ssim"] = p.ssim_val;
    per.push_back(std::move(jp));
  }
  j["per_image"] = std::move(per);
  j["aggregate"]["mean_psnr"] = detail::json_psnr(r.mean_psnr);
  j["aggregate"]["mean_ssim"] = r.mean_ssim;
  j["aggregate"]["count"] = r.count;
  j["aggregate"]["failures"] = r.failures;
  return j;
}

inline MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.dataset = j.at("dataset").get<std::string>();
  r.checkpoint = j.at("checkpoint").get<std::string>();
  for (const auto& jp : j.at("per_image")) {
    PerImageMetric p;
    p.id = jp.at("id").get<int>();
    p.psnr_db = detail::psnr_from_json(jp.at("psnr"));
    p.ssim_val = jp.at("ssim").get<double>();
    r.per_image.push_back(p);
  }
  const auto& agg = j.at("aggregate");
  r.mean_psnr = detail::psnr_from_json(agg.at("mean_psnr"));
  r.mean_ssim = agg.at("mean_ssim").get<double>();
  r.count = agg.at("count").get<int>();
  for (const auto& f : agg.at("failures")) r.failures.push_back(f.get<int>());
  return r;
}

inline MetricReport load_report(const std::string& path) {
  std::ifstream is(path);
  check(is.good(), "cannot open report: " + path);
  nlohmann::json j;
  is >> j;
  return report_from_json(j);
}

inline void save_report(const MetricReport& r, const std::string& path) {
  std::ofstream os(path);
  check(os.good(), "cannot open report for writing: " + path);
  os << report_to_json(r).dump(2) << "\n";
}

// Compares restored_dir/restored_%04d.png with each sample's sharp image.
// Missing or unreadable restored images are recorded as failures and excluded
// from the means.
inline MetricReport evaluate(const DatasetManifest& manifest, const std::string& restored_dir) {
  MetricReport r;
  r.dataset = manifest.dir;
  double sp = 0.0, ss = 0.0;
  for (size_t i = 0; i < manifest.samples.size(); ++i) {
    const std::string restored_path =
        (fs::path(restored_dir) / detail::sample_name("restored", i, ".png")).string();
    if (!fs::exists(restored_path)) {
      r.failures.push_back(static_cast<int>(i));
      continue;
    }
    const ImageTensor sharp = load_png(manifest.resolve(manifest.samples[i].sharp_path));
    const ImageTensor restored = load_png(restored_path);
    if (!sharp.same_dims(restored)) {
      r.failures.push_back(static_cast<int>(i));
      continue;
    }
    PerImageMetric p;
    p.id = static_cast<int>(i);
    p.psnr_db = psnr(restored, sharp);
    p.ssim_val = ssim(restored, sharp);
    r.per_image.push_back(p);
    sp += p.psnr_db;
    ss += p.ssim_val;
  }
  r.count = static_cast<int>(r.per_image.size());
  r.mean_psnr = r.count > 0 ? sp / r.count : 0.0;
  r.mean_ssim = r.count > 0 ? ss / r.count : 0.0;
  return r;
}

}  // namespace bika
