#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "bika/dataset.hpp"
#include "bika/degradation.hpp"
#include "bika/metrics.hpp"

using namespace bika;
namespace fs = std::filesystem;

namespace {

ImageTensor const_image(int h, int w, int c, double v) {
  ImageTensor img(h, w, c);
  for (double& x : img.data) x = v;
  return img;
}

struct TmpDir {
  fs::path path;
  explicit TmpDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("psnr closed forms") {
  const ImageTensor x = fractal_texture(32, 32, 3, 1);
  REQUIRE(std::isinf(psnr(x, x)));

  // MSE exactly 1e-3: one channel value differs by sqrt(1e-3 * N) on one pixel
  ImageTensor a = const_image(10, 10, 1, 0.0);
  ImageTensor b = a;
  b.at(0, 0, 0) = std::sqrt(1e-3 * 100.0);
  REQUIRE(psnr(a, b) == Catch::Approx(30.0).margin(1e-9));

  const ImageTensor zero = const_image(8, 8, 3, 0.0);
  const ImageTensor one = const_image(8, 8, 3, 1.0);
  REQUIRE(psnr(zero, one) == Catch::Approx(0.0).margin(1e-12));

  REQUIRE_THROWS_AS(psnr(zero, const_image(8, 9, 3, 0.0)), ValidationError);
}

TEST_CASE("ssim closed forms and symmetry") {
  const ImageTensor x = fractal_texture(48, 48, 3, 2);
  REQUIRE(ssim(x, x) == Catch::Approx(1.0).margin(1e-12));

  // all-zero vs all-one: mu = 0 and 1, zero variances
  // SSIM = (C1 * C2) / ((1 + C1) * C2) = C1 / (1 + C1), C1 = 1e-4
  const double c1 = 1e-4;
  const ImageTensor zero = const_image(16, 16, 1, 0.0);
  const ImageTensor one = const_image(16, 16, 1, 1.0);
  REQUIRE(ssim(zero, one) == Catch::Approx(c1 / (1.0 + c1)).margin(1e-9));

  const ImageTensor y = fractal_texture(48, 48, 3, 3);
  REQUIRE(ssim(x, y) == Catch::Approx(ssim(y, x)).margin(1e-12));
  REQUIRE(ssim(x, y) >= -1.0);
  REQUIRE(ssim(x, y) <= 1.0);

  REQUIRE_THROWS_AS(ssim(const_image(8, 8, 1, 0.0), const_image(8, 8, 1, 0.0)),
                    ValidationError);
}

TEST_CASE("psnr strictly decreases with growing noise") {
  const ImageTensor x = fractal_texture(64, 64, 3, 4);
  double prev = std::numeric_limits<double>::infinity();
  for (double s : {0.005, 0.01, 0.02, 0.05}) {
    const double p = psnr(add_noise(x, s, 9), x);
    REQUIRE(p < prev);
    prev = p;
  }
}

TEST_CASE("metrics are pure: identical inputs, identical outputs") {
  const ImageTensor x = fractal_texture(32, 32, 3, 5);
  const ImageTensor y = add_noise(x, 0.02, 3);
  REQUIRE(psnr(x, y) == psnr(x, y));
  REQUIRE(ssim(x, y) == ssim(x, y));
}

TEST_CASE("evaluate pairs restored images with samples and tracks failures") {
  TmpDir src("bika_msrc");
  for (int i = 0; i < 3; ++i)
    save_png(fractal_texture(64, 64, 3, 40 + i),
             (src.path / ("img" + std::to_string(i) + ".png")).string());
  TmpDir ds("bika_mds");
  GenerateOptions opt;
  opt.sharp_dir = src.str();
  opt.out_dir = ds.str();
  opt.crop = 48;
  opt.count = 3;
  opt.seed = 4;
  const DatasetManifest m = generate_dataset(opt);

  TmpDir restored("bika_mrest");
  // restored = copies of the blurred inputs, except sample 2 missing
  for (int i = 0; i < 2; ++i) {
    const ImageTensor b = load_png(m.resolve(m.samples[i].blurred_path));
    char name[32];
    std::snprintf(name, sizeof(name), "restored_%04d.png", i);
    save_png(b, (restored.path / name).string());
  }
  const MetricReport r = evaluate(m, restored.str());
  REQUIRE(r.count == 2);
  REQUIRE(r.failures.size() == 1);
  REQUIRE(r.failures[0] == 2);

  // plug-through: report PSNR equals psnr(blurred, sharp) for each pair
  for (const auto& p : r.per_image) {
    const auto& s = m.samples[static_cast<size_t>(p.id)];
    const double want = psnr(load_png(m.resolve(s.blurred_path)),
                             load_png(m.resolve(s.sharp_path)));
    REQUIRE(p.psnr_db == Catch::Approx(want).margin(1e-12));
  }
  REQUIRE(r.mean_psnr ==
          Catch::Approx((r.per_image[0].psnr_db + r.per_image[1].psnr_db) / 2).margin(1e-9));

  // restored == sharp gives ssim 1
  TmpDir perfect("bika_mperf");
  for (int i = 0; i < 3; ++i) {
    const ImageTensor s = load_png(m.resolve(m.samples[i].sharp_path));
    char name[32];
    std::snprintf(name, sizeof(name), "restored_%04d.png", i);
    save_png(s, (perfect.path / name).string());
  }
  const MetricReport rp = evaluate(m, perfect.str());
  REQUIRE(rp.count == 3);
  REQUIRE(rp.mean_ssim == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(std::isinf(rp.mean_psnr));

  // report JSON round-trip, including the +inf sentinel
  const std::string rpath = (perfect.path / "report.json").string();
  save_report(rp, rpath);
  const MetricReport loaded = load_report(rpath);
  REQUIRE(std::isinf(loaded.mean_psnr));
  REQUIRE(loaded.count == 3);
  REQUIRE(loaded.per_image.size() == 3);
}
