#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "bika/dataset.hpp"
#include "bika/degradation.hpp"
#include "bika/metrics.hpp"

using namespace bika;
namespace fs = std::filesystem;

namespace {

// Brute-force reference: literal translation of the convolution definition,
// kept independent of the library code paths.
double oracle_fetch(const ImageTensor& img, int y, int x, int ch, Boundary b) {
  if (b == Boundary::replicate) {
    y = std::min(std::max(y, 0), img.h - 1);
    x = std::min(std::max(x, 0), img.w - 1);
  } else if (b == Boundary::zero) {
    if (y < 0 || y >= img.h || x < 0 || x >= img.w) return 0.0;
  } else {
    y = ((y % img.h) + img.h) % img.h;
    x = ((x % img.w) + img.w) % img.w;
  }
  return img.at(y, x, ch);
}

ImageTensor conv_oracle(const ImageTensor& img, const BlurKernel& k, Boundary b) {
  ImageTensor out(img.h, img.w, img.c);
  const int c = k.size / 2;
  for (int ch = 0; ch < img.c; ++ch)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        double acc = 0.0;
        for (int i = 0; i < k.size; ++i)
          for (int j = 0; j < k.size; ++j)
            acc += k.at(i, j) * oracle_fetch(img, y - i + c, x - j + c, ch, b);
        out.at(y, x, ch) = acc;
      }
  return out;
}

ImageTensor random_image(int h, int w, int c, uint64_t seed) {
  Rng rng(seed);
  ImageTensor img(h, w, c);
  for (double& v : img.data) v = rng.uniform();
  return img;
}

BlurKernel random_kernel(int size, uint64_t seed) {
  Rng rng(seed);
  BlurKernel k;
  k.size = size;
  k.values.resize(static_cast<size_t>(size) * size);
  double s = 0.0;
  for (double& v : k.values) {
    v = rng.uniform();
    s += v;
  }
  for (double& v : k.values) v /= s;
  return k;
}

double max_abs_diff(const ImageTensor& a, const ImageTensor& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

std::string read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
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

TEST_CASE("convolving a constant image preserves it") {
  ImageTensor img(24, 24, 3);
  for (double& v : img.data) v = 0.625;
  const BlurKernel k = make_isotropic_gaussian(5, 1.3);
  const ImageTensor out = convolve(img, k, Boundary::replicate);
  REQUIRE(max_abs_diff(out, img) < 1e-6);
}

TEST_CASE("impulse response embeds the kernel unflipped") {
  // true convolution: delta * k == k
  const BlurKernel k = random_kernel(17, 99);
  ImageTensor img(17, 17, 1);
  img.at(8, 8, 0) = 1.0;
  const ImageTensor out = convolve(img, k, Boundary::zero);
  for (int y = 0; y < 17; ++y)
    for (int x = 0; x < 17; ++x)
      REQUIRE(out.at(y, x, 0) == Catch::Approx(k.at(y, x)).margin(1e-12));
}

TEST_CASE("direct path matches brute-force oracle") {
  const ImageTensor img = random_image(8, 8, 3, 7);
  const BlurKernel k = random_kernel(3, 8);
  const ImageTensor got = convolve(img, k, Boundary::replicate, ConvPath::direct);
  const ImageTensor want = conv_oracle(img, k, Boundary::replicate);
  REQUIRE(max_abs_diff(got, want) < 1e-6);
}

TEST_CASE("fft and direct paths agree on all boundary modes") {
  Rng rng(42);
  for (int trial = 0; trial < 25; ++trial) {
    const int h = 6 + static_cast<int>(rng.uniform_int(11));
    const int w = 6 + static_cast<int>(rng.uniform_int(11));
    const int ks = 3 + 2 * static_cast<int>(rng.uniform_int(2));
    if (ks > std::min(h, w)) continue;
    const ImageTensor img = random_image(h, w, 1, rng.next_u64());
    const BlurKernel k = random_kernel(ks, rng.next_u64());
    for (Boundary b : {Boundary::replicate, Boundary::zero, Boundary::circular}) {
      const ImageTensor d = convolve(img, k, b, ConvPath::direct);
      const ImageTensor f = convolve(img, k, b, ConvPath::fft);
      REQUIRE(max_abs_diff(d, f) < 1e-5);
    }
  }
}

TEST_CASE("kernel larger than image is rejected") {
  const ImageTensor img = random_image(8, 8, 1, 3);
  REQUIRE_THROWS_AS(convolve(img, make_isotropic_gaussian(9, 1.0), Boundary::zero),
                    ValidationError);
}

TEST_CASE("zero-sigma noise returns the input exactly") {
  const ImageTensor img = random_image(16, 16, 3, 5);
  const ImageTensor out = add_noise(img, 0.0, 123);
  REQUIRE(out.data == img.data);
  REQUIRE_THROWS_AS(add_noise(img, -0.1, 1), ValidationError);
}

TEST_CASE("noise is deterministic given seed") {
  const ImageTensor img = random_image(16, 16, 3, 5);
  const ImageTensor a = add_noise(img, 0.01, 7);
  const ImageTensor b = add_noise(img, 0.01, 7);
  REQUIRE(a.data == b.data);
  const ImageTensor c = add_noise(img, 0.01, 8);
  REQUIRE(a.data != c.data);
}

TEST_CASE("noise sample standard deviation is near sigma") {
  ImageTensor img(256, 256, 1);
  for (double& v : img.data) v = 0.5;
  const ImageTensor out = add_noise(img, 0.01, 11);
  double mean = 0.0;
  for (size_t i = 0; i < out.data.size(); ++i) mean += out.data[i] - img.data[i];
  mean /= static_cast<double>(out.data.size());
  double var = 0.0;
  for (size_t i = 0; i < out.data.size(); ++i) {
    const double d = out.data[i] - img.data[i] - mean;
    var += d * d;
  }
  var /= static_cast<double>(out.data.size() - 1);
  const double sd = std::sqrt(var);
  REQUIRE(sd > 0.009);
  REQUIRE(sd < 0.011);
}

TEST_CASE("synthesize_blur: constancy, determinism, monotone degradation") {
  ImageTensor flat(64, 64, 3);
  for (double& v : flat.data) v = 0.4;
  const BlurSpec spec1{KernelKind::isotropic, 17, 1.0, 1.0, 0.0};
  const BlurSpec spec4{KernelKind::isotropic, 17, 4.0, 4.0, 0.0};

  const auto flat_out = synthesize_blur(flat, spec1, 0.0, 1);
  REQUIRE(max_abs_diff(flat_out.blurred, flat) < 1e-6);

  const ImageTensor tex = fractal_texture(64, 64, 3, 21);
  const auto a = synthesize_blur(tex, spec1, 0.0, 2);
  const auto b = synthesize_blur(tex, spec1, 0.0, 2);
  REQUIRE(a.blurred.data == b.blurred.data);

  const auto wide = synthesize_blur(tex, spec4, 0.0, 2);
  const double p1 = psnr(a.blurred, tex);
  const double p4 = psnr(wide.blurred, tex);
  REQUIRE(std::isfinite(p1));
  REQUIRE(p1 > p4);
}

TEST_CASE("psnr of blurred vs sharp is non-increasing in sigma") {
  const ImageTensor tex = fractal_texture(96, 96, 1, 77);
  double prev = std::numeric_limits<double>::infinity();
  for (double s : {1.0, 2.0, 3.0, 4.0}) {
    const auto syn =
        synthesize_blur(tex, BlurSpec{KernelKind::isotropic, 17, s, s, 0.0}, 0.0, 3);
    const double p = psnr(syn.blurred, tex);
    REQUIRE(p <= prev);
    prev = p;
  }
}

TEST_CASE("wiener with the true kernel inverts circular blur") {
  const BlurKernel k = make_isotropic_gaussian(17, 1.0);
  const ImageTensor s = fractal_texture(96, 96, 3, 31);
  const ImageTensor b = convolve(s, k, Boundary::circular);
  const ImageTensor rec = wiener_deconvolve(b, k, 0.0);
  REQUIRE(max_abs_diff(rec, s) < 1e-3);
}

TEST_CASE("wiener with delta kernel is identity") {
  const ImageTensor b = random_image(40, 40, 3, 17);
  const ImageTensor out = wiener_deconvolve(b, delta_kernel(17), 0.0);
  REQUIRE(max_abs_diff(out, b) < 1e-6);
}

TEST_CASE("wiener with nonzero nsr stays bounded and improves psnr") {
  const ImageTensor s = fractal_texture(96, 96, 3, 53);
  const BlurKernel k = make_isotropic_gaussian(17, 2.0);
  const ImageTensor b = convolve(s, k, Boundary::circular);
  const ImageTensor out = wiener_deconvolve(b, k, 0.01);
  for (double v : out.data) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }
  REQUIRE(psnr(out, s) > psnr(b, s));
}

TEST_CASE("dataset generation is deterministic and counts match") {
  TmpDir src("bika_src");
  for (int i = 0; i < 4; ++i)
    save_png(fractal_texture(96, 96, 3, 100 + i),
             (src.path / ("img" + std::to_string(i) + ".png")).string());

  TmpDir out1("bika_ds1");
  TmpDir out2("bika_ds2");
  GenerateOptions opt;
  opt.sharp_dir = src.str();
  opt.crop = 64;
  opt.count = 32;
  opt.seed = 1;
  opt.out_dir = out1.str();
  const DatasetManifest m1 = generate_dataset(opt);
  opt.out_dir = out2.str();
  const DatasetManifest m2 = generate_dataset(opt);

  REQUIRE(m1.samples.size() == 32);
  REQUIRE(read_bytes((out1.path / "manifest.json").string()) ==
          read_bytes((out2.path / "manifest.json").string()));
  for (size_t i = 0; i < m1.samples.size(); ++i) {
    REQUIRE(m1.samples[i].kernel_index == m2.samples[i].kernel_index);
    REQUIRE(m1.samples[i].per_sample_seed == (1ull ^ static_cast<uint64_t>(i)));
  }
  validate_manifest_files(m1);

  const DatasetManifest loaded = load_manifest((out1.path / "manifest.json").string());
  REQUIRE(loaded.samples.size() == 32);
  REQUIRE(loaded.bank.size() == 16);
}

TEST_CASE("kernel choices are uniform over the bank") {
  TmpDir src("bika_src_freq");
  save_png(fractal_texture(64, 64, 1, 5), (src.path / "img.png").string());
  TmpDir out("bika_ds_freq");
  GenerateOptions opt;
  opt.sharp_dir = src.str();
  opt.crop = 24;
  opt.count = 1600;
  opt.seed = 9;
  opt.out_dir = out.str();
  opt.bank = default_bank_specs(17);
  const DatasetManifest m = generate_dataset(opt);
  std::vector<int> counts(16, 0);
  for (const auto& s : m.samples) counts[static_cast<size_t>(s.kernel_index)]++;
  for (int c : counts) {
    const double f = static_cast<double>(c) / 1600.0;
    REQUIRE(f > 1.0 / 16.0 - 0.03);
    REQUIRE(f < 1.0 / 16.0 + 0.03);
  }
}

TEST_CASE("dataset generation rejects bad inputs") {
  TmpDir empty("bika_empty");
  GenerateOptions opt;
  opt.sharp_dir = empty.str();
  opt.out_dir = (empty.path / "out").string();
  REQUIRE_THROWS_AS(generate_dataset(opt), ValidationError);

  TmpDir src("bika_src_small");
  save_png(fractal_texture(32, 32, 1, 1), (src.path / "img.png").string());
  opt.sharp_dir = src.str();
  opt.crop = 64;
  REQUIRE_THROWS_AS(generate_dataset(opt), ValidationError);
}
