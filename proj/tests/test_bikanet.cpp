#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "bika/bikanet.hpp"
#include "bika/checkpoint.hpp"
#include "bika/degradation.hpp"
#include "bika/metrics.hpp"

using namespace bika;
namespace fs = std::filesystem;

namespace {

BikanetConfig desk_config(int blocks = 2, int width = 8) {
  BikanetConfig c;
  c.blocks = blocks;
  c.width = width;
  c.mapping_width = 32;
  return c;
}

void randomize(NamedTensors& p, Rng& rng, double stddev = 0.05) {
  for (auto& [name, t] : p.items)
    for (double& v : t.data) v = stddev * rng.normal();
}

double max_abs(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

std::string read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("mapping output dimension follows the config arithmetic") {
  BikanetConfig c;
  c.blocks = 8;
  c.width = 64;
  REQUIRE(c.bottleneck() == 256);
  REQUIRE(c.mapping_out_dim() == 8 * 2 * 2 * 256);
}

TEST_CASE("zero-initialized mapping emits identity AdaIN styles") {
  const BikanetConfig c = desk_config();
  Rng rng(1);
  NamedTensors p = bikanet_init(c, rng);
  ad::Tape t;
  const BoundParams bp = bind_params(t, p, false);
  const int krow = t.leaf(kernel_to_row(make_isotropic_gaussian(17, 2.0)), false);
  const auto styles = mapping_forward(t, bp, krow, c);
  REQUIRE(styles.size() == 2);
  for (const auto& s : styles) {
    for (double v : t.val(s.scale1).data) REQUIRE(v == Catch::Approx(1.0).margin(1e-12));
    for (double v : t.val(s.bias1).data) REQUIRE(v == Catch::Approx(0.0).margin(1e-12));
    for (double v : t.val(s.scale2).data) REQUIRE(v == Catch::Approx(1.0).margin(1e-12));
    for (double v : t.val(s.bias2).data) REQUIRE(v == Catch::Approx(0.0).margin(1e-12));
  }
}

TEST_CASE("distinct kernels give distinct styles under random init") {
  const BikanetConfig c = desk_config();
  Rng rng(2);
  NamedTensors p = bikanet_init(c, rng);
  randomize(p, rng);
  ad::Tape t;
  const BoundParams bp = bind_params(t, p, false);
  const int k1 = t.leaf(kernel_to_row(make_isotropic_gaussian(17, 1.0)), false);
  const int k2 = t.leaf(kernel_to_row(make_isotropic_gaussian(17, 3.0)), false);
  const auto s1 = mapping_forward(t, bp, k1, c);
  const auto s2 = mapping_forward(t, bp, k2, c);
  double diff = 0.0;
  for (size_t i = 0; i < s1.size(); ++i)
    diff = std::max({diff, max_abs(t.val(s1[i].scale1), t.val(s2[i].scale1)),
                     max_abs(t.val(s1[i].bias1), t.val(s2[i].bias1))});
  REQUIRE(diff > 0.0);
}

TEST_CASE("block preserves spatial shape") {
  const BikanetConfig c = desk_config(1, 8);
  Rng rng(3);
  NamedTensors p = bikanet_init(c, rng);
  randomize(p, rng);
  for (int size : {64, 96, 256}) {
    ad::Tape t;
    const BoundParams bp = bind_params(t, p, false);
    Rng xr(size);
    const int x = t.leaf(tensor_randn({1, 8, size, size}, xr, 1.0), false);
    const int out = block_forward(t, bp, "block0.", x, x, nullptr, -1, true);
    REQUIRE(t.val(out).shape == std::vector<int64_t>({1, 8, size, size}));
  }
}

TEST_CASE("block with zero weights is the identity") {
  const BikanetConfig c = desk_config(1, 8);
  Rng rng(4);
  NamedTensors p = bikanet_init(c, rng);
  for (auto& [name, tns] : p.items)
    if (name.rfind("block0.", 0) == 0) tns.fill(0.0);
  ad::Tape t;
  const BoundParams bp = bind_params(t, p, false);
  Rng xr(5);
  const Tensor xin = tensor_randn({1, 8, 32, 32}, xr, 1.0);
  const int x = t.leaf(xin, false);
  const int out = block_forward(t, bp, "block0.", x, x, nullptr, -1, true);
  REQUIRE(max_abs(t.val(out), xin) == 0.0);
}

TEST_CASE("long-term skip input carries gradient") {
  const BikanetConfig c = desk_config(1, 8);
  Rng rng(6);
  NamedTensors p = bikanet_init(c, rng);
  randomize(p, rng);
  ad::Tape t;
  const BoundParams bp = bind_params(t, p, false);
  Rng xr(7);
  const int x = t.leaf(tensor_randn({1, 8, 16, 16}, xr, 1.0), false);
  const int coarse = t.leaf(tensor_randn({1, 8, 16, 16}, xr, 1.0), true);
  const int out = block_forward(t, bp, "block0.", x, coarse, nullptr, -1, true);
  const int loss = t.mse_to_const(out, 0.0);
  t.backward(loss);
  REQUIRE(t.has_grad(coarse));
  double g = 0.0;
  for (double v : t.grad(coarse).data) g = std::max(g, std::abs(v));
  REQUIRE(g > 0.0);
}

TEST_CASE("freshly initialized network is the identity map") {
  const BikanetConfig c = desk_config();
  Rng rng(8);
  const NamedTensors p = bikanet_init(c, rng);
  const ImageTensor b = fractal_texture(32, 32, 3, 9);
  const BlurKernel k = make_isotropic_gaussian(17, 2.0);
  const ImageTensor out = bikanet_apply(p, c, b, &k, nullptr);
  REQUIRE(mse(out, b) < 1e-12);
}

TEST_CASE("network output depends on the kernel and carries gradient to it") {
  const BikanetConfig c = desk_config();
  Rng rng(10);
  NamedTensors p = bikanet_init(c, rng);
  randomize(p, rng);
  const ImageTensor b = fractal_texture(16, 16, 3, 11);
  const BlurKernel k1 = make_isotropic_gaussian(17, 1.0);
  const BlurKernel k2 = make_anisotropic_gaussian(17, 3, 1, 0.5);
  const ImageTensor o1 = bikanet_apply(p, c, b, &k1, nullptr);
  const ImageTensor o2 = bikanet_apply(p, c, b, &k2, nullptr);
  double diff = 0.0;
  for (size_t i = 0; i < o1.data.size(); ++i)
    diff = std::max(diff, std::abs(o1.data[i] - o2.data[i]));
  REQUIRE(diff > 0.0);

  ad::Tape t;
  const BoundParams bp = bind_params(t, p, false);
  const int bn = t.leaf(image_to_nchw(b), false);
  const int kn = t.leaf(kernel_to_row(k1), true);
  const int out = bikanet_forward(t, bp, bn, kn, c);
  const int loss = t.mse_to_const(out, 0.0);
  t.backward(loss);
  REQUIRE(t.has_grad(kn));
  double g = 0.0;
  for (double v : t.grad(kn).data) g = std::max(g, std::abs(v));
  REQUIRE(g > 0.0);
}

TEST_CASE("non-multiple-of-4 inputs are padded and cropped transparently") {
  const BikanetConfig c = desk_config();
  Rng rng(12);
  NamedTensors p = bikanet_init(c, rng);
  randomize(p, rng);
  const ImageTensor b = fractal_texture(123, 77, 3, 13);
  const BlurKernel k = make_isotropic_gaussian(17, 2.0);
  const ImageTensor out = bikanet_apply(p, c, b, &k, nullptr);
  REQUIRE(out.h == 123);
  REQUIRE(out.w == 77);
}

TEST_CASE("motion mode: identity at init, flow conditioning live, shape kept") {
  BikanetConfig c = desk_config();
  c.mode = NetMode::motion_concat;
  Rng rng(14);
  NamedTensors p = bikanet_init(c, rng);

  const ImageTensor b = fractal_texture(100, 100, 3, 15);
  MotionFlowField zero_flow(100, 100);
  const ImageTensor out0 = bikanet_apply(p, c, b, nullptr, &zero_flow);
  REQUIRE(mse(out0, b) < 1e-12);

  randomize(p, rng);
  const MotionFlowField f1 = random_affine_flow(100, 100, 5.0, 1);
  const MotionFlowField f2 = random_affine_flow(100, 100, 5.0, 2);
  const ImageTensor o1 = bikanet_apply(p, c, b, nullptr, &f1);
  const ImageTensor o2 = bikanet_apply(p, c, b, nullptr, &f2);
  REQUIRE(o1.h == 100);
  REQUIRE(o1.w == 100);
  double diff = 0.0;
  for (size_t i = 0; i < o1.data.size(); ++i)
    diff = std::max(diff, std::abs(o1.data[i] - o2.data[i]));
  REQUIRE(diff > 0.0);
}

TEST_CASE("motion blur synthesis: zero flow is the identity") {
  const ImageTensor s = fractal_texture(48, 48, 3, 16);
  MotionFlowField zero(48, 48);
  const ImageTensor out = synthesize_motion_blur(s, zero, 17);
  REQUIRE(mse(out, s) == 0.0);
}

TEST_CASE("constant horizontal flow equals 1-D averaging oracle") {
  const ImageTensor s = fractal_texture(40, 40, 1, 17);
  MotionFlowField flow(40, 40);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x) flow.u(y, x) = 5.0;
  const int steps = 17;
  const ImageTensor got = synthesize_motion_blur(s, flow, steps);

  // tap kernel: average of `steps` bilinear hats along [-2.5, 2.5]
  std::vector<double> taps(7, 0.0);  // j in [-3, 3]
  for (int t = 0; t < steps; ++t) {
    const double o = (static_cast<double>(t) / (steps - 1) - 0.5) * 5.0;
    for (int j = -3; j <= 3; ++j)
      taps[static_cast<size_t>(j + 3)] += std::max(0.0, 1.0 - std::abs(j - o)) / steps;
  }
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x) {
      double want = 0.0;
      for (int j = -3; j <= 3; ++j) {
        const int xx = std::clamp(x + j, 0, 39);
        want += taps[static_cast<size_t>(j + 3)] * s.at(y, xx, 0);
      }
      REQUIRE(got.at(y, x, 0) == Catch::Approx(want).margin(1e-3));
    }
}

TEST_CASE("psnr decreases as flow magnitude grows") {
  const ImageTensor s = fractal_texture(64, 64, 3, 18);
  double prev = std::numeric_limits<double>::infinity();
  for (double mag : {2.0, 5.0, 9.0}) {
    MotionFlowField flow(64, 64);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) flow.u(y, x) = mag;
    const double p = psnr(synthesize_motion_blur(s, flow, 17), s);
    REQUIRE(p < prev);
    prev = p;
  }
  MotionFlowField bad(64, 64);
  bad.u(0, 0) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(synthesize_motion_blur(s, bad, 17), ValidationError);
}

TEST_CASE("reconstruction loss closed forms and gradient") {
  ad::Tape t;
  Rng rng(19);
  const Tensor x = tensor_randn({1, 3, 4, 4}, rng, 0.3);
  const int a = t.leaf(x, false);
  REQUIRE(t.val(reconstruction_loss(t, a, a, LossKind::mae)).data[0] == 0.0);
  Tensor zeros({1, 1, 4, 4}), ones({1, 1, 4, 4});
  ones.fill(1.0);
  const int z = t.leaf(zeros, false);
  const int o = t.leaf(ones, false);
  REQUIRE(t.val(reconstruction_loss(t, z, o, LossKind::mae)).data[0] == 1.0);

  // finite differences on a 4x4 toy
  Rng rng2(20);
  const Tensor s_hat0 = tensor_randn({1, 1, 4, 4}, rng2, 0.5);
  const Tensor target = tensor_randn({1, 1, 4, 4}, rng2, 0.5);
  ad::Tape t2;
  const int sh = t2.leaf(s_hat0, true);
  const int tg = t2.leaf(target, false);
  const int loss = reconstruction_loss(t2, sh, tg, LossKind::mae);
  t2.backward(loss);
  for (int k = 0; k < 16; ++k) {
    const double h = 1e-6;
    Tensor plus = s_hat0, minus = s_hat0;
    plus.data[static_cast<size_t>(k)] += h;
    minus.data[static_cast<size_t>(k)] -= h;
    ad::Tape tp, tm;
    const double fp =
        tp.val(reconstruction_loss(tp, tp.leaf(plus, false), tp.leaf(target, false),
                                   LossKind::mae))
            .data[0];
    const double fm =
        tm.val(reconstruction_loss(tm, tm.leaf(minus, false), tm.leaf(target, false),
                                   LossKind::mae))
            .data[0];
    const double fd = (fp - fm) / (2 * h);
    const double an = t2.grad(sh).data[static_cast<size_t>(k)];
    REQUIRE(std::abs(an - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("parameter count formulas match the actual tensors") {
  for (int blocks : {1, 2, 4}) {
    for (int width : {4, 8}) {
      BikanetConfig c = desk_config(blocks, width);
      Rng rng(21);
      REQUIRE(bikanet_init(c, rng).total_count() == bikanet_param_count(c));

      BikanetConfig cm = c;
      cm.mode = NetMode::motion_concat;
      REQUIRE(bikanet_init(cm, rng).total_count() == bikanet_param_count(cm));
    }
  }
}

TEST_CASE("ablations remove exactly the advertised parameters") {
  const BikanetConfig full = desk_config();
  BikanetConfig no_ae = full;
  no_ae.no_kernel_ae = true;
  BikanetConfig no_lts = full;
  no_lts.no_lts = true;
  Rng rng(22);

  const int64_t full_n = bikanet_init(full, rng).total_count();
  const int64_t no_ae_n = bikanet_init(no_ae, rng).total_count();
  const int64_t no_lts_n = bikanet_init(no_lts, rng).total_count();

  REQUIRE(full_n - no_ae_n == bikanet_mapping_count(full));
  REQUIRE(full_n - no_lts_n == bikanet_lts_count(full));
  REQUIRE(full_n == bikanet_param_count(full));
  REQUIRE(no_ae_n == bikanet_param_count(no_ae));
  REQUIRE(no_lts_n == bikanet_param_count(no_lts));

  // no_lts drops every skip projection tensor
  Rng rng2(23);
  const NamedTensors p = bikanet_init(no_lts, rng2);
  for (const auto& [name, t] : p.items) REQUIRE(name.find("skip.") == std::string::npos);

  BikanetConfig bad = full;
  bad.mode = NetMode::motion_concat;
  bad.no_kernel_ae = true;
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("checkpoint save/load/save is byte-stable and validated") {
  const BikanetConfig c = desk_config();
  Rng rng(24);
  Checkpoint ck;
  ck.config = c;
  ck.params = bikanet_init(c, rng);
  randomize(ck.params, rng);
  ck.adam.init(ck.params);
  ck.adam.t = 42;
  ck.has_optimizer = true;
  ck.iteration = 1234;

  const std::string p1 = (fs::temp_directory_path() / "bika_ck1.bikc").string();
  const std::string p2 = (fs::temp_directory_path() / "bika_ck2.bikc").string();
  save_checkpoint(ck, p1);
  const Checkpoint loaded = load_checkpoint(p1);
  REQUIRE(loaded.iteration == 1234);
  REQUIRE(loaded.adam.t == 42);
  REQUIRE(loaded.has_optimizer);
  REQUIRE(loaded.params.items.size() == ck.params.items.size());
  save_checkpoint(loaded, p2);
  REQUIRE(read_bytes(p1) == read_bytes(p2));
  REQUIRE(read_bytes(p1).substr(0, 5) == "BIKC1");

  std::ofstream(p2, std::ios::binary) << "BIKC1\nbroken";
  REQUIRE_THROWS_AS(load_checkpoint(p2), ValidationError);
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("tiny network analytic gradients match finite differences") {
  BikanetConfig c = desk_config(2, 8);
  Rng rng(25);
  NamedTensors params = bikanet_init(c, rng);
  randomize(params, rng, 0.08);

  const ImageTensor bimg = fractal_texture(16, 16, 3, 26);
  const ImageTensor simg = fractal_texture(16, 16, 3, 27);
  const Tensor b = image_to_nchw(bimg);
  const Tensor s = image_to_nchw(simg);
  const Tensor krow = kernel_to_row(make_isotropic_gaussian(17, 2.0));

  auto loss_value = [&](const NamedTensors& p) {
    ad::Tape t;
    const BoundParams bp = bind_params(t, p, false);
    const int out = bikanet_forward(t, bp, t.leaf(b, false), t.leaf(krow, false), c);
    return t.val(reconstruction_loss(t, out, t.leaf(s, false), LossKind::mse)).data[0];
  };

  ad::Tape t;
  const BoundParams bp = bind_params(t, params, true);
  const int out = bikanet_forward(t, bp, t.leaf(b, false), t.leaf(krow, false), c);
  const int loss = reconstruction_loss(t, out, t.leaf(s, false), LossKind::mse);
  t.backward(loss);

  Rng pick(28);
  int checked = 0;
  while (checked < 60) {
    const size_t ti = pick.uniform_int(params.items.size());
    auto& [name, tensor] = params.items[ti];
    const size_t k = pick.uniform_int(tensor.data.size());
    const double h = 1e-5;
    NamedTensors plus = params, minus = params;
    plus.items[ti].second.data[k] += h;
    minus.items[ti].second.data[k] -= h;
    const double fd = (loss_value(plus) - loss_value(minus)) / (2 * h);
    const int id = bp.id(name);
    const double an = t.has_grad(id) ? t.grad(id).data[k] : 0.0;
    const double scale = std::max({1e-4, std::abs(fd), std::abs(an)});
    INFO(name << "[" << k << "] analytic " << an << " fd " << fd);
    REQUIRE(std::abs(an - fd) / scale <= 1e-3);
    ++checked;
  }
}
