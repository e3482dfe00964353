#pragma once

#include <json.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "bika/autodiff.hpp"
#include "bika/image.hpp"
#include "bika/kernel.hpp"
#include "bika/motion.hpp"
#include "bika/params.hpp"

namespace bika {

enum class NetMode { kernel_adain, motion_concat };
enum class LossKind { mae, mse };

// Restoration trunk: full-resolution stem, N residual AE blocks whose
// bottlenecks are conditioned on the kernel (AdaIN styles from a mapping
// network) or on a motion flow (channel concat + 1x1 fuse), a long-term skip
// from the stem into every bottleneck, and a zero-initialized head added onto
// the input image.
struct BikanetConfig {
  NetMode mode = NetMode::kernel_adain;
  int blocks = 8;       // N
  int width = 64;       // F
  int kernel_size = 17;
  int mapping_width = 256;
  int mapping_layers = 4;  // total linear layers, >= 2
  bool no_kernel_ae = false;
  bool no_lts = false;

  int bottleneck() const { return 4 * width; }
  int kernel_dim() const { return kernel_size * kernel_size; }
  // two conditioned layers per block, scale + bias each, bottleneck channels
  int mapping_out_dim() const { return blocks * 2 * 2 * bottleneck(); }
  bool has_mapping() const {
    return mode == NetMode::kernel_adain && !no_kernel_ae;
  }

  void validate() const {
    check(blocks >= 1, "blocks must be >= 1");
    check(width >= 1, "width must be >= 1");
    check(kernel_size >= 3 && kernel_size % 2 == 1, "bad kernel size");
    check(mapping_layers >= 2, "mapping_layers must be >= 2");
    if (mode == NetMode::motion_concat)
      check(!no_kernel_ae, "no_kernel_ae is not applicable in motion mode");
  }
};

inline nlohmann::ordered_json bikanet_config_to_json(const BikanetConfig& c) {
  nlohmann::ordered_json j;
  j["mode"] = c.mode == NetMode::kernel_adain ? "kernel_adain" : "motion_concat";
  j["blocks"] = c.blocks;
  j["width"] = c.width;
  j["kernel_size"] = c.kernel_size;
  j["mapping_width"] = c.mapping_width;
  j["mapping_layers"] = c.mapping_layers;
  j["no_kernel_ae"] = c.no_kernel_ae;
  j["no_lts"] = c.no_lts;
  return j;
}

inline BikanetConfig bikanet_config_from_json(const nlohmann::json& j) {
  BikanetConfig c;
  const std::string mode = j.at("mode").get<std::string>();
  check(mode == "kernel_adain" || mode == "motion_concat", "bad mode: " + mode);
  c.mode = mode == "kernel_adain" ? NetMode::kernel_adain : NetMode::motion_concat;
  c.blocks = j.at("blocks").get<int>();
  c.width = j.at("width").get<int>();
  c.kernel_size = j.at("kernel_size").get<int>();
  c.mapping_width = j.at("mapping_width").get<int>();
  c.mapping_layers = j.at("mapping_layers").get<int>();
  c.no_kernel_ae = j.at("no_kernel_ae").get<bool>();
  c.no_lts = j.at("no_lts").get<bool>();
  c.validate();
  return c;
}

namespace detail {

inline Tensor he_conv(std::vector<int64_t> shape, int fan_in, Rng& rng) {
  return tensor_randn(std::move(shape), rng, std::sqrt(2.0 / fan_in));
}

}  // namespace detail

// Parameter construction. Order here is the canonical checkpoint order.
inline NamedTensors bikanet_init(const BikanetConfig& c, Rng& rng) {
  c.validate();
  const int f = c.width, f2 = 2 * c.width, f4 = c.bottleneck();
  NamedTensors p;
  p.add("stem.conv1.w", detail::he_conv({f, 3, 3, 3}, 3 * 9, rng));
  p.add("stem.conv1.b", Tensor({f}));
  p.add("stem.conv2.w", detail::he_conv({f, f, 3, 3}, f * 9, rng));
  p.add("stem.conv2.b", Tensor({f}));
  for (int i = 0; i < c.blocks; ++i) {
    const std::string b = "block" + std::to_string(i) + ".";
    p.add(b + "enc1.w", detail::he_conv({f2, f, 3, 3}, f * 9, rng));
    p.add(b + "enc1.b", Tensor({f2}));
    p.add(b + "enc2.w", detail::he_conv({f4, f2, 3, 3}, f2 * 9, rng));
    p.add(b + "enc2.b", Tensor({f4}));
    if (c.mode == NetMode::motion_concat) {
      p.add(b + "fuse.w", detail::he_conv({f4, f4 + 2, 1, 1}, f4 + 2, rng));
      p.add(b + "fuse.b", Tensor({f4}));
    }
    p.add(b + "bn1.w", detail::he_conv({f4, f4, 3, 3}, f4 * 9, rng));
    p.add(b + "bn1.b", Tensor({f4}));
    if (!c.no_lts) {
      p.add(b + "skip.w", detail::he_conv({f4, f, 1, 1}, f, rng));
      p.add(b + "skip.b", Tensor({f4}));
    }
    p.add(b + "bn2.w", detail::he_conv({f4, f4, 3, 3}, f4 * 9, rng));
    p.add(b + "bn2.b", Tensor({f4}));
    p.add(b + "dec1.w", detail::he_conv({f4, f2, 4, 4}, f4 * 16, rng));
    p.add(b + "dec1.b", Tensor({f2}));
    p.add(b + "dec2.w", detail::he_conv({f2, f, 4, 4}, f2 * 16, rng));
    p.add(b + "dec2.b", Tensor({f}));
  }
  if (c.has_mapping()) {
    const int w = c.mapping_width, d = c.mapping_out_dim(), in = c.kernel_dim();
    for (int l = 0; l < c.mapping_layers; ++l) {
      const std::string name = "map.l" + std::to_string(l) + ".";
      const int li = l == 0 ? in : w;
      const int lo = l == c.mapping_layers - 1 ? d : w;
      if (l == c.mapping_layers - 1) {
        // zero output layer: identity AdaIN at init
        p.add(name + "w", Tensor({lo, li}));
      } else {
        p.add(name + "w", detail::he_conv({lo, li}, li, rng));
      }
      p.add(name + "b", Tensor({lo}));
    }
  }
  p.add("head.conv1.w", detail::he_conv({f, f, 3, 3}, f * 9, rng));
  p.add("head.conv1.b", Tensor({f}));
  p.add("head.conv2.w", Tensor({3, f, 3, 3}));  // zero: residual identity at init
  p.add("head.conv2.b", Tensor({3}));
  return p;
}

inline int64_t bikanet_mapping_count(const BikanetConfig& c) {
  const int64_t w = c.mapping_width, d = c.mapping_out_dim(), in = c.kernel_dim();
  int64_t n = in * w + w;                            // first layer
  n += (c.mapping_layers - 2) * (w * w + w);         // hidden layers
  n += w * d + d;                                    // output layer
  return n;
}

inline int64_t bikanet_lts_count(const BikanetConfig& c) {
  return static_cast<int64_t>(c.blocks) * (static_cast<int64_t>(c.bottleneck()) * c.width +
                                           c.bottleneck());
}

// Closed-form parameter count; asserted against the actual tensors in tests.
inline int64_t bikanet_param_count(const BikanetConfig& c) {
  const int64_t f = c.width, f2 = 2 * f, f4 = c.bottleneck();
  int64_t n = 0;
  n += f * 3 * 9 + f + f * f * 9 + f;                     // stem
  int64_t per_block = f2 * f * 9 + f2 + f4 * f2 * 9 + f4  // encoder
                      + 2 * (f4 * f4 * 9 + f4)            // bottleneck convs
                      + f4 * f2 * 16 + f2 + f2 * f * 16 + f;  // decoder
  if (!c.no_lts) per_block += f4 * f + f4;
  if (c.mode == NetMode::motion_concat) per_block += f4 * (f4 + 2) + f4;
  n += c.blocks * per_block;
  if (c.has_mapping()) n += bikanet_mapping_count(c);
  n += f * f * 9 + f + 3 * f * 9 + 3;  // head
  return n;
}

// Flattened kernel row for the mapping network
inline Tensor kernel_to_row(const BlurKernel& k) {
  Tensor t({1, static_cast<int64_t>(k.size) * k.size});
  t.data.assign(k.values.begin(), k.values.end());
  return t;
}

inline Tensor flow_to_nchw(const MotionFlowField& f) {
  Tensor t({1, 2, f.h, f.w});
  for (int y = 0; y < f.h; ++y)
    for (int x = 0; x < f.w; ++x) {
      t.at(0, 0, y, x) = f.u(y, x);
      t.at(0, 1, y, x) = f.v(y, x);
    }
  return t;
}

inline Tensor pad_nchw_replicate(const Tensor& x, int hp, int wp) {
  check(x.rank() == 4, "pad expects 4-D");
  const int n = static_cast<int>(x.dim(0)), c = static_cast<int>(x.dim(1)),
            h = static_cast<int>(x.dim(2)), w = static_cast<int>(x.dim(3));
  check(hp >= h && wp >= w, "pad target smaller than input");
  Tensor out({n, c, hp, wp});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < hp; ++y)
        for (int xx = 0; xx < wp; ++xx)
          out.at(i, ch, y, xx) = x.at(i, ch, std::min(y, h - 1), std::min(xx, w - 1));
  return out;
}

// Per-block AdaIN styles produced by the mapping network. Scales go through
// (1 + raw) so a zero output layer conditions with the identity.
struct BlockStyles {
  int scale1, bias1, scale2, bias2;  // node ids, each (n, bottleneck)
};

inline std::vector<BlockStyles> mapping_forward(ad::Tape& t, const BoundParams& bp,
                                                int kernel_rows, const BikanetConfig& c) {
  check(t.val(kernel_rows).rank() == 2 &&
            t.val(kernel_rows).dim(1) == c.kernel_dim(),
        "mapping input must be (n, kernel_size^2)");
  int h = kernel_rows;
  for (int l = 0; l < c.mapping_layers; ++l) {
    const std::string name = "map.l" + std::to_string(l) + ".";
    h = t.linear(h, bp.id(name + "w"), bp.id(name + "b"));
    if (l + 1 < c.mapping_layers) h = t.relu(h);
  }
  std::vector<BlockStyles> styles;
  const int f4 = c.bottleneck();
  for (int i = 0; i < c.blocks; ++i) {
    const int base = i * 4 * f4;
    BlockStyles s;
    s.scale1 = t.affine(t.slice_cols(h, base, base + f4), 1.0, 1.0);
    s.bias1 = t.slice_cols(h, base + f4, base + 2 * f4);
    s.scale2 = t.affine(t.slice_cols(h, base + 2 * f4, base + 3 * f4), 1.0, 1.0);
    s.bias2 = t.slice_cols(h, base + 3 * f4, base + 4 * f4);
    styles.push_back(s);
  }
  return styles;
}

// One kernel-adaptive AE block. x and coarse are (n, F, H, W) with H, W
// divisible by 4; styles condition the two bottleneck convs; flow_ds, when
// >= 0, is concatenated at the bottleneck entry instead.
inline int block_forward(ad::Tape& t, const BoundParams& bp, const std::string& prefix, int x,
                         int coarse, const BlockStyles* styles, int flow, bool lts) {
  int h = t.relu(t.conv2d(x, bp.id(prefix + "enc1.w"), bp.id(prefix + "enc1.b"), 2, 1));
  h = t.relu(t.conv2d(h, bp.id(prefix + "enc2.w"), bp.id(prefix + "enc2.b"), 2, 1));
  if (flow >= 0) {
    const int flow_ds = t.avg_pool(flow, 4);
    h = t.relu(t.conv2d(t.concat_ch(h, flow_ds), bp.id(prefix + "fuse.w"),
                        bp.id(prefix + "fuse.b"), 1, 0));
  }
  h = t.conv2d(h, bp.id(prefix + "bn1.w"), bp.id(prefix + "bn1.b"), 1, 1);
  if (styles) h = t.adain(h, styles->scale1, styles->bias1);
  h = t.relu(h);
  if (lts) {
    const int coarse_ds = t.avg_pool(coarse, 4);
    const int proj =
        t.conv2d(coarse_ds, bp.id(prefix + "skip.w"), bp.id(prefix + "skip.b"), 1, 0);
    h = t.add(h, proj);
  }
  h = t.conv2d(h, bp.id(prefix + "bn2.w"), bp.id(prefix + "bn2.b"), 1, 1);
  if (styles) h = t.adain(h, styles->scale2, styles->bias2);
  h = t.relu(h);
  h = t.relu(t.conv2d_transpose(h, bp.id(prefix + "dec1.w"), bp.id(prefix + "dec1.b"), 2, 1));
  h = t.conv2d_transpose(h, bp.id(prefix + "dec2.w"), bp.id(prefix + "dec2.b"), 2, 1);
  return t.add(x, h);
}

// Full forward. b is (n,3,H,W) with H, W divisible by 4. cond is the
// (n, k^2) kernel rows in kernel mode, or the (n,2,H,W) flow in motion mode
// (pass -1 with no_kernel_ae to run unconditioned). Returns b + head(trunk).
inline int bikanet_forward(ad::Tape& t, const BoundParams& bp, int b, int cond,
                           const BikanetConfig& c) {
  const Tensor& bv = t.val(b);
  check(bv.rank() == 4 && bv.dim(1) == 3, "bikanet expects (n,3,h,w) input");
  check(bv.dim(2) % 4 == 0 && bv.dim(3) % 4 == 0,
        "bikanet input dims must be divisible by 4 (pad first)");
  std::vector<BlockStyles> styles;
  int flow = -1;
  if (c.mode == NetMode::kernel_adain) {
    if (c.has_mapping()) {
      check(cond >= 0, "kernel conditioning input missing");
      check(t.val(cond).dim(0) == bv.dim(0), "kernel batch mismatch");
      styles = mapping_forward(t, bp, cond, c);
    }
  } else {
    check(cond >= 0, "flow conditioning input missing");
    const Tensor& fv = t.val(cond);
    check(fv.rank() == 4 && fv.dim(0) == bv.dim(0) && fv.dim(1) == 2 &&
              fv.dim(2) == bv.dim(2) && fv.dim(3) == bv.dim(3),
          "flow dims must match image");
    flow = cond;
  }

  int h = t.relu(t.conv2d(b, bp.id("stem.conv1.w"), bp.id("stem.conv1.b"), 1, 1));
  const int coarse = t.relu(t.conv2d(h, bp.id("stem.conv2.w"), bp.id("stem.conv2.b"), 1, 1));
  int x = coarse;
  for (int i = 0; i < c.blocks; ++i) {
    const std::string prefix = "block" + std::to_string(i) + ".";
    x = block_forward(t, bp, prefix, x, coarse, styles.empty() ? nullptr : &styles[i], flow,
                      !c.no_lts);
  }
  int head = t.relu(t.conv2d(x, bp.id("head.conv1.w"), bp.id("head.conv1.b"), 1, 1));
  head = t.conv2d(head, bp.id("head.conv2.w"), bp.id("head.conv2.b"), 1, 1);
  return t.add(b, head);
}

inline int reconstruction_loss(ad::Tape& t, int s_hat, int s, LossKind kind) {
  return kind == LossKind::mae ? t.mean_abs_diff(s_hat, s) : t.mean_sq_diff(s_hat, s);
}

// Inference on one image: pads to a multiple of 4, runs the trunk without
// gradients, crops back and clamps to [0,1].
inline ImageTensor bikanet_apply(const NamedTensors& params, const BikanetConfig& c,
                                 const ImageTensor& blurred, const BlurKernel* kernel,
                                 const MotionFlowField* flow) {
  check(blurred.c == 3, "bikanet_apply expects RGB input");
  const int hp = (blurred.h + 3) / 4 * 4, wp = (blurred.w + 3) / 4 * 4;
  ad::Tape t;
  BoundParams bp = bind_params(t, params, false);
  const int b = t.leaf(pad_nchw_replicate(image_to_nchw(blurred), hp, wp), false);
  int cond = -1;
  if (c.mode == NetMode::kernel_adain) {
    if (c.has_mapping()) {
      check(kernel != nullptr, "kernel required in kernel mode");
      check(kernel->size == c.kernel_size, "kernel size mismatch");
      cond = t.leaf(kernel_to_row(*kernel), false);
    }
  } else {
    check(flow != nullptr, "flow required in motion mode");
    check(flow->h == blurred.h && flow->w == blurred.w, "flow dims mismatch");
    MotionFlowField padded(hp, wp);
    for (int y = 0; y < hp; ++y)
      for (int x = 0; x < wp; ++x) {
        padded.u(y, x) = flow->u(std::min(y, flow->h - 1), std::min(x, flow->w - 1));
        padded.v(y, x) = flow->v(std::min(y, flow->h - 1), std::min(x, flow->w - 1));
      }
    cond = t.leaf(flow_to_nchw(padded), false);
  }
  const int out = bikanet_forward(t, bp, b, cond, c);
  const int cropped = t.crop_hw(out, 0, 0, blurred.h, blurred.w);
  ImageTensor img = nchw_to_image(t.val(cropped));
  img.clamp01();
  img.color = blurred.color;
  return img;
}

}  // namespace bika
