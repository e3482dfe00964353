#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "bika/adam.hpp"
#include "bika/autodiff.hpp"
#include "bika/dataset.hpp"
#include "bika/image.hpp"
#include "bika/kernel.hpp"
#include "bika/params.hpp"

namespace bika {

struct RegWeights {
  double sum_to_one = 0.5;
  double boundary = 0.5;
  double sparsity = 5.0;
  double centrality = 1.0;
};

// Where the generator's input patches come from. downscale2 feeds patches of
// the 2x-decimated image so the generator must re-blur them to look like the
// full-resolution patch distribution (the cross-scale recurrence that the
// KernelGAN lineage relies on); same_scale feeds patches of the image itself.
enum class EstimatorInput { downscale2, same_scale };

struct EstimatorConfig {
  int iterations = 3000;
  int patch = 64;  // generator input patch size
  int batch = 2;
  double lr_gen = 2e-4;
  double lr_disc = 2e-4;
  RegWeights reg;
  uint64_t seed = 0;
  int kernel_size = 17;
  std::vector<int> gen_kernels = {7, 5, 5, 3, 1};  // composed support 17
  int gen_width = 16;
  int disc_layers = 6;
  int disc_width = 32;
  int disc_first_kernel = 7;
  EstimatorInput input = EstimatorInput::downscale2;

  int gen_margin() const {
    int m = 0;
    for (int k : gen_kernels) m += k - 1;
    return m;
  }
  int disc_margin() const { return disc_first_kernel - 1; }

  void validate() const {
    check(iterations >= 1, "iterations must be >= 1");
    check(batch >= 1, "batch must be >= 1");
    check(kernel_size >= 3 && kernel_size % 2 == 1, "bad kernel size");
    check(!gen_kernels.empty(), "generator needs at least one layer");
    for (int k : gen_kernels) check(k >= 1 && k % 2 == 1, "generator kernels must be odd");
    check(gen_margin() + 1 >= kernel_size,
          "composed generator receptive field must cover the kernel window");
    check(patch > gen_margin() + disc_margin(),
          "patch too small for the generator and discriminator stack");
    check(gen_width >= 1 && disc_width >= 1 && disc_layers >= 2, "bad widths");
  }
};

struct KernelEstimate {
  BlurKernel kernel;
  double final_disc_loss = 0.0;
  double final_gen_adv = 0.0;
  double final_reg = 0.0;
  double mass_outside = 0.0;  // fraction moved out of the window by recentering
  bool degenerate_input = false;
  std::vector<std::string> warnings;
};

namespace detail {

inline NamedTensors generator_init(const EstimatorConfig& c, Rng& rng) {
  NamedTensors p;
  const int w = c.gen_width;
  const int layers = static_cast<int>(c.gen_kernels.size());
  for (int l = 0; l < layers; ++l) {
    const int ks = c.gen_kernels[static_cast<size_t>(l)];
    const int ci = l == 0 ? 1 : w;
    const int co = l == layers - 1 ? 1 : w;
    // Xavier keeps the composed linear response O(1) at depth
    p.add("gen.l" + std::to_string(l) + ".w",
          tensor_randn({co, ci, ks, ks}, rng, std::sqrt(1.0 / (ci * ks * ks))));
  }
  return p;
}

inline NamedTensors discriminator_init(const EstimatorConfig& c, Rng& rng) {
  NamedTensors p;
  const int w = c.disc_width;
  for (int l = 0; l < c.disc_layers; ++l) {
    const int ks = l == 0 ? c.disc_first_kernel : 1;
    const int ci = l == 0 ? 1 : w;
    const int co = l == c.disc_layers - 1 ? 1 : w;
    p.add("disc.l" + std::to_string(l) + ".w",
          tensor_randn({co, ci, ks, ks}, rng, std::sqrt(2.0 / (ci * ks * ks))));
    p.add("disc.l" + std::to_string(l) + ".b", Tensor({co}));
  }
  return p;
}

// The generator realizes true convolution: weights are flipped so that its
// action on an image equals convolve(image, extracted_kernel).
inline int generator_forward(ad::Tape& t, const BoundParams& bp, int x,
                             const EstimatorConfig& c) {
  int h = x;
  for (size_t l = 0; l < c.gen_kernels.size(); ++l) {
    int w = bp.id("gen.l" + std::to_string(l) + ".w");
    if (c.gen_kernels[l] > 1) w = t.flip_hw(w);
    h = t.conv2d(h, w, -1, 1, 0);
  }
  return h;
}

inline int discriminator_forward(ad::Tape& t, const BoundParams& bp,
                                 std::vector<ad::Tape::SnState>& sn, int x,
                                 const EstimatorConfig& c) {
  int h = x;
  for (int l = 0; l < c.disc_layers; ++l) {
    const std::string name = "disc.l" + std::to_string(l) + ".";
    const int w = t.spectral_norm(bp.id(name + "w"), sn[static_cast<size_t>(l)]);
    h = t.conv2d(h, w, bp.id(name + "b"), 1, 0);
    if (l + 1 < c.disc_layers) h = t.leaky_relu(h, 0.2);
  }
  return t.sigmoid(h);
}

// Differentiable impulse response of the generator stack: a centered delta
// through the composed valid convolutions yields the raw kernel window.
inline int raw_kernel_node(ad::Tape& t, const BoundParams& bp, const EstimatorConfig& c) {
  const int in = c.gen_margin() + c.kernel_size;  // odd + even(margin) stays odd
  Tensor delta({1, 1, in, in});
  delta.at(0, 0, in / 2, in / 2) = 1.0;
  const int d = t.leaf(delta, false);
  return generator_forward(t, bp, d, c);
}

inline Tensor boundary_mask(int size) {
  Tensor m({1, 1, size, size});
  const double c0 = 0.5 * (size - 1);
  const double r_free = size / 4.0;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double r = std::hypot(i - c0, j - c0);
      const double d = std::max(0.0, r - r_free);
      m.at(0, 0, i, j) = d * d;
    }
  return m;
}

inline int regularization_node(ad::Tape& t, int k_raw, const RegWeights& w, int size) {
  const int sum_term = t.square(t.affine(t.sum(k_raw), 1.0, -1.0));
  const int boundary = t.abs_dot_mask(k_raw, boundary_mask(size));
  const int sparsity = t.pow_abs_smooth(k_raw, 0.5, 1e-4);
  const int central = t.centroid_penalty(k_raw);
  int loss = t.weighted_add(sum_term, w.sum_to_one, boundary, w.boundary);
  loss = t.weighted_add(loss, 1.0, sparsity, w.sparsity);
  loss = t.weighted_add(loss, 1.0, central, w.centrality);
  return loss;
}

}  // namespace detail

// Penalty terms on a raw (pre-projection) kernel window. Mirrors the terms
// used inside the adversarial loop.
struct RegTerms {
  double sum_to_one = 0.0;
  double boundary = 0.0;
  double sparsity = 0.0;
  double centrality = 0.0;
  double total = 0.0;
};

inline RegTerms kernel_regularization(const Tensor& k_raw, const RegWeights& w) {
  check(k_raw.rank() >= 2, "kernel_regularization expects a 2-D window");
  const int size = static_cast<int>(k_raw.dim(k_raw.rank() - 1));
  check(k_raw.numel() == static_cast<int64_t>(size) * size, "kernel window must be square");
  ad::Tape t;
  const int k = t.leaf(Tensor({1, 1, size, size}, k_raw.data), false);
  RegTerms out;
  out.sum_to_one = t.val(t.square(t.affine(t.sum(k), 1.0, -1.0))).data[0];
  out.boundary = t.val(t.abs_dot_mask(k, detail::boundary_mask(size))).data[0];
  out.sparsity = t.val(t.pow_abs_smooth(k, 0.5, 1e-4)).data[0];
  out.centrality = t.val(t.centroid_penalty(k)).data[0];
  out.total = w.sum_to_one * out.sum_to_one + w.boundary * out.boundary +
              w.sparsity * out.sparsity + w.centrality * out.centrality;
  return out;
}

// Projection of the raw impulse response onto the kernel set: clamp negatives,
// recenter the mass centroid onto the window center, renormalize to sum 1.
inline BlurKernel project_kernel(const Tensor& raw, int size, double* mass_outside,
                                 std::vector<std::string>* warnings) {
  check(raw.numel() == static_cast<int64_t>(size) * size, "raw kernel size mismatch");
  std::vector<double> v(raw.data);
  for (double& x : v) x = std::max(x, 0.0);
  double total = 0.0, cy = 0.0, cx = 0.0;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double x = v[static_cast<size_t>(i) * size + j];
      total += x;
      cy += x * i;
      cx += x * j;
    }
  if (total <= 0.0) {
    if (warnings) warnings->push_back("projection collapsed to zero; returning delta");
    return delta_kernel(size);
  }
  const int dy = static_cast<int>(std::lround(cy / total - 0.5 * (size - 1)));
  const int dx = static_cast<int>(std::lround(cx / total - 0.5 * (size - 1)));
  std::vector<double> shifted(static_cast<size_t>(size) * size, 0.0);
  double kept = 0.0;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const int si = i + dy, sj = j + dx;
      if (si < 0 || si >= size || sj < 0 || sj >= size) continue;
      shifted[static_cast<size_t>(i) * size + j] = v[static_cast<size_t>(si) * size + sj];
      kept += v[static_cast<size_t>(si) * size + sj];
    }
  const double outside = 1.0 - kept / total;
  if (mass_outside) *mass_outside = outside;
  if (outside > 0.05 && warnings)
    warnings->push_back("composed kernel mass extends outside the window: " +
                        std::to_string(outside));
  for (double& x : shifted) x /= kept;
  return BlurKernel{size, std::move(shifted), std::nullopt};
}

// Impulse-response extraction without gradients
inline BlurKernel extract_kernel(const NamedTensors& gen, const EstimatorConfig& c,
                                 double* mass_outside = nullptr,
                                 std::vector<std::string>* warnings = nullptr) {
  ad::Tape t;
  const BoundParams bp = bind_params(t, gen, false);
  const int raw = detail::raw_kernel_node(t, bp, c);
  return project_kernel(t.val(raw), c.kernel_size, mass_outside, warnings);
}

namespace detail {

struct PatchSource {
  const std::vector<double>* plane;
  int h, w;

  Tensor draw(Rng& rng, int n, int size) const {
    check(h >= size && w >= size, "image too small for requested patches");
    Tensor out({n, 1, size, size});
    for (int i = 0; i < n; ++i) {
      const int y0 = static_cast<int>(rng.uniform_int(h - size + 1));
      const int x0 = static_cast<int>(rng.uniform_int(w - size + 1));
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          out.at(i, 0, y, x) = (*plane)[static_cast<size_t>(y0 + y) * w + (x0 + x)];
    }
    return out;
  }
};

}  // namespace detail

// Per-image adversarial kernel estimation. The generator blurs patches; the
// discriminator scores full-resolution patches of the input as real and
// generated patches as fake; the generator is trained to fool it plus the
// kernel penalties on its impulse response. Deterministic given the seed.
inline KernelEstimate estimate_kernel(const ImageTensor& blurred, const EstimatorConfig& c) {
  c.validate();
  const int out_sz = c.patch - c.gen_margin();
  check(blurred.h >= c.patch && blurred.w >= c.patch, "image smaller than patch size");

  KernelEstimate result;
  const std::vector<double> luma = to_luma(blurred);

  double mean = 0.0;
  for (double v : luma) mean += v;
  mean /= static_cast<double>(luma.size());
  double var = 0.0;
  for (double v : luma) var += (v - mean) * (v - mean);
  var /= static_cast<double>(luma.size());
  const bool degenerate = var < 1e-10;
  if (degenerate) {
    result.degenerate_input = true;
    result.warnings.push_back(
        "input has (near-)zero variance; optimizing the kernel penalties only");
  }

  // generator input source: the image itself, or its 2x decimation
  std::vector<double> luma_ds;
  int dh = blurred.h, dw = blurred.w;
  if (c.input == EstimatorInput::downscale2) {
    dh = blurred.h / 2;
    dw = blurred.w / 2;
    check(dh >= c.patch && dw >= c.patch,
          "image too small for downscale2 estimation at this patch size");
    luma_ds.resize(static_cast<size_t>(dh) * dw);
    for (int y = 0; y < dh; ++y)
      for (int x = 0; x < dw; ++x)
        luma_ds[static_cast<size_t>(y) * dw + x] =
            luma[static_cast<size_t>(2 * y) * blurred.w + 2 * x];
  }
  const detail::PatchSource real_src{&luma, blurred.h, blurred.w};
  const detail::PatchSource gen_src{c.input == EstimatorInput::downscale2 ? &luma_ds : &luma,
                                    dh, dw};

  Rng rng(c.seed);
  NamedTensors gen = detail::generator_init(c, rng);
  NamedTensors disc = detail::discriminator_init(c, rng);
  std::vector<ad::Tape::SnState> sn(static_cast<size_t>(c.disc_layers));
  for (int l = 0; l < c.disc_layers; ++l)
    sn[static_cast<size_t>(l)].init(l == c.disc_layers - 1 ? 1 : c.disc_width, rng);

  Adam adam_g, adam_d;
  adam_g.init(gen);
  adam_d.init(disc);

  for (int it = 0; it < c.iterations; ++it) {
    if (!degenerate) {
      // discriminator step
      ad::Tape t;
      const BoundParams bg = bind_params(t, gen, false);
      const BoundParams bd = bind_params(t, disc, true);
      const int real = t.leaf(real_src.draw(rng, c.batch, out_sz), false);
      const int gin = t.leaf(gen_src.draw(rng, c.batch, c.patch), false);
      const int fake = detail::generator_forward(t, bg, gin, c);
      const int d_real = detail::discriminator_forward(t, bd, sn, real, c);
      const int d_fake = detail::discriminator_forward(t, bd, sn, fake, c);
      const int loss =
          t.add(t.mse_to_const(d_real, 1.0), t.mse_to_const(d_fake, 0.0));
      result.final_disc_loss = t.val(loss).data[0];
      if (!std::isfinite(result.final_disc_loss))
        throw NumericalError("discriminator loss is not finite");
      t.backward(loss);
      const NamedTensors grads = collect_grads(t, disc, bd);
      adam_d.step(disc, grads, c.lr_disc);
    }
    {
      // generator step
      ad::Tape t;
      const BoundParams bg = bind_params(t, gen, true);
      const BoundParams bd = bind_params(t, disc, false);
      const int k_raw = detail::raw_kernel_node(t, bg, c);
      const int reg = detail::regularization_node(t, k_raw, c.reg, c.kernel_size);
      int loss = reg;
      if (!degenerate) {
        const int gin = t.leaf(gen_src.draw(rng, c.batch, c.patch), false);
        const int fake = detail::generator_forward(t, bg, gin, c);
        const int d_fake = detail::discriminator_forward(t, bd, sn, fake, c);
        const int adv = t.mse_to_const(d_fake, 1.0);
        result.final_gen_adv = t.val(adv).data[0];
        loss = t.add(adv, reg);
      }
      result.final_reg = t.val(reg).data[0];
      if (!std::isfinite(t.val(loss).data[0]))
        throw NumericalError("generator loss is not finite");
      t.backward(loss);
      const NamedTensors grads = collect_grads(t, gen, bg);
      adam_g.step(gen, grads, c.lr_gen);
    }
  }

  result.kernel = extract_kernel(gen, c, &result.mass_outside, &result.warnings);
  return result;
}

// Runs estimation over every sample of a manifest, writing KERN1 files next
// to the dataset and recording them in the manifest. Samples whose kernel
// file already exists are skipped, so interrupted runs resume. Per-sample
// failures are recorded and do not stop the sweep.
inline DatasetManifest estimate_dataset_kernels(DatasetManifest manifest,
                                                const EstimatorConfig& base,
                                                const std::string& manifest_path) {
  check(manifest.mode == DatasetMode::kernel,
        "kernel estimation applies to kernel-blur datasets only");
  fs::create_directories(fs::path(manifest.dir) / "est_kernels");
  for (size_t i = 0; i < manifest.samples.size(); ++i) {
    auto& sample = manifest.samples[i];
    const std::string rel =
        (fs::path("est_kernels") / detail::sample_name("est", i, ".kern")).string();
    if (fs::exists(manifest.resolve(rel))) {
      sample.estimated_kernel_path = rel;
      continue;
    }
    EstimatorConfig c = base;
    c.seed = base.seed + 0x9e3779b97f4a7c15ull * (static_cast<uint64_t>(i) + 1);
    try {
      const ImageTensor blurred = load_png(manifest.resolve(sample.blurred_path));
      const KernelEstimate est = estimate_kernel(blurred, c);
      save_kernel(est.kernel, manifest.resolve(rel));
      sample.estimated_kernel_path = rel;
      sample.estimation_error.reset();
    } catch (const std::exception& e) {
      sample.estimation_error = e.what();
    }
    save_manifest(manifest, manifest_path);
  }
  save_manifest(manifest, manifest_path);
  return manifest;
}

}  // namespace bika
