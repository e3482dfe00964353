#pragma once

#include <string>

#include "bika/metrics.hpp"
#include "bika/training.hpp"

namespace bika {

struct EvalOptions {
  std::string checkpoint;
  std::string manifest;
  std::string out_dir;
  KernelSource kernel_source = KernelSource::estimated;
};

namespace detail {

// blurred | restored | sharp with a 2 px white separator
inline ImageTensor comparison_grid(const ImageTensor& blurred, const ImageTensor& restored,
                                   const ImageTensor& sharp) {
  const int sep = 2;
  ImageTensor grid(blurred.h, blurred.w * 3 + sep * 2, 3);
  grid.clamp01();
  for (double& v : grid.data) v = 1.0;
  auto paste = [&](const ImageTensor& img, int x0) {
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x)
        for (int c = 0; c < 3; ++c)
          grid.at(y, x0 + x, c) = img.c == 3 ? img.at(y, x, c) : img.at(y, x, 0);
  };
  paste(blurred, 0);
  paste(restored, blurred.w + sep);
  paste(sharp, 2 * (blurred.w + sep));
  return grid;
}

// max-normalized grayscale rendering, scaled up 8x for visibility
inline ImageTensor kernel_viz(const BlurKernel& k, int scale = 8) {
  double mx = 0.0;
  for (double v : k.values) mx = std::max(mx, v);
  if (mx <= 0.0) mx = 1.0;
  ImageTensor img(k.size * scale, k.size * scale, 1);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      img.at(y, x, 0) = std::clamp(k.at(y / scale, x / scale) / mx, 0.0, 1.0);
  return img;
}

}  // namespace detail

// Restores every sample of the manifest with the checkpointed network, writes
// restored images, side-by-side grids and kernel visualizations, and the
// metric report. Returns the report path.
inline std::string run_eval(const EvalOptions& opt) {
  const Checkpoint ck = load_checkpoint(opt.checkpoint);
  const DatasetManifest manifest = load_manifest(opt.manifest);
  validate_manifest_files(manifest);

  if (ck.config.mode == NetMode::motion_concat)
    check(manifest.mode == DatasetMode::motion,
          "motion-mode checkpoint requires a motion dataset");
  else
    check(manifest.mode == DatasetMode::kernel,
          "kernel-mode checkpoint requires a kernel dataset");
  if (ck.config.mode == NetMode::motion_concat)
    check(opt.kernel_source != KernelSource::estimated,
          "kernel_source=estimated does not apply to motion mode");

  fs::create_directories(opt.out_dir);
  for (size_t i = 0; i < manifest.samples.size(); ++i) {
    const auto& rec = manifest.samples[i];
    const ImageTensor blurred = load_png(manifest.resolve(rec.blurred_path));
    const ImageTensor sharp = load_png(manifest.resolve(rec.sharp_path));

    ImageTensor restored;
    if (ck.config.mode == NetMode::kernel_adain) {
      BlurKernel kernel;
      const BlurKernel* kp = nullptr;
      if (ck.config.has_mapping()) {
        if (opt.kernel_source == KernelSource::ground_truth) {
          check(rec.kernel_index >= 0 &&
                    rec.kernel_index < static_cast<int>(manifest.bank.size()),
                "bad kernel index in manifest");
          kernel = make_kernel(manifest.bank[static_cast<size_t>(rec.kernel_index)]);
        } else {
          check(rec.estimated_kernel_path.has_value(),
                "sample " + std::to_string(i) +
                    " has no estimated kernel; run `estimate-kernels` first");
          kernel = load_kernel(manifest.resolve(*rec.estimated_kernel_path));
        }
        kp = &kernel;
      }
      restored = bikanet_apply(ck.params, ck.config, blurred, kp, nullptr);
    } else {
      check(rec.flow_path.has_value(), "motion sample missing flow field");
      const MotionFlowField flow = load_flow(manifest.resolve(*rec.flow_path));
      restored = bikanet_apply(ck.params, ck.config, blurred, nullptr, &flow);
    }

    save_png(restored, (fs::path(opt.out_dir) / detail::sample_name("restored", i, ".png"))
                           .string());
    save_png(detail::comparison_grid(blurred, restored, sharp),
             (fs::path(opt.out_dir) / detail::sample_name("grid", i, ".png")).string());
    if (manifest.mode == DatasetMode::kernel && rec.kernel_index >= 0) {
      const BlurKernel gt = make_kernel(manifest.bank[static_cast<size_t>(rec.kernel_index)]);
      save_png(detail::kernel_viz(gt),
               (fs::path(opt.out_dir) / detail::sample_name("kern_gt", i, ".png")).string());
    }
    if (rec.estimated_kernel_path) {
      const BlurKernel est = load_kernel(manifest.resolve(*rec.estimated_kernel_path));
      save_png(detail::kernel_viz(est),
               (fs::path(opt.out_dir) / detail::sample_name("kern_est", i, ".png")).string());
    }
  }

  MetricReport report = evaluate(manifest, opt.out_dir);
  report.dataset = opt.manifest;
  report.checkpoint = opt.checkpoint;
  const std::string report_path = (fs::path(opt.out_dir) / "report.json").string();
  save_report(report, report_path);
  return report_path;
}

}  // namespace bika
