#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bika/degradation.hpp"
#include "bika/image_io.hpp"
#include "bika/kernel.hpp"
#include "bika/motion.hpp"

namespace bika {

namespace fs = std::filesystem;

struct SampleRecord {
  std::string sharp_path;    // relative to the manifest directory
  std::string blurred_path;  // relative to the manifest directory
  int kernel_index = -1;     // into the manifest bank; -1 for motion samples
  uint64_t per_sample_seed = 0;
  std::optional<std::string> estimated_kernel_path;
  std::optional<std::string> flow_path;  // motion datasets only
  std::optional<std::string> estimation_error;
};

enum class DatasetMode { kernel, motion };

struct DatasetManifest {
  int version = 1;
  uint64_t seed = 0;
  int crop = 0;
  double noise_sigma = 0.0;
  std::string split = "train";
  DatasetMode mode = DatasetMode::kernel;
  double flow_max = 0.0;  // motion datasets: max flow coefficient magnitude, px
  std::vector<BlurSpec> bank;
  std::vector<SampleRecord> samples;

  std::string dir;  // directory the manifest was loaded from / written to

  std::string resolve(const std::string& rel) const {
    return (fs::path(dir) / rel).string();
  }
};

inline nlohmann::ordered_json manifest_to_json(const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["version"] = m.version;
  j["seed"] = m.seed;
  j["crop"] = m.crop;
  j["noise_sigma"] = m.noise_sigma;
  j["split"] = m.split;
  j["mode"] = m.mode == DatasetMode::kernel ? "kernel" : "motion";
  if (m.mode == DatasetMode::motion) j["flow_max"] = m.flow_max;
  j["bank"] = bank_to_json(m.bank);
  j["count"] = m.samples.size();
  nlohmann::ordered_json samples = nlohmann::ordered_json::array();
  for (const auto& s : m.samples) {
    nlohmann::ordered_json js;
    js["sharp_path"] = s.sharp_path;
    js["blurred_path"] = s.blurred_path;
    js["kernel_index"] = s.kernel_index;
    js["per_sample_seed"] = s.per_sample_seed;
    if (s.estimated_kernel_path) js["estimated_kernel_path"] = *s.estimated_kernel_path;
    if (s.flow_path) js["flow_path"] = *s.flow_path;
    if (s.estimation_error) js["estimation_error"] = *s.estimation_error;
    samples.push_back(std::move(js));
  }
  j["samples"] = std::move(samples);
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j, const std::string& dir) {
  DatasetManifest m;
  m.version = j.at("version").get<int>();
  m.seed = j.at("seed").get<uint64_t>();
  m.crop = j.at("crop").get<int>();
  m.noise_sigma = j.at("noise_sigma").get<double>();
  m.split = j.value("split", "train");
  m.mode = j.value("mode", "kernel") == "motion" ? DatasetMode::motion : DatasetMode::kernel;
  m.flow_max = j.value("flow_max", 0.0);
  m.bank = bank_from_json(j.at("bank"));
  const auto& samples = j.at("samples");
  check(samples.is_array(), "manifest samples must be an array");
  check(j.at("count").get<size_t>() == samples.size(),
        "manifest count does not match sample list");
  for (const auto& js : samples) {
    SampleRecord s;
    s.sharp_path = js.at("sharp_path").get<std::string>();
    s.blurred_path = js.at("blurred_path").get<std::string>();
    s.kernel_index = js.at("kernel_index").get<int>();
    s.per_sample_seed = js.at("per_sample_seed").get<uint64_t>();
    if (js.contains("estimated_kernel_path"))
      s.estimated_kernel_path = js.at("estimated_kernel_path").get<std::string>();
    if (js.contains("flow_path")) s.flow_path = js.at("flow_path").get<std::string>();
    if (js.contains("estimation_error"))
      s.estimation_error = js.at("estimation_error").get<std::string>();
    m.samples.push_back(std::move(s));
  }
  m.dir = dir;
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream os(path);
  check(os.good(), "cannot open manifest for writing: " + path);
  os << manifest_to_json(m).dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  check(is.good(), "cannot open manifest: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad manifest JSON: " + std::string(e.what()));
  }
  return manifest_from_json(j, fs::path(path).parent_path().string());
}

// Every referenced file must exist once the dataset is materialized.
inline void validate_manifest_files(const DatasetManifest& m) {
  for (const auto& s : m.samples) {
    check(fs::exists(m.resolve(s.sharp_path)), "missing sample file: " + s.sharp_path);
    check(fs::exists(m.resolve(s.blurred_path)), "missing sample file: " + s.blurred_path);
    if (s.flow_path)
      check(fs::exists(m.resolve(*s.flow_path)), "missing flow file: " + *s.flow_path);
  }
}

inline std::vector<std::string> list_images_sorted(const std::string& dir) {
  check(fs::is_directory(dir), "not a directory: " + dir);
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  check(!files.empty(), "no PNG images found in: " + dir);
  return files;
}

namespace detail {

inline std::string sample_name(const char* prefix, size_t idx, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04zu%s", prefix, idx, ext);
  return buf;
}

}  // namespace detail

struct GenerateOptions {
  std::string sharp_dir;
  std::string out_dir;
  std::vector<BlurSpec> bank;  // empty -> default 16-kernel bank
  int crop = 256;
  int count = 16;
  double noise_sigma = 0.0;
  uint64_t seed = 0;
  std::string split = "train";
  bool motion = false;      // per-pixel linear motion blur instead of kernels
  double flow_max = 6.0;    // motion: flow coefficient bound, pixels
  int motion_steps = 17;    // motion: samples along each blur trajectory
};

// Materializes `count` samples: random crop of a random source image, then
// either a random kernel from the bank or a random smooth flow field applied
// to it, plus optional noise. Pure function of its inputs; per-sample seeds
// are seed ^ index so ordering never matters.
inline DatasetManifest generate_dataset(const GenerateOptions& opt) {
  check(opt.count >= 1, "count must be >= 1");
  check(opt.crop >= 1, "crop must be >= 1");
  std::vector<BlurSpec> bank;
  if (!opt.motion) {
    bank = opt.bank.empty() ? default_bank_specs() : opt.bank;
    for (const auto& s : bank) s.validate();
  }

  const auto files = list_images_sorted(opt.sharp_dir);
  std::vector<ImageTensor> sources;
  sources.reserve(files.size());
  for (const auto& f : files) {
    ImageTensor img = load_png(f);
    check(img.h >= opt.crop && img.w >= opt.crop,
          "crop larger than source image: " + f);
    if (!opt.motion)
      check(std::min(img.h, img.w) >= bank.front().size,
            "source image smaller than kernel: " + f);
    sources.push_back(std::move(img));
  }

  fs::create_directories(opt.out_dir);
  DatasetManifest m;
  m.seed = opt.seed;
  m.crop = opt.crop;
  m.noise_sigma = opt.noise_sigma;
  m.split = opt.split;
  m.mode = opt.motion ? DatasetMode::motion : DatasetMode::kernel;
  m.flow_max = opt.motion ? opt.flow_max : 0.0;
  m.bank = bank;
  m.dir = opt.out_dir;

  for (int i = 0; i < opt.count; ++i) {
    const uint64_t sample_seed = opt.seed ^ static_cast<uint64_t>(i);
    Rng rng(sample_seed);
    const auto& src = sources[rng.uniform_int(sources.size())];
    const int y0 = static_cast<int>(rng.uniform_int(src.h - opt.crop + 1));
    const int x0 = static_cast<int>(rng.uniform_int(src.w - opt.crop + 1));

    SampleRecord rec;
    rec.sharp_path = detail::sample_name("sharp", i, ".png");
    rec.blurred_path = detail::sample_name("blurred", i, ".png");
    rec.per_sample_seed = sample_seed;
    const ImageTensor sharp = src.crop(y0, x0, opt.crop, opt.crop);

    if (opt.motion) {
      const uint64_t flow_seed = rng.next_u64();
      const uint64_t noise_seed = rng.next_u64();
      const MotionFlowField flow =
          random_affine_flow(opt.crop, opt.crop, opt.flow_max, flow_seed);
      ImageTensor blurred = synthesize_motion_blur(sharp, flow, opt.motion_steps);
      blurred = add_noise(blurred, opt.noise_sigma, noise_seed);
      rec.kernel_index = -1;
      rec.flow_path = detail::sample_name("flow", i, ".flow");
      save_flow(flow, m.resolve(*rec.flow_path));
      save_png(sharp, m.resolve(rec.sharp_path));
      save_png(blurred, m.resolve(rec.blurred_path));
    } else {
      const int k_idx = static_cast<int>(rng.uniform_int(bank.size()));
      const uint64_t noise_seed = rng.next_u64();
      SynthesizedSample syn =
          synthesize_blur(sharp, bank[k_idx], opt.noise_sigma, noise_seed);
      rec.kernel_index = k_idx;
      save_png(syn.sharp, m.resolve(rec.sharp_path));
      save_png(syn.blurred, m.resolve(rec.blurred_path));
    }
    m.samples.push_back(std::move(rec));
  }
  save_manifest(m, (fs::path(opt.out_dir) / "manifest.json").string());
  return m;
}

}  // namespace bika
