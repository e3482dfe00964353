#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "bika/checkpoint.hpp"
#include "bika/dataset.hpp"
#include "bika/kernel_estimator.hpp"

namespace bika {

enum class KernelSource { ground_truth, estimated };

struct TrainConfig {
  BikanetConfig net;
  int64_t iterations = 2000;
  int batch = 4;
  double lr = 2e-4;
  LossKind loss = LossKind::mae;
  KernelSource kernel_source = KernelSource::ground_truth;
  uint64_t seed = 0;
  std::string dataset;
  std::string checkpoint_dir;
  int train_crop = 0;  // 0 = whole sample; otherwise a multiple of 4
  int log_every = 50;
  int checkpoint_every = 500;

  void validate() const {
    net.validate();
    check(iterations >= 1, "iterations must be >= 1");
    check(batch >= 1, "batch must be >= 1");
    check(lr > 0.0, "lr must be positive");
    check(train_crop == 0 || train_crop % 4 == 0, "train_crop must be a multiple of 4");
    check(!dataset.empty(), "dataset manifest path required");
    check(!checkpoint_dir.empty(), "checkpoint_dir required");
  }
};

inline nlohmann::ordered_json train_config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["mode"] = c.net.mode == NetMode::kernel_adain ? "kernel_adain" : "motion_concat";
  j["blocks"] = c.net.blocks;
  j["width"] = c.net.width;
  j["kernel_size"] = c.net.kernel_size;
  j["mapping_width"] = c.net.mapping_width;
  j["mapping_layers"] = c.net.mapping_layers;
  nlohmann::ordered_json ablate = nlohmann::ordered_json::array();
  if (c.net.no_kernel_ae) ablate.push_back("no_kernel_ae");
  if (c.net.no_lts) ablate.push_back("no_lts");
  j["ablate"] = std::move(ablate);
  j["iterations"] = c.iterations;
  j["batch"] = c.batch;
  j["lr"] = c.lr;
  j["loss"] = c.loss == LossKind::mae ? "mae" : "mse";
  j["kernel_source"] =
      c.kernel_source == KernelSource::ground_truth ? "ground_truth" : "estimated";
  j["seed"] = c.seed;
  j["dataset"] = c.dataset;
  j["checkpoint_dir"] = c.checkpoint_dir;
  j["train_crop"] = c.train_crop;
  j["log_every"] = c.log_every;
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("mode")) {
    const std::string m = j.at("mode").get<std::string>();
    check(m == "kernel_adain" || m == "motion_concat", "bad mode: " + m);
    c.net.mode = m == "kernel_adain" ? NetMode::kernel_adain : NetMode::motion_concat;
  }
  c.net.blocks = j.value("blocks", c.net.blocks);
  c.net.width = j.value("width", c.net.width);
  c.net.kernel_size = j.value("kernel_size", c.net.kernel_size);
  c.net.mapping_width = j.value("mapping_width", c.net.mapping_width);
  c.net.mapping_layers = j.value("mapping_layers", c.net.mapping_layers);
  if (j.contains("ablate"))
    for (const auto& a : j.at("ablate")) {
      const std::string s = a.get<std::string>();
      if (s == "no_kernel_ae")
        c.net.no_kernel_ae = true;
      else if (s == "no_lts")
        c.net.no_lts = true;
      else
        throw ValidationError("unknown ablation flag: " + s);
    }
  c.iterations = j.value("iterations", c.iterations);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  if (j.contains("loss")) {
    const std::string l = j.at("loss").get<std::string>();
    check(l == "mae" || l == "mse", "bad loss: " + l);
    c.loss = l == "mae" ? LossKind::mae : LossKind::mse;
  }
  if (j.contains("kernel_source")) {
    const std::string k = j.at("kernel_source").get<std::string>();
    check(k == "ground_truth" || k == "estimated", "bad kernel_source: " + k);
    c.kernel_source =
        k == "ground_truth" ? KernelSource::ground_truth : KernelSource::estimated;
  }
  c.seed = j.value("seed", c.seed);
  c.dataset = j.value("dataset", c.dataset);
  c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
  c.train_crop = j.value("train_crop", c.train_crop);
  c.log_every = j.value("log_every", c.log_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  return c;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream is(path);
  check(is.good(), "cannot open config: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad config JSON: " + std::string(e.what()));
  }
  return train_config_from_json(j);
}

// One training process owns a checkpoint directory via an exclusive .lock
class DirLock {
 public:
  explicit DirLock(const std::string& dir) : path_((fs::path(dir) / ".lock").string()) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    check(fd >= 0, "checkpoint dir is locked by another run (remove stale " + path_ +
                       " if no trainer is alive)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~DirLock() { ::unlink(path_.c_str()); }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
};

namespace detail {

struct TrainSample {
  Tensor blurred;  // (1,3,h,w)
  Tensor sharp;    // (1,3,h,w)
  Tensor kernel;   // (1, k^2), kernel mode
  MotionFlowField flow;
};

inline std::vector<TrainSample> load_train_samples(const DatasetManifest& m,
                                                   const TrainConfig& cfg) {
  check(!m.samples.empty(), "dataset is empty");
  if (cfg.net.mode == NetMode::motion_concat)
    check(m.mode == DatasetMode::motion,
          "motion-mode training needs a motion dataset (generate --motion)");
  else
    check(m.mode == DatasetMode::kernel, "kernel-mode training needs a kernel dataset");
  std::vector<TrainSample> out;
  for (size_t i = 0; i < m.samples.size(); ++i) {
    const auto& rec = m.samples[i];
    TrainSample s;
    ImageTensor blurred = load_png(m.resolve(rec.blurred_path));
    ImageTensor sharp = load_png(m.resolve(rec.sharp_path));
    check(blurred.c == 3 && sharp.c == 3, "training expects RGB samples");
    check(blurred.h == sharp.h && blurred.w == sharp.w, "sample dimension mismatch");
    s.blurred = image_to_nchw(blurred);
    s.sharp = image_to_nchw(sharp);
    if (cfg.net.mode == NetMode::kernel_adain) {
      if (cfg.net.has_mapping()) {
        BlurKernel k;
        if (cfg.kernel_source == KernelSource::ground_truth) {
          check(rec.kernel_index >= 0 &&
                    rec.kernel_index < static_cast<int>(m.bank.size()),
                "bad kernel index in manifest");
          k = make_kernel(m.bank[static_cast<size_t>(rec.kernel_index)]);
        } else {
          check(rec.estimated_kernel_path.has_value(),
                "sample " + std::to_string(i) +
                    " has no estimated kernel; run `estimate-kernels` on the manifest "
                    "first");
          k = load_kernel(m.resolve(*rec.estimated_kernel_path));
        }
        check(k.size == cfg.net.kernel_size, "kernel size does not match the network");
        s.kernel = kernel_to_row(k);
      }
    } else {
      check(rec.flow_path.has_value(), "motion sample missing flow field");
      s.flow = load_flow(m.resolve(*rec.flow_path));
      check(s.flow.h == blurred.h && s.flow.w == blurred.w, "flow dimension mismatch");
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline void append_loss_row(std::ofstream& os, int64_t iter, double loss, double lr) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%" PRId64 ",%.17g,%.17g\n", iter, loss, lr);
  os << buf;
}

}  // namespace detail

struct TrainResult {
  std::string final_checkpoint;
  std::string loss_log;
  double final_loss = 0.0;
};

// Seed-deterministic training: batch order, crop positions, and all math are
// pure functions of (dataset bytes, config, seed). The loss log and the
// checkpoints are byte-reproducible.
inline TrainResult train(const TrainConfig& cfg) {
  cfg.validate();
  const DatasetManifest manifest = load_manifest(cfg.dataset);
  validate_manifest_files(manifest);
  const std::vector<detail::TrainSample> samples = detail::load_train_samples(manifest, cfg);

  const int sh = static_cast<int>(samples[0].blurred.dim(2));
  const int sw = static_cast<int>(samples[0].blurred.dim(3));
  for (const auto& s : samples)
    check(s.blurred.dim(2) == sh && s.blurred.dim(3) == sw,
          "training requires equal-sized samples");
  const int ch = cfg.train_crop > 0 ? cfg.train_crop : sh;
  const int cw = cfg.train_crop > 0 ? cfg.train_crop : sw;
  check(ch <= sh && cw <= sw, "train_crop larger than samples");
  check(ch % 4 == 0 && cw % 4 == 0,
        "sample crop must be a multiple of 4 (set train_crop)");
  check(std::min(ch, cw) >= 8, "training crop too small");

  fs::create_directories(cfg.checkpoint_dir);
  DirLock lock(cfg.checkpoint_dir);

  Rng init_rng(cfg.seed);
  NamedTensors params = bikanet_init(cfg.net, init_rng);
  Adam adam;
  adam.init(params);

  Rng order_rng(cfg.seed ^ 0x5bd1e995u);
  std::vector<size_t> order(samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t pos = order.size();  // trigger shuffle on first draw
  auto next_index = [&]() {
    if (pos >= order.size()) {
      for (size_t i = order.size(); i > 1; --i) {
        const size_t j = order_rng.uniform_int(i);
        std::swap(order[i - 1], order[j]);
      }
      pos = 0;
    }
    return order[pos++];
  };

  const std::string log_path = (fs::path(cfg.checkpoint_dir) / "loss_log.csv").string();
  std::ofstream log(log_path);
  check(log.good(), "cannot open loss log: " + log_path);
  log << "iteration,loss,lr\n";

  std::string last_checkpoint;
  auto save_state = [&](const std::string& name, int64_t iter) {
    Checkpoint ck;
    ck.config = cfg.net;
    ck.params = params;
    ck.adam = adam;
    ck.has_optimizer = true;
    ck.iteration = iter;
    const std::string path = (fs::path(cfg.checkpoint_dir) / name).string();
    save_checkpoint(ck, path);
    return path;
  };

  double loss_value = 0.0;
  for (int64_t it = 1; it <= cfg.iterations; ++it) {
    // assemble the batch
    Tensor bbatch({cfg.batch, 3, ch, cw});
    Tensor sbatch({cfg.batch, 3, ch, cw});
    Tensor kbatch;
    Tensor fbatch;
    const bool with_kernel =
        cfg.net.mode == NetMode::kernel_adain && cfg.net.has_mapping();
    if (with_kernel) kbatch = Tensor({cfg.batch, cfg.net.kernel_dim()});
    if (cfg.net.mode == NetMode::motion_concat) fbatch = Tensor({cfg.batch, 2, ch, cw});
    for (int b = 0; b < cfg.batch; ++b) {
      const size_t si = next_index();
      const int y0 = ch < sh ? static_cast<int>(order_rng.uniform_int(sh - ch + 1)) : 0;
      const int x0 = cw < sw ? static_cast<int>(order_rng.uniform_int(sw - cw + 1)) : 0;
      const auto& s = samples[si];
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < ch; ++y)
          for (int x = 0; x < cw; ++x) {
            bbatch.at(b, c, y, x) = s.blurred.at(0, c, y0 + y, x0 + x);
            sbatch.at(b, c, y, x) = s.sharp.at(0, c, y0 + y, x0 + x);
          }
      if (with_kernel)
        for (int i = 0; i < cfg.net.kernel_dim(); ++i)
          kbatch.at(b, i) = s.kernel.at(0, i);
      if (cfg.net.mode == NetMode::motion_concat)
        for (int y = 0; y < ch; ++y)
          for (int x = 0; x < cw; ++x) {
            fbatch.at(b, 0, y, x) = s.flow.u(y0 + y, x0 + x);
            fbatch.at(b, 1, y, x) = s.flow.v(y0 + y, x0 + x);
          }
    }

    ad::Tape t;
    const BoundParams bp = bind_params(t, params, true);
    const int bnode = t.leaf(std::move(bbatch), false);
    const int snode = t.leaf(std::move(sbatch), false);
    int cond = -1;
    if (with_kernel) cond = t.leaf(std::move(kbatch), false);
    if (cfg.net.mode == NetMode::motion_concat) cond = t.leaf(std::move(fbatch), false);
    const int out = bikanet_forward(t, bp, bnode, cond, cfg.net);
    const int loss = reconstruction_loss(t, out, snode, cfg.loss);
    loss_value = t.val(loss).data[0];
    if (!std::isfinite(loss_value)) {
      log.flush();
      throw NumericalError("loss became non-finite at iteration " + std::to_string(it) +
                           (last_checkpoint.empty()
                                ? std::string("; no checkpoint was written yet")
                                : "; last good checkpoint: " + last_checkpoint));
    }
    t.backward(loss);
    const NamedTensors grads = collect_grads(t, params, bp);
    adam.step(params, grads, cosine_lr(cfg.lr, it - 1, cfg.iterations));

    if (it % cfg.log_every == 0 || it == cfg.iterations)
      detail::append_loss_row(log, it, loss_value,
                              cosine_lr(cfg.lr, it - 1, cfg.iterations));
    if (it % cfg.checkpoint_every == 0 && it != cfg.iterations) {
      char name[48];
      std::snprintf(name, sizeof(name), "ckpt_%06" PRId64 ".bikc", it);
      last_checkpoint = save_state(name, it);
    }
  }
  log.flush();
  TrainResult r;
  r.final_checkpoint = save_state("final.bikc", cfg.iterations);
  r.loss_log = log_path;
  r.final_loss = loss_value;
  return r;
}

}  // namespace bika
