#pragma once

#include <cmath>

#include "bika/params.hpp"

namespace bika {

// Adam with bias correction. Moment tensors are keyed by parameter name so
// they serialize into checkpoints alongside the parameters.
class Adam {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t t = 0;

  NamedTensors m, v;

  void init(const NamedTensors& params) {
    m.items.clear();
    v.items.clear();
    t = 0;
    for (const auto& [name, p] : params.items) {
      m.add(name, Tensor(p.shape));
      v.add(name, Tensor(p.shape));
    }
  }

  void step(NamedTensors& params, const NamedTensors& grads, double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < params.items.size(); ++i) {
      Tensor& p = params.items[i].second;
      const Tensor& g = grads.items[i].second;
      Tensor& mi = m.items[i].second;
      Tensor& vi = v.items[i].second;
      for (size_t k = 0; k < p.data.size(); ++k) {
        mi.data[k] = beta1 * mi.data[k] + (1.0 - beta1) * g.data[k];
        vi.data[k] = beta2 * vi.data[k] + (1.0 - beta2) * g.data[k] * g.data[k];
        const double mhat = mi.data[k] / bc1;
        const double vhat = vi.data[k] / bc2;
        p.data[k] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

// Cosine decay from lr0 to 0 over total iterations
inline double cosine_lr(double lr0, int64_t iter, int64_t total) {
  if (total <= 1) return lr0;
  const double x = static_cast<double>(iter) / static_cast<double>(total);
  return lr0 * 0.5 * (1.0 + std::cos(M_PI * std::min(x, 1.0)));
}

}  // namespace bika
