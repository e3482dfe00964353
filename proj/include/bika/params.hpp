#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bika/autodiff.hpp"
#include "bika/tensor.hpp"

namespace bika {

// Ordered name -> tensor registry. Order is the canonical serialization order
// of checkpoints and must stay stable.
struct NamedTensors {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor& add(const std::string& name, Tensor t) {
    check(find(name) == nullptr, "duplicate parameter name: " + name);
    items.emplace_back(name, std::move(t));
    return items.back().second;
  }

  Tensor* find(const std::string& name) {
    for (auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }
  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }

  Tensor& get(const std::string& name) {
    Tensor* t = find(name);
    check(t != nullptr, "missing parameter: " + name);
    return *t;
  }
  const Tensor& get(const std::string& name) const {
    const Tensor* t = find(name);
    check(t != nullptr, "missing parameter: " + name);
    return *t;
  }

  bool contains(const std::string& name) const { return find(name) != nullptr; }

  int64_t total_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : items) n += t.numel();
    return n;
  }
};

// Parameters bound onto a tape as leaves, by name
struct BoundParams {
  std::vector<std::pair<std::string, int>> ids;

  int id(const std::string& name) const {
    for (const auto& [n, i] : ids)
      if (n == name) return i;
    throw ValidationError("parameter not bound: " + name);
  }
};

inline BoundParams bind_params(ad::Tape& tape, const NamedTensors& params,
                               bool requires_grad) {
  BoundParams bp;
  for (const auto& [name, t] : params.items)
    bp.ids.emplace_back(name, tape.leaf(t, requires_grad));
  return bp;
}

// Collects gradients after backward(), aligned with params order. Parameters
// that did not receive any gradient get zeros.
inline NamedTensors collect_grads(ad::Tape& tape, const NamedTensors& params,
                                  const BoundParams& bp) {
  NamedTensors grads;
  for (size_t i = 0; i < params.items.size(); ++i) {
    const int id = bp.ids[i].second;
    if (tape.has_grad(id))
      grads.add(params.items[i].first, tape.grad(id));
    else
      grads.add(params.items[i].first, Tensor(params.items[i].second.shape));
  }
  return grads;
}

}  // namespace bika
