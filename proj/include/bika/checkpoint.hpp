#pragma once

#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "bika/adam.hpp"
#include "bika/bikanet.hpp"

namespace bika {

// BIKC1 checkpoint: 6-byte magic "BIKC1\n", u32le header length, JSON header
// (version, network config, iteration, optimizer step, tensor directory),
// then all tensors as float32le in directory order. Parameters first, then
// adam.m/* and adam.v/* moments when the optimizer state is present.
struct Checkpoint {
  BikanetConfig config;
  NamedTensors params;
  Adam adam;
  bool has_optimizer = false;
  int64_t iteration = 0;
};

namespace detail {

inline void write_f32_block(std::ostream& os, const Tensor& t) {
  for (double v : t.data) put_f32le(os, static_cast<float>(v));
}

inline void read_f32_block(std::istream& is, Tensor& t) {
  for (double& v : t.data) v = static_cast<double>(get_f32le(is));
}

inline nlohmann::ordered_json tensor_dir_entry(const std::string& name, const Tensor& t,
                                               int64_t offset) {
  nlohmann::ordered_json e;
  e["name"] = name;
  e["shape"] = t.shape;
  e["dtype"] = "f32";
  e["offset"] = offset;
  return e;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  nlohmann::ordered_json header;
  header["version"] = 1;
  header["config"] = bikanet_config_to_json(ck.config);
  header["iteration"] = ck.iteration;
  header["has_optimizer"] = ck.has_optimizer;
  header["adam_step"] = ck.adam.t;
  nlohmann::ordered_json dir = nlohmann::ordered_json::array();
  int64_t offset = 0;
  auto add_entries = [&](const NamedTensors& nt, const std::string& prefix) {
    for (const auto& [name, t] : nt.items) {
      dir.push_back(detail::tensor_dir_entry(prefix + name, t, offset));
      offset += t.numel() * 4;
    }
  };
  add_entries(ck.params, "");
  if (ck.has_optimizer) {
    add_entries(ck.adam.m, "adam.m/");
    add_entries(ck.adam.v, "adam.v/");
  }
  header["tensors"] = std::move(dir);

  std::ofstream os(path, std::ios::binary);
  check(os.good(), "cannot open checkpoint for writing: " + path);
  const std::string hs = header.dump();
  os.write("BIKC1\n", 6);
  detail::put_u32le(os, static_cast<uint32_t>(hs.size()));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  auto write_all = [&](const NamedTensors& nt) {
    for (const auto& [name, t] : nt.items) detail::write_f32_block(os, t);
  };
  write_all(ck.params);
  if (ck.has_optimizer) {
    write_all(ck.adam.m);
    write_all(ck.adam.v);
  }
  check(os.good(), "failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "cannot open checkpoint: " + path);
  char magic[6];
  is.read(magic, 6);
  check(is.good() && std::memcmp(magic, "BIKC1\n", 6) == 0,
        "bad checkpoint magic: " + path);
  const uint32_t hlen = detail::get_u32le(is);
  std::string hs(hlen, '\0');
  is.read(hs.data(), hlen);
  check(is.good(), "truncated checkpoint header: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad checkpoint header: " + std::string(e.what()));
  }
  check(header.at("version").get<int>() == 1, "unsupported checkpoint version");

  Checkpoint ck;
  ck.config = bikanet_config_from_json(header.at("config"));
  ck.iteration = header.at("iteration").get<int64_t>();
  ck.has_optimizer = header.at("has_optimizer").get<bool>();
  ck.adam.t = header.at("adam_step").get<int64_t>();

  for (const auto& e : header.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    std::vector<int64_t> shape = e.at("shape").get<std::vector<int64_t>>();
    check(e.at("dtype").get<std::string>() == "f32", "unsupported tensor dtype");
    Tensor t(shape);
    detail::read_f32_block(is, t);
    if (name.rfind("adam.m/", 0) == 0)
      ck.adam.m.add(name.substr(7), std::move(t));
    else if (name.rfind("adam.v/", 0) == 0)
      ck.adam.v.add(name.substr(7), std::move(t));
    else
      ck.params.add(name, std::move(t));
  }
  check(is.good(), "truncated checkpoint payload: " + path);

  // structural validation against the config
  Rng skeleton_rng(0);
  const NamedTensors expected = bikanet_init(ck.config, skeleton_rng);
  check(expected.items.size() == ck.params.items.size(),
        "checkpoint parameter list does not match its config");
  for (size_t i = 0; i < expected.items.size(); ++i) {
    check(expected.items[i].first == ck.params.items[i].first,
          "checkpoint parameter name mismatch: " + ck.params.items[i].first);
    check(expected.items[i].second.shape == ck.params.items[i].second.shape,
          "checkpoint parameter shape mismatch: " + ck.params.items[i].first);
  }
  if (ck.has_optimizer) {
    check(ck.adam.m.items.size() == ck.params.items.size() &&
              ck.adam.v.items.size() == ck.params.items.size(),
          "checkpoint optimizer state incomplete");
  }
  return ck;
}

}  // namespace bika
