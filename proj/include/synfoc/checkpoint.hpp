#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "synfoc/optim.hpp"
#include "synfoc/tensor.hpp"

namespace synfoc {

/// On-disk layout:
///   SYNFOC-CKPT v1
///   meta <key> <value>            (zero or more)
///   tensor <name> <rank> <d0> ... (one per entry, in payload order)
///   end
/// followed by one TNSR v1 record per tensor entry.
struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  bool has(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return true;
    }
    return false;
  }

  const Tensor<float>& get(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw FormatError("checkpoint has no tensor named '" + name + "'");
  }

  const std::string& meta_value(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError("checkpoint has no meta key '" + key + "'");
    return it->second;
  }

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    tensors.emplace_back(name, t.template cast<float>());
  }
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << "SYNFOC-CKPT v1\n";
  for (const auto& [k, v] : ckpt.meta) os << "meta " << k << ' ' << v << '\n';
  for (const auto& [name, t] : ckpt.tensors) {
    os << "tensor " << name << ' ' << t.rank();
    for (auto d : t.shape()) os << ' ' << d;
    os << '\n';
  }
  os << "end\n";
  for (const auto& [name, t] : ckpt.tensors) write_tensor(os, t);
  if (!os) throw FormatError("failed writing " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("missing checkpoint: " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "SYNFOC-CKPT v1") throw FormatError("not a checkpoint: " + path.string());
  Checkpoint ckpt;
  std::vector<std::pair<std::string, Shape>> manifest;
  while (std::getline(is, line) && line != "end") {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "meta") {
      std::string key, value;
      ls >> key;
      std::getline(ls >> std::ws, value);
      ckpt.meta[key] = value;
    } else if (tag == "tensor") {
      std::string name;
      std::size_t rank = 0;
      ls >> name >> rank;
      Shape shape(rank);
      for (auto& d : shape) ls >> d;
      if (!ls) throw FormatError("bad manifest line: " + line);
      manifest.emplace_back(name, shape);
    } else {
      throw FormatError("unexpected checkpoint line: " + line);
    }
  }
  if (line != "end") throw FormatError("truncated checkpoint manifest: " + path.string());
  for (auto& [name, shape] : manifest) {
    auto t = read_tensor<float>(is);
    if (t.shape() != shape) throw FormatError("payload shape mismatch for " + name);
    ckpt.tensors.emplace_back(name, std::move(t));
  }
  return ckpt;
}

template <typename T>
void store_parameters(Checkpoint& ckpt, const std::string& prefix, const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) ckpt.put(prefix + p->name, p->value);
}

template <typename T>
void restore_parameters(const Checkpoint& ckpt, const std::string& prefix, const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) {
    const auto& src = ckpt.get(prefix + p->name);
    require_shape(src.shape(), p->value.shape(), ("restore " + p->name).c_str());
    p->value = src.template cast<T>();
    p->grad = Tensor<T>(p->value.shape(), T{0});
  }
}

template <typename T>
void store_optimizer(Checkpoint& ckpt, const std::string& prefix, const Optimizer<T>& opt,
                     const std::vector<Parameter<T>*>& params) {
  ckpt.meta[prefix + "steps"] = std::to_string(opt.steps());
  ckpt.meta[prefix + "kind"] = to_string(opt.config().kind);
  const auto& m = opt.first_moments();
  const auto& v = opt.second_moments();
  for (std::size_t i = 0; i < m.size() && i < params.size(); ++i) ckpt.put(prefix + "m." + params[i]->name, m[i]);
  for (std::size_t i = 0; i < v.size() && i < params.size(); ++i) ckpt.put(prefix + "v." + params[i]->name, v[i]);
}

template <typename T>
void restore_optimizer(const Checkpoint& ckpt, const std::string& prefix, Optimizer<T>& opt,
                       const std::vector<Parameter<T>*>& params) {
  auto it = ckpt.meta.find(prefix + "steps");
  if (it == ckpt.meta.end() || std::stoll(it->second) == 0) return;
  opt.set_steps(std::stoll(it->second));
  auto& m = opt.first_moments();
  auto& v = opt.second_moments();
  m.clear();
  v.clear();
  for (auto* p : params) {
    m.push_back(ckpt.get(prefix + "m." + p->name).template cast<T>());
    if (opt.config().kind == OptimizerKind::kAdamW) v.push_back(ckpt.get(prefix + "v." + p->name).template cast<T>());
  }
}

}  // namespace synfoc
