// Parameter checkpoints.
//
// Layout: "CMXCKPT1", u64 header length, JSON header, then every tensor's
// values as little-endian float32 or float64, in header order. The header
// carries the architecture, label names, vocabulary and a free-form `meta`
// object next to the tensor index (name, shape, dtype).
#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "camchex/arch.hpp"
#include "camchex/model.hpp"
#include "json.hpp"

namespace camchex {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'C', 'M', 'X', 'C', 'K', 'P', 'T', '1'};

struct StoredArray {
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::string kind;  // stage1, noisy_student, views, stage2
  ArchConfig arch;
  std::vector<std::string> label_names;
  std::vector<std::string> vocab;
  nlohmann::json meta = nlohmann::json::object();
  bool double_precision = false;
  std::map<std::string, StoredArray> arrays;

  bool has_prefix(const std::string& prefix) const {
    auto it = arrays.lower_bound(prefix + "/");
    return it != arrays.end() && it->first.rfind(prefix + "/", 0) == 0;
  }
};

/// Copies every parameter of `m` into the checkpoint under "prefix/name".
template <class Model>
void store_model(Checkpoint& ck, const std::string& prefix, Model& m) {
  m.visit(
      [&](const std::string& name, auto& t) {
        StoredArray a{t.shape(), std::vector<double>(t.data().begin(), t.data().end())};
        ck.arrays[prefix + "/" + name] = std::move(a);
      },
      "");
}

/// Overwrites the parameters of an already-initialised `m` from "prefix/...".
template <class Model>
void restore_model(const Checkpoint& ck, const std::string& prefix, Model& m) {
  m.visit(
      [&](const std::string& name, auto& t) {
        using V = typename std::decay_t<decltype(t)>::value_type;
        auto it = ck.arrays.find(prefix + "/" + name);
        if (it == ck.arrays.end()) throw InputError("checkpoint lacks tensor " + prefix + "/" + name);
        if (it->second.shape != t.shape())
          throw InputError("checkpoint tensor " + it->first + " has shape " + shape_string(it->second.shape) +
                           ", model expects " + shape_string(t.shape()));
        auto dst = t.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = V(it->second.values[k]);
      },
      "");
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json tensors = nlohmann::json::array();
  const std::string dtype = ck.double_precision ? "f64" : "f32";
  for (const auto& [name, a] : ck.arrays) tensors.push_back({{"name", name}, {"shape", a.shape}, {"dtype", dtype}});
  const nlohmann::json header = {{"kind", ck.kind},       {"arch", ck.arch.to_json()}, {"label_names", ck.label_names},
                                 {"vocab", ck.vocab},     {"meta", ck.meta},           {"tensors", tensors}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, 8);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), std::streamsize(text.size()));
  for (const auto& [name, a] : ck.arrays) {
    if (ck.double_precision) {
      out.write(reinterpret_cast<const char*>(a.values.data()), std::streamsize(a.values.size() * sizeof(double)));
    } else {
      std::vector<float> f(a.values.begin(), a.values.end());
      out.write(reinterpret_cast<const char*>(f.data()), std::streamsize(f.size() * sizeof(float)));
    }
  }
  if (!out) throw InputError("failed writing checkpoint " + path.string());
}

/// A missing file is a MissingDependency; a malformed one an InputError.
inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingDependency("checkpoint not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  std::uint64_t len = 0;
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw InputError(path.string() + " is not a checkpoint");
  if (!in.read(reinterpret_cast<char*>(&len), sizeof len) || len > (1u << 30))
    throw InputError(path.string() + ": corrupt checkpoint header");
  std::string text(len, '\0');
  if (!in.read(text.data(), std::streamsize(len))) throw InputError(path.string() + ": truncated header");
  Checkpoint ck;
  try {
    const auto h = nlohmann::json::parse(text);
    ck.kind = h.at("kind").get<std::string>();
    ck.arch = ArchConfig::from_json(h.at("arch"));
    ck.label_names = h.at("label_names").get<std::vector<std::string>>();
    ck.vocab = h.value("vocab", std::vector<std::string>{});
    ck.meta = h.value("meta", nlohmann::json::object());
    for (const auto& t : h.at("tensors")) {
      StoredArray a;
      a.shape = t.at("shape").get<Shape>();
      const auto dtype = t.at("dtype").get<std::string>();
      const std::size_t n = numel(a.shape);
      a.values.resize(n);
      if (dtype == "f64") {
        ck.double_precision = true;
        if (!in.read(reinterpret_cast<char*>(a.values.data()), std::streamsize(n * sizeof(double))))
          throw InputError(path.string() + ": truncated tensor data");
      } else if (dtype == "f32") {
        std::vector<float> f(n);
        if (!in.read(reinterpret_cast<char*>(f.data()), std::streamsize(n * sizeof(float))))
          throw InputError(path.string() + ": truncated tensor data");
        std::copy(f.begin(), f.end(), a.values.begin());
      } else {
        throw InputError(path.string() + ": unknown dtype " + dtype);
      }
      ck.arrays.emplace(t.at("name").get<std::string>(), std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": bad checkpoint header: " + e.what());
  }
  return ck;
}

}  // namespace camchex
