#pragma once

// Named-tensor archive: a text manifest `<path>` plus a flat binary payload
// `<path>.bin` holding float64 values in little-endian byte order.
//
//   gaitformer-archive 1
//   payload <file name of the payload>
//   byte-order little-endian
//   dtype float64
//   meta <key> <value>                       (any number)
//   tensor <name> <rank> <d0> ... <offset> <count>
//   end
//
// Offsets and counts are in elements.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gaitformer/errors.hpp"
#include "gaitformer/model.hpp"
#include "gaitformer/tensor.hpp"

namespace gaitformer {

inline constexpr int kArchiveVersion = 1;

struct NamedArray {
  std::string name;
  ad::Shape shape;
  std::vector<double> values;
};

struct Archive {
  std::map<std::string, std::string> meta;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
};

namespace detail {

inline std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
  return v;
}

}  // namespace detail

inline void save_archive(const std::filesystem::path& path, const Archive& archive) {
  const std::filesystem::path payload = path.string() + ".bin";
  std::ofstream manifest(path);
  std::ofstream bin(payload, std::ios::binary);
  if (!manifest || !bin) throw DataError("cannot write archive " + path.string());
  manifest << "gaitformer-archive " << kArchiveVersion << '\n';
  manifest << "payload " << payload.filename().string() << '\n';
  manifest << "byte-order little-endian\ndtype float64\n";
  for (const auto& [k, v] : archive.meta) manifest << "meta " << k << ' ' << v << '\n';
  std::size_t offset = 0;
  for (const auto& a : archive.arrays) {
    if (ad::numel(a.shape) != a.values.size()) throw ShapeError("save_archive: shape/size mismatch for " + a.name);
    manifest << "tensor " << a.name << ' ' << a.shape.size();
    for (auto d : a.shape) manifest << ' ' << d;
    manifest << ' ' << offset << ' ' << a.values.size() << '\n';
    for (double v : a.values) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      bits = detail::to_little_endian(bits);
      bin.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
    offset += a.values.size();
  }
  manifest << "end\n";
  if (!manifest || !bin) throw DataError("failed writing archive " + path.string());
}

inline Archive load_archive(const std::filesystem::path& path) {
  std::ifstream manifest(path);
  if (!manifest) throw DataError("cannot open archive " + path.string());
  std::string magic;
  int version = 0;
  manifest >> magic >> version;
  if (magic != "gaitformer-archive") throw DataError(path.string() + " is not a gaitformer archive");
  if (version != kArchiveVersion)
    throw DataError("unsupported archive version " + std::to_string(version) + " in " + path.string());
  struct Entry {
    NamedArray array;
    std::size_t offset = 0, count = 0;
  };
  std::vector<Entry> entries;
  Archive out;
  std::string payload_name, line;
  std::getline(manifest, line);
  while (std::getline(manifest, line)) {
    std::istringstream is(line);
    std::string kind;
    is >> kind;
    if (kind.empty()) continue;
    if (kind == "end") break;
    if (kind == "payload") {
      is >> payload_name;
    } else if (kind == "byte-order") {
      std::string order;
      is >> order;
      if (order != "little-endian") throw DataError("unsupported byte order " + order);
    } else if (kind == "dtype") {
      std::string dtype;
      is >> dtype;
      if (dtype != "float64") throw DataError("unsupported dtype " + dtype);
    } else if (kind == "meta") {
      std::string k, v;
      is >> k;
      std::getline(is >> std::ws, v);
      out.meta[k] = v;
    } else if (kind == "tensor") {
      Entry e;
      std::size_t rank = 0;
      is >> e.array.name >> rank;
      e.array.shape.resize(rank);
      for (auto& d : e.array.shape) is >> d;
      is >> e.offset >> e.count;
      if (!is || ad::numel(e.array.shape) != e.count) throw DataError("malformed tensor entry: " + line);
      entries.push_back(std::move(e));
    } else {
      throw DataError("unknown archive record '" + kind + "' in " + path.string());
    }
  }
  if (payload_name.empty()) throw DataError("archive " + path.string() + " names no payload");
  const auto payload = path.parent_path() / payload_name;
  std::ifstream bin(payload, std::ios::binary);
  if (!bin) throw DataError("cannot open archive payload " + payload.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  for (auto& e : entries) {
    if ((e.offset + e.count) * 8 > bytes.size()) throw DataError("archive payload truncated at " + e.array.name);
    e.array.values.resize(e.count);
    for (std::size_t i = 0; i < e.count; ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, bytes.data() + (e.offset + i) * 8, sizeof bits);
      bits = detail::to_little_endian(bits);
      std::memcpy(&e.array.values[i], &bits, sizeof bits);
    }
    out.arrays.push_back(std::move(e.array));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model checkpoints

inline std::map<std::string, std::string> model_config_meta(const ModelConfig& c) {
  return {{"model.num_layers", std::to_string(c.num_layers)},   {"model.d_model", std::to_string(c.d_model)},
          {"model.num_heads", std::to_string(c.num_heads)},     {"model.d_ff", std::to_string(c.d_ff)},
          {"model.d_proj", std::to_string(c.d_proj)},           {"model.n_attributes", std::to_string(c.n_attributes)},
          {"model.input_dim", std::to_string(c.input_dim)},     {"model.max_T", std::to_string(c.max_T)}};
}

inline ModelConfig model_config_from_meta(const std::map<std::string, std::string>& meta) {
  ModelConfig c;
  auto get = [&](const char* key, std::size_t& dst) {
    auto it = meta.find(key);
    if (it == meta.end()) throw DataError(std::string("checkpoint lacks ") + key);
    dst = std::stoull(it->second);
  };
  get("model.num_layers", c.num_layers);
  get("model.d_model", c.d_model);
  get("model.num_heads", c.num_heads);
  get("model.d_ff", c.d_ff);
  get("model.d_proj", c.d_proj);
  get("model.n_attributes", c.n_attributes);
  get("model.input_dim", c.input_dim);
  get("model.max_T", c.max_T);
  return c;
}

template <typename T>
void save_model(const GaitFormer<T>& model, const std::filesystem::path& path,
                const std::map<std::string, std::string>& extra_meta = {}) {
  Archive a;
  a.meta = model_config_meta(model.config());
  for (const auto& [k, v] : extra_meta) a.meta[k] = v;
  for (const auto& [meta, t] : model.named_parameters()) {
    a.arrays.push_back({meta.name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  }
  save_archive(path, a);
}

// Copies archived values into `model`; every model tensor must be present with
// a matching shape. Extra archive tensors (e.g. a gender head) are loaded only
// when the model has the corresponding slot.
template <typename T>
void load_parameters(GaitFormer<T>& model, const Archive& archive) {
  if (archive.find("gender.weight") && !model.has_gender_head()) model.add_gender_head(0);
  for (auto& [meta, t] : model.named_parameters()) {
    const NamedArray* a = archive.find(meta.name);
    if (!a) throw DataError("incompatible checkpoint: missing tensor " + meta.name);
    if (a->shape != t.shape()) {
      throw DataError("incompatible checkpoint: " + meta.name + " has shape " + ad::shape_str(a->shape) +
                      ", model expects " + ad::shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(a->values[i]);
  }
}

template <typename T>
GaitFormer<T> load_model(const std::filesystem::path& path) {
  Archive a = load_archive(path);
  GaitFormer<T> model(model_config_from_meta(a.meta));
  load_parameters(model, a);
  return model;
}

}  // namespace gaitformer
