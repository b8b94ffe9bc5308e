#pragma once

// The 42-slot appearance attribute schema, the provider coalescing table and
// bounding-box weighted fusion of per-crop scores.

#include <array>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gaitformer/errors.hpp"

namespace gaitformer {

inline constexpr std::size_t kNumAttributes = 42;

using AttributeVector = std::array<double, kNumAttributes>;

inline constexpr std::array<std::string_view, kNumAttributes> kAttributeNames{
    "Female",
    "AgeChild", "AgeYoungAdult", "AgeAdult", "AgeSenior",
    "BodyFat", "BodyNormal", "BodyThin",
    "ViewFront", "ViewBack", "ViewSide",
    "Backpack", "ShoulderBag", "HandBag", "Box", "PlasticBag", "PaperBag", "HandTrunk", "CarryingOther",
    "ShortSleeve", "LongSleeve", "LongCoat", "Trousers", "Shorts", "Skirt", "Jeans", "FormalWear", "CasualWear",
    "Jacket", "TShirt", "Sweater",
    "LeatherShoes", "SportShoes", "Boots", "CasualShoes", "Sandals",
    "Calling", "Talking", "Gathering", "Holding", "Pushing", "Pulling",
};

struct AttributeGroup {
  std::string_view name;
  std::size_t first, count;
};

inline constexpr std::array<AttributeGroup, 8> kAttributeGroups{{
    {"Gender", 0, 1},
    {"Age Group", 1, 4},
    {"Body Type", 5, 3},
    {"Viewpoint", 8, 3},
    {"Carry Conditions", 11, 8},
    {"Clothing", 19, 12},
    {"Footwear", 31, 5},
    {"Apparent Action", 36, 6},
}};

inline std::size_t attribute_index(std::string_view name) {
  for (std::size_t i = 0; i < kNumAttributes; ++i)
    if (kAttributeNames[i] == name) return i;
  throw DataError("unknown attribute slot '" + std::string(name) + "'");
}

inline void validate_attributes(const AttributeVector& v) {
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!(v[i] >= 0.0 && v[i] <= 1.0))
      throw DataError("attribute " + std::string(kAttributeNames[i]) + " outside [0,1]");
}

// ---------------------------------------------------------------------------
// Coalescing

// provider -> attribute name -> score
using ProviderScores = std::map<std::string, std::map<std::string, double>>;

struct AttributeSource {
  std::string provider;
  std::string name;
  bool inverted = false;
};

struct AttributeMap {
  std::array<std::vector<AttributeSource>, kNumAttributes> slots;
  std::set<std::pair<std::string, std::string>> dropped;

  bool known(const std::string& provider, const std::string& name) const {
    if (dropped.count({provider, name})) return true;
    for (const auto& sources : slots)
      for (const auto& s : sources)
        if (s.provider == provider && s.name == name) return true;
    return false;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

inline AttributeMap parse_attribute_map(std::istream& in, const std::string& origin = "attribute map") {
  AttributeMap map;
  std::array<bool, kNumAttributes> seen{};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string body = detail::trim(line);
    if (body.empty() || body[0] == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw DataError(origin + ":" + std::to_string(lineno) + ": expected '='");
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    std::vector<AttributeSource> sources;
    for (const auto& item : detail::split(std::string_view(body).substr(eq + 1), ';')) {
      if (item.empty()) continue;
      AttributeSource src;
      std::string_view v = item;
      if (v.front() == '!') {
        src.inverted = true;
        v.remove_prefix(1);
      }
      const auto colon = v.find(':');
      if (colon == std::string_view::npos)
        throw DataError(origin + ":" + std::to_string(lineno) + ": source '" + item + "' lacks provider");
      src.provider = detail::trim(v.substr(0, colon));
      src.name = detail::trim(v.substr(colon + 1));
      sources.push_back(std::move(src));
    }
    if (key == "drop") {
      for (auto& s : sources) map.dropped.insert({s.provider, s.name});
      continue;
    }
    const std::size_t slot = attribute_index(key);
    if (sources.empty()) throw DataError(origin + ": slot " + key + " has no sources");
    map.slots[slot] = std::move(sources);
    seen[slot] = true;
  }
  for (std::size_t i = 0; i < kNumAttributes; ++i)
    if (!seen[i]) throw DataError(origin + ": slot " + std::string(kAttributeNames[i]) + " is not mapped");
  return map;
}

inline AttributeMap load_attribute_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open attribute map " + path.string());
  return parse_attribute_map(in, path.string());
}

#ifdef GAITFORMER_ASSET_DIR
inline std::filesystem::path default_attribute_map_path() {
  return std::filesystem::path(GAITFORMER_ASSET_DIR) / "attribute_map.txt";
}
#endif

// Each slot is the mean over its sources present in `raw`; inverted sources
// contribute 1 - score. Every provider attribute must be mapped or dropped.
inline AttributeVector coalesce_schema(const ProviderScores& raw, const AttributeMap& map) {
  std::vector<std::string> unknown;
  for (const auto& [provider, scores] : raw)
    for (const auto& [name, v] : scores)
      if (!map.known(provider, name)) unknown.push_back(provider + ":" + name);
  if (!unknown.empty()) {
    std::string msg = "unknown attribute name(s):";
    for (const auto& u : unknown) msg += " " + u;
    throw DataError(msg);
  }
  AttributeVector out{};
  for (std::size_t i = 0; i < kNumAttributes; ++i) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& src : map.slots[i]) {
      auto p = raw.find(src.provider);
      if (p == raw.end()) continue;
      auto a = p->second.find(src.name);
      if (a == p->second.end()) continue;
      if (!(a->second >= 0.0 && a->second <= 1.0))
        throw DataError("score for " + src.provider + ":" + src.name + " outside [0,1]");
      sum += src.inverted ? 1.0 - a->second : a->second;
      ++n;
    }
    if (n == 0) throw DataError("no provider score for attribute " + std::string(kAttributeNames[i]));
    out[i] = sum / static_cast<double>(n);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fusion

struct CropScores {
  double bbox_area_ratio = 0.0;
  std::vector<std::vector<double>> augmentations;  // k score vectors
};

// Mean over each crop's augmentations, then the area-weighted mean over crops.
inline AttributeVector fuse_attributes(const std::vector<CropScores>& crops) {
  if (crops.empty()) throw DataError("fuse_attributes: empty crop list");
  double total_area = 0.0;
  for (const auto& c : crops) {
    if (c.augmentations.empty()) throw DataError("fuse_attributes: crop without scores");
    if (!(c.bbox_area_ratio >= 0.0 && c.bbox_area_ratio <= 1.0))
      throw DataError("fuse_attributes: bbox_area_ratio outside [0,1]");
    total_area += c.bbox_area_ratio;
  }
  const bool uniform = !(total_area > 0.0);
  AttributeVector out{};
  for (const auto& c : crops) {
    AttributeVector mean{};
    for (const auto& v : c.augmentations) {
      if (v.size() != kNumAttributes)
        throw DataError("fuse_attributes: score vector has " + std::to_string(v.size()) + " entries, expected 42");
      for (std::size_t i = 0; i < kNumAttributes; ++i) mean[i] += v[i];
    }
    const double w = uniform ? 1.0 / static_cast<double>(crops.size()) : c.bbox_area_ratio / total_area;
    for (std::size_t i = 0; i < kNumAttributes; ++i)
      out[i] += w * mean[i] / static_cast<double>(c.augmentations.size());
  }
  return out;
}

}  // namespace gaitformer
