#pragma once

// Dataset construction from per-frame pose detections: ingest, IoU tracking,
// confidence / duration / leg-speed filtering, resampling to 24 fps,
// normalization, attribute fusion and the tracklet archive.
//
// Detection file: one detection per line, whitespace separated,
//   frame_index x_min y_min width height (x y c) * 18 bbox_area_ratio
// for 60 fields in total. Lines starting with '#' are comments, except the
// directive "#fps=<value>" which sets the source frame rate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gaitformer/attributes.hpp"
#include "gaitformer/errors.hpp"
#include "gaitformer/skeleton.hpp"

namespace gaitformer {

struct BBox {
  double x = 0.0, y = 0.0, width = 0.0, height = 0.0;
};

inline double iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.x + a.width, b.x + b.width) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.height, b.y + b.height) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.width * a.height + b.width * b.height - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct Detection {
  std::int64_t frame_index = 0;
  BBox bbox;
  Skeleton skeleton;
  double bbox_area_ratio = 0.0;
};

struct FrameDetections {
  std::int64_t frame_index = 0;
  std::vector<Detection> detections;
};

struct Tracklet {
  std::string id;
  double fps = 24.0;
  std::vector<Detection> detections;
  std::optional<AttributeVector> attributes;
};

struct PipelineConfig {
  std::size_t T = 48;
  double reference_fps = 24.0;
  double source_fps = 24.0;  // used when the detection file has no fps directive
  double min_avg_confidence = 0.5;
  double min_feet_confidence = 0.4;
  double leg_speed_min = 0.0015;
  double leg_speed_max = 0.09;
  double tracker_iou_threshold = 0.3;
  std::size_t tracker_max_age = 12;
  std::size_t k_augment = 4;

  void validate() const {
    if (T == 0) throw ConfigError("pipeline.T must be >= 1");
    if (!(reference_fps > 0.0) || !(source_fps > 0.0)) throw ConfigError("pipeline fps values must be > 0");
    if (!(min_avg_confidence >= 0.0 && min_avg_confidence <= 1.0))
      throw ConfigError("pipeline.min_avg_confidence must lie in [0,1]");
    if (!(min_feet_confidence >= 0.0 && min_feet_confidence <= 1.0))
      throw ConfigError("pipeline.min_feet_confidence must lie in [0,1]");
    if (!(leg_speed_min >= 0.0 && leg_speed_min <= leg_speed_max))
      throw ConfigError("pipeline leg speed bounds must satisfy 0 <= min <= max");
    if (!(tracker_iou_threshold >= 0.0 && tracker_iou_threshold <= 1.0))
      throw ConfigError("pipeline.tracker_iou_threshold must lie in [0,1]");
    if (k_augment == 0) throw ConfigError("pipeline.k_augment must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Ingest

struct IngestResult {
  std::vector<FrameDetections> frames;
  std::size_t valid_lines = 0;
  std::size_t malformed_lines = 0;
  std::optional<double> fps;
};

inline constexpr std::size_t kDetectionFields = 5 + kFlatDim + 1;

inline std::optional<Detection> parse_detection(const std::string& line) {
  std::istringstream is(line);
  std::vector<double> v;
  v.reserve(kDetectionFields);
  std::string tok;
  while (is >> tok) {
    char* end = nullptr;
    const double d = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0' || !std::isfinite(d)) return std::nullopt;
    v.push_back(d);
  }
  if (v.size() != kDetectionFields) return std::nullopt;
  Detection det;
  if (v[0] < 0.0 || v[0] != std::floor(v[0])) return std::nullopt;
  det.frame_index = static_cast<std::int64_t>(v[0]);
  det.bbox = {v[1], v[2], v[3], v[4]};
  if (!(det.bbox.width > 0.0 && det.bbox.height > 0.0)) return std::nullopt;
  for (std::size_t j = 0; j < kNumJoints; ++j) det.skeleton.joints[j] = {v[5 + 3 * j], v[6 + 3 * j], v[7 + 3 * j]};
  det.bbox_area_ratio = v.back();
  if (!(det.bbox_area_ratio >= 0.0 && det.bbox_area_ratio <= 1.0)) return std::nullopt;
  return det;
}

// Groups detections by frame; malformed lines are counted and skipped.
inline IngestResult ingest(std::istream& in) {
  IngestResult res;
  std::map<std::int64_t, std::vector<Detection>> groups;
  std::string line;
  while (std::getline(in, line)) {
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    if (body[0] == '#') {
      if (body.rfind("#fps=", 0) == 0) {
        try {
          res.fps = std::stod(body.substr(5));
        } catch (const std::exception&) {
          throw DataError("invalid fps directive: " + body);
        }
        if (!(*res.fps > 0.0)) throw DataError("invalid fps directive: " + body);
      }
      continue;
    }
    if (auto det = parse_detection(body)) {
      groups[det->frame_index].push_back(*det);
      ++res.valid_lines;
    } else {
      ++res.malformed_lines;
    }
  }
  for (auto& [f, dets] : groups) res.frames.push_back({f, std::move(dets)});
  return res;
}

inline IngestResult ingest(const std::filesystem::path& path, bool allow_empty = false) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read detections file " + path.string());
  auto res = ingest(in);
  if (res.valid_lines == 0 && !allow_empty) throw DataError("no detections in " + path.string());
  return res;
}

// ---------------------------------------------------------------------------
// Tracking

inline std::string tracklet_id(std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "trk-%06zu", n);
  return buf;
}

// Greedy IoU association with coasting on the last box for up to
// tracker_max_age missed frames.
inline std::vector<Tracklet> track(const std::vector<FrameDetections>& frames, const PipelineConfig& cfg,
                                   double fps) {
  struct Active {
    Tracklet t;
    BBox last;
    std::int64_t last_frame;
  };
  std::vector<Active> active;
  std::vector<Tracklet> closed;
  std::size_t next_id = 0;
  for (const auto& fr : frames) {
    for (auto it = active.begin(); it != active.end();) {
      const auto missed = fr.frame_index - it->last_frame - 1;
      if (missed > static_cast<std::int64_t>(cfg.tracker_max_age)) {
        closed.push_back(std::move(it->t));
        it = active.erase(it);
      } else {
        ++it;
      }
    }
    struct Pair {
      double iou;
      std::size_t track, det;
    };
    std::vector<Pair> pairs;
    for (std::size_t a = 0; a < active.size(); ++a)
      for (std::size_t d = 0; d < fr.detections.size(); ++d) {
        const double v = iou(active[a].last, fr.detections[d].bbox);
        if (v >= cfg.tracker_iou_threshold && v > 0.0) pairs.push_back({v, a, d});
      }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& x, const Pair& y) { return x.iou > y.iou; });
    std::vector<bool> track_used(active.size(), false), det_used(fr.detections.size(), false);
    for (const auto& p : pairs) {
      if (track_used[p.track] || det_used[p.det]) continue;
      track_used[p.track] = det_used[p.det] = true;
      auto& a = active[p.track];
      a.t.detections.push_back(fr.detections[p.det]);
      a.last = fr.detections[p.det].bbox;
      a.last_frame = fr.frame_index;
    }
    for (std::size_t d = 0; d < fr.detections.size(); ++d) {
      if (det_used[d]) continue;
      Active a;
      a.t.id = tracklet_id(next_id++);
      a.t.fps = fps;
      a.t.detections.push_back(fr.detections[d]);
      a.last = fr.detections[d].bbox;
      a.last_frame = fr.frame_index;
      active.push_back(std::move(a));
    }
  }
  for (auto& a : active) closed.push_back(std::move(a.t));
  std::sort(closed.begin(), closed.end(), [](const Tracklet& x, const Tracklet& y) { return x.id < y.id; });
  return closed;
}

// ---------------------------------------------------------------------------
// Filters

inline double mean_confidence(const Skeleton& s) {
  double sum = 0.0;
  for (const auto& j : s.joints) sum += j.c;
  return sum / static_cast<double>(kNumJoints);
}

inline double feet_confidence(const Skeleton& s) { return 0.5 * (s[kRAnkle].c + s[kLAnkle].c); }

inline bool keep_skeleton(const Skeleton& s, const PipelineConfig& cfg) {
  return !(mean_confidence(s) < cfg.min_avg_confidence) && !(feet_confidence(s) < cfg.min_feet_confidence);
}

inline Tracklet filter_confidence(const Tracklet& t, const PipelineConfig& cfg) {
  Tracklet out = t;
  out.detections.clear();
  for (const auto& d : t.detections)
    if (keep_skeleton(d.skeleton, cfg)) out.detections.push_back(d);
  return out;
}

inline double min_duration_frames(double fps, const PipelineConfig& cfg) {
  return static_cast<double>(cfg.T) * fps / cfg.reference_fps;
}

// True when the tracklet is long enough to keep.
inline bool filter_duration(const Tracklet& t, const PipelineConfig& cfg) {
  if (!(t.fps > 0.0)) throw DataError("tracklet " + t.id + " has non-positive fps");
  return !(static_cast<double>(t.detections.size()) < min_duration_frames(t.fps, cfg));
}

// Linear interpolation on the frame-index timeline to reference_fps.
inline SkeletonSequence resample(const Tracklet& t, const PipelineConfig& cfg) {
  if (t.detections.size() < 2)
    throw SequenceTooShort("resample: tracklet " + t.id + " has " + std::to_string(t.detections.size()) +
                           " frames, need 2");
  std::vector<double> times;
  std::vector<Skeleton> frames;
  for (const auto& d : t.detections) {
    times.push_back(static_cast<double>(d.frame_index));
    frames.push_back(d.skeleton);
  }
  const double step = t.fps / cfg.reference_fps;
  const double span = times.back() - times.front() + 1.0;
  const auto n = static_cast<std::size_t>(std::llround(span / step));
  std::vector<double> query(n);
  for (std::size_t k = 0; k < n; ++k) query[k] = times.front() + static_cast<double>(k) * step;
  SkeletonSequence out;
  out.frames = interpolate(times, frames, query);
  out.frame_rate = cfg.reference_fps;
  return out;
}

// Mean per-frame displacement of knees and ankles.
inline double leg_speed(const SkeletonSequence& seq) {
  if (seq.size() < 2) throw SequenceTooShort("leg_speed: need at least 2 frames");
  constexpr std::array<std::size_t, 4> legs{kRKnee, kRAnkle, kLKnee, kLAnkle};
  double sum = 0.0;
  for (std::size_t t = 1; t < seq.size(); ++t)
    for (auto j : legs) {
      const auto& a = seq.frames[t][j];
      const auto& b = seq.frames[t - 1][j];
      sum += std::hypot(a.x - b.x, a.y - b.y);
    }
  return sum / static_cast<double>((seq.size() - 1) * legs.size());
}

inline bool filter_leg_speed(double speed, const PipelineConfig& cfg) {
  return !(speed < cfg.leg_speed_min) && !(speed > cfg.leg_speed_max);
}

inline bool filter_leg_speed(const SkeletonSequence& seq, const PipelineConfig& cfg) {
  return filter_leg_speed(leg_speed(seq), cfg);
}

// ---------------------------------------------------------------------------
// Annotation crops and provider scores

struct CropRecord {
  std::string tracklet_id;
  std::size_t crop_index = 0;
  std::int64_t frame_index = 0;
  BBox bbox;
  double bbox_area_ratio = 0.0;
};

// One crop every T detections, starting at the first.
inline std::vector<CropRecord> annotation_crops(const Tracklet& t, const PipelineConfig& cfg) {
  std::vector<CropRecord> out;
  for (std::size_t i = 0, k = 0; i < t.detections.size(); i += cfg.T, ++k) {
    const auto& d = t.detections[i];
    out.push_back({t.id, k, d.frame_index, d.bbox, d.bbox_area_ratio});
  }
  return out;
}

inline void write_crop_manifest(std::ostream& out, const std::vector<CropRecord>& crops) {
  out << "# tracklet crop frame x y width height bbox_area_ratio\n";
  out << std::setprecision(17);
  for (const auto& c : crops)
    out << c.tracklet_id << ' ' << c.crop_index << ' ' << c.frame_index << ' ' << c.bbox.x << ' ' << c.bbox.y << ' '
        << c.bbox.width << ' ' << c.bbox.height << ' ' << c.bbox_area_ratio << '\n';
}

// Provider score file, tab separated:
//   crop  <crop_index>  <bbox_area_ratio>
//   score <crop_index>  <aug_index>  <provider>  <attribute name>  <score>
inline std::vector<CropScores> read_provider_scores(std::istream& in, const AttributeMap& map,
                                                    const std::string& origin = "scores") {
  std::map<std::size_t, double> areas;
  std::map<std::size_t, std::map<std::size_t, ProviderScores>> raw;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty() || line[0] == '#') continue;
    const auto f = detail::split(line, '\t');
    auto where = [&] { return origin + ":" + std::to_string(lineno); };
    try {
      if (f[0] == "crop" && f.size() == 3) {
        areas[std::stoul(f[1])] = std::stod(f[2]);
      } else if (f[0] == "score" && f.size() == 6) {
        raw[std::stoul(f[1])][std::stoul(f[2])][f[3]][f[4]] = std::stod(f[5]);
      } else {
        throw DataError(where() + ": malformed record");
      }
    } catch (const std::logic_error&) {
      throw DataError(where() + ": malformed number");
    }
  }
  std::vector<CropScores> out;
  for (const auto& [crop, augs] : raw) {
    auto a = areas.find(crop);
    if (a == areas.end()) throw DataError(origin + ": crop " + std::to_string(crop) + " has no area record");
    CropScores cs;
    cs.bbox_area_ratio = a->second;
    for (const auto& [aug, scores] : augs) {
      const auto v = coalesce_schema(scores, map);
      cs.augmentations.emplace_back(v.begin(), v.end());
    }
    out.push_back(std::move(cs));
  }
  return out;
}

// ---------------------------------------------------------------------------
// End-to-end construction

struct ProcessedTracklet {
  std::string id;
  SkeletonSequence sequence;  // normalized, at reference_fps
  std::optional<AttributeVector> attributes;
  double leg_speed = 0.0;
};

struct StageReport {
  std::size_t tracked = 0;
  std::size_t after_confidence = 0;
  std::size_t after_duration = 0;
  std::size_t after_leg_speed = 0;
  std::size_t malformed_lines = 0;
  std::size_t degenerate_frames = 0;

  std::vector<std::size_t> counts() const { return {tracked, after_confidence, after_duration, after_leg_speed}; }

  std::string table() const {
    std::ostringstream os;
    os << std::left << std::setw(20) << "stage" << "tracklets\n";
    os << std::setw(20) << "tracked" << tracked << '\n';
    os << std::setw(20) << "confidence" << after_confidence << '\n';
    os << std::setw(20) << "duration" << after_duration << '\n';
    os << std::setw(20) << "leg_speed" << after_leg_speed << '\n';
    os << std::setw(20) << "malformed_lines" << malformed_lines << '\n';
    os << std::setw(20) << "degenerate_frames" << degenerate_frames << '\n';
    return os.str();
  }
};

struct BuildResult {
  std::vector<ProcessedTracklet> tracklets;
  std::vector<CropRecord> crops;
  StageReport report;
};

struct AttributeSourceOptions {
  std::filesystem::path scores_dir;  // <scores_dir>/<tracklet id>.tsv
  const AttributeMap* map = nullptr;
};

inline BuildResult build_dataset(const IngestResult& input, const PipelineConfig& cfg,
                                 const std::optional<AttributeSourceOptions>& attrs = std::nullopt) {
  cfg.validate();
  BuildResult res;
  res.report.malformed_lines = input.malformed_lines;
  const double fps = input.fps.value_or(cfg.source_fps);
  auto tracklets = track(input.frames, cfg, fps);
  res.report.tracked = tracklets.size();
  for (const auto& raw : tracklets) {
    auto t = filter_confidence(raw, cfg);
    if (t.detections.empty()) continue;
    ++res.report.after_confidence;
    if (!filter_duration(t, cfg) || t.detections.size() < 2) continue;
    ++res.report.after_duration;
    ProcessedTracklet p;
    p.id = t.id;
    p.sequence = resample(t, cfg);
    const std::size_t degenerate = normalize_sequence(p.sequence);
    p.leg_speed = leg_speed(p.sequence);
    if (!filter_leg_speed(p.leg_speed, cfg)) continue;
    ++res.report.after_leg_speed;
    res.report.degenerate_frames += degenerate;
    auto crops = annotation_crops(t, cfg);
    if (attrs && attrs->map) {
      const auto path = attrs->scores_dir / (t.id + ".tsv");
      std::ifstream in(path);
      if (in) {
        const auto scores = read_provider_scores(in, *attrs->map, path.string());
        if (!scores.empty()) p.attributes = fuse_attributes(scores);
      }
    }
    res.crops.insert(res.crops.end(), crops.begin(), crops.end());
    res.tracklets.push_back(std::move(p));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Tracklet archive: one tracklet per line,
//   id fps frame_count (54 values per frame) [42 attribute values]

namespace detail {

inline void put_number(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, " %.17g", v);
  out += buf;
}

}  // namespace detail

inline void write_tracklet_archive(std::ostream& out, const std::vector<ProcessedTracklet>& tracklets) {
  for (const auto& t : tracklets) {
    std::string line = t.id;
    detail::put_number(line, t.sequence.frame_rate);
    line += ' ' + std::to_string(t.sequence.size());
    for (const auto& f : t.sequence.frames)
      for (double v : flatten(f)) detail::put_number(line, v);
    if (t.attributes)
      for (double v : *t.attributes) detail::put_number(line, v);
    out << line << '\n';
  }
}

inline std::vector<ProcessedTracklet> read_tracklet_archive(std::istream& in, const std::string& origin = "archive") {
  std::vector<ProcessedTracklet> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty() || line[0] == '#') continue;
    std::istringstream is(line);
    ProcessedTracklet t;
    std::size_t n = 0;
    if (!(is >> t.id >> t.sequence.frame_rate >> n))
      throw DataError(origin + ":" + std::to_string(lineno) + ": malformed header");
    if (!ids.insert(t.id).second) throw DataError(origin + ": duplicate tracklet id " + t.id);
    t.sequence.frames.resize(n);
    std::array<double, kFlatDim> buf{};
    for (std::size_t f = 0; f < n; ++f) {
      for (auto& v : buf)
        if (!(is >> v)) throw DataError(origin + ":" + std::to_string(lineno) + ": truncated frame data");
      t.sequence.frames[f] = unflatten(buf);
    }
    std::vector<double> rest;
    double v;
    while (is >> v) rest.push_back(v);
    if (!is.eof()) throw DataError(origin + ":" + std::to_string(lineno) + ": malformed value");
    if (rest.size() == kNumAttributes) {
      AttributeVector a;
      std::copy(rest.begin(), rest.end(), a.begin());
      t.attributes = a;
    } else if (!rest.empty()) {
      throw DataError(origin + ":" + std::to_string(lineno) + ": expected 0 or 42 attribute values, got " +
                      std::to_string(rest.size()));
    }
    out.push_back(std::move(t));
  }
  return out;
}

inline void save_tracklet_archive(const std::filesystem::path& path, const std::vector<ProcessedTracklet>& t) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_tracklet_archive(out, t);
}

inline std::vector<ProcessedTracklet> load_tracklet_archive(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read tracklet archive " + path.string());
  return read_tracklet_archive(in, path.string());
}

}  // namespace gaitformer
