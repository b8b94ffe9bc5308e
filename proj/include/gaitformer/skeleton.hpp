#pragma once

// Skeleton domain types, pelvis-centred normalization and sequence
// transforms (crops, flips, pace changes, coordinate jitter).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gaitformer/errors.hpp"

namespace gaitformer {

using Rng = std::mt19937_64;

inline constexpr std::size_t kNumJoints = 18;
inline constexpr std::size_t kFlatDim = kNumJoints * 3;  // 54

// COCO-18 / OpenPose joint order.
enum JointIndex : std::size_t {
  kNose = 0,
  kNeck = 1,
  kRShoulder = 2,
  kRElbow = 3,
  kRWrist = 4,
  kLShoulder = 5,
  kLElbow = 6,
  kLWrist = 7,
  kRHip = 8,
  kRKnee = 9,
  kRAnkle = 10,
  kLHip = 11,
  kLKnee = 12,
  kLAnkle = 13,
  kREye = 14,
  kLEye = 15,
  kREar = 16,
  kLEar = 17,
};

// Left/right pairs swapped by a horizontal mirror.
inline constexpr std::array<std::pair<std::size_t, std::size_t>, 8> kMirrorPairs{{
    {kRShoulder, kLShoulder},
    {kRElbow, kLElbow},
    {kRWrist, kLWrist},
    {kRHip, kLHip},
    {kRKnee, kLKnee},
    {kRAnkle, kLAnkle},
    {kREye, kLEye},
    {kREar, kLEar},
}};

struct Joint {
  double x = 0.0;
  double y = 0.0;
  double c = 0.0;  // detection confidence in [0,1]

  friend bool operator==(const Joint&, const Joint&) = default;
};

struct Skeleton {
  std::array<Joint, kNumJoints> joints{};

  Joint& operator[](std::size_t i) { return joints[i]; }
  const Joint& operator[](std::size_t i) const { return joints[i]; }

  friend bool operator==(const Skeleton&, const Skeleton&) = default;
};

struct SkeletonSequence {
  std::vector<Skeleton> frames;
  double frame_rate = 24.0;

  std::size_t size() const { return frames.size(); }
  bool empty() const { return frames.empty(); }

  friend bool operator==(const SkeletonSequence&, const SkeletonSequence&) = default;
};

struct AugmentationParams {
  std::size_t crop_length = 48;
  double flip_probability = 0.5;
  double pace_min = 0.8;
  double pace_max = 1.2;
  double noise_sigma = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    if (crop_length < 1) throw ConfigError("augment.crop_length must be >= 1");
    if (!(flip_probability >= 0.0 && flip_probability <= 1.0))
      throw ConfigError("augment.flip_probability must lie in [0,1]");
    if (!(pace_min > 0.0) || pace_max < pace_min)
      throw ConfigError("augment.pace_range must satisfy 0 < min <= max");
    if (!(noise_sigma >= 0.0)) throw ConfigError("augment.noise_sigma must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Normalization

inline constexpr double kNormalizeEpsilon = 1e-6;

struct NormalizedSkeleton {
  Skeleton skeleton;
  bool degenerate = false;  // a scale denominator was clamped to epsilon
};

inline Joint pelvis(const Skeleton& s) {
  const Joint& r = s[kRHip];
  const Joint& l = s[kLHip];
  return {(r.x + l.x) * 0.5, (r.y + l.y) * 0.5, (r.c + l.c) * 0.5};
}

// Centres on the hip midpoint, scales x by the shoulder x-distance and y by the
// neck-to-pelvis y-distance. Confidences pass through.
inline NormalizedSkeleton normalize_skeleton(const Skeleton& s) {
  const Joint p = pelvis(s);
  double sx = std::abs(s[kRShoulder].x - s[kLShoulder].x);
  double sy = std::abs(s[kNeck].y - p.y);
  bool degenerate = false;
  if (sx < kNormalizeEpsilon) {
    sx = kNormalizeEpsilon;
    degenerate = true;
  }
  if (sy < kNormalizeEpsilon) {
    sy = kNormalizeEpsilon;
    degenerate = true;
  }
  NormalizedSkeleton out;
  out.degenerate = degenerate;
  for (std::size_t j = 0; j < kNumJoints; ++j) {
    out.skeleton[j] = {(s[j].x - p.x) / sx, (s[j].y - p.y) / sy, s[j].c};
  }
  return out;
}

// Normalizes every frame; returns the number of degenerate frames.
inline std::size_t normalize_sequence(SkeletonSequence& seq) {
  std::size_t degenerate = 0;
  for (auto& f : seq.frames) {
    auto n = normalize_skeleton(f);
    degenerate += n.degenerate ? 1 : 0;
    f = n.skeleton;
  }
  return degenerate;
}

// ---------------------------------------------------------------------------
// Flattening: (x0,y0,c0, x1,y1,c1, ..., x17,y17,c17)

inline std::array<double, kFlatDim> flatten(const Skeleton& s) {
  std::array<double, kFlatDim> v{};
  for (std::size_t j = 0; j < kNumJoints; ++j) {
    v[3 * j] = s[j].x;
    v[3 * j + 1] = s[j].y;
    v[3 * j + 2] = s[j].c;
  }
  return v;
}

inline Skeleton unflatten(std::span<const double> v) {
  if (v.size() != kFlatDim)
    throw ShapeError("unflatten: expected 54 values, got " + std::to_string(v.size()));
  Skeleton s;
  for (std::size_t j = 0; j < kNumJoints; ++j) s[j] = {v[3 * j], v[3 * j + 1], v[3 * j + 2]};
  return s;
}

// ---------------------------------------------------------------------------
// Crops

inline SkeletonSequence window(const SkeletonSequence& seq, std::size_t start, std::size_t length) {
  SkeletonSequence out;
  out.frame_rate = seq.frame_rate;
  out.frames.assign(seq.frames.begin() + static_cast<std::ptrdiff_t>(start),
                    seq.frames.begin() + static_cast<std::ptrdiff_t>(start + length));
  return out;
}

inline void require_length(const SkeletonSequence& seq, std::size_t length, const char* what) {
  if (seq.size() < length || length == 0) {
    throw SequenceTooShort(std::string(what) + ": sequence has " + std::to_string(seq.size()) +
                           " frames, need " + std::to_string(length));
  }
}

inline std::size_t center_crop_start(std::size_t length, std::size_t crop) { return (length - crop) / 2; }

inline SkeletonSequence center_crop(const SkeletonSequence& seq, std::size_t crop) {
  require_length(seq, crop, "center_crop");
  return window(seq, center_crop_start(seq.size(), crop), crop);
}

inline std::size_t random_crop_start(std::size_t length, std::size_t crop, Rng& rng) {
  std::uniform_int_distribution<std::size_t> dist(0, length - crop);
  return dist(rng);
}

inline SkeletonSequence random_crop(const SkeletonSequence& seq, const AugmentationParams& params, Rng& rng) {
  require_length(seq, params.crop_length, "random_crop");
  return window(seq, random_crop_start(seq.size(), params.crop_length, rng), params.crop_length);
}

// ---------------------------------------------------------------------------
// Mirror

inline Skeleton mirror(const Skeleton& s) {
  Skeleton out = s;
  for (auto [r, l] : kMirrorPairs) std::swap(out[r], out[l]);
  for (auto& j : out.joints) j.x = -j.x;
  return out;
}

inline SkeletonSequence mirror(const SkeletonSequence& seq) {
  SkeletonSequence out = seq;
  for (auto& f : out.frames) f = mirror(f);
  return out;
}

inline SkeletonSequence random_flip(const SkeletonSequence& seq, const AugmentationParams& params, Rng& rng) {
  std::bernoulli_distribution coin(params.flip_probability);
  return coin(rng) ? mirror(seq) : seq;
}

// ---------------------------------------------------------------------------
// Time resampling

inline Skeleton lerp(const Skeleton& a, const Skeleton& b, double w) {
  Skeleton out;
  for (std::size_t j = 0; j < kNumJoints; ++j) {
    out[j] = {a[j].x + (b[j].x - a[j].x) * w, a[j].y + (b[j].y - a[j].y) * w,
              a[j].c + (b[j].c - a[j].c) * w};
  }
  return out;
}

// Piecewise-linear interpolation of frames given at increasing `times`,
// sampled at `query` (clamped to the covered interval).
inline std::vector<Skeleton> interpolate(std::span<const double> times, std::span<const Skeleton> frames,
                                         std::span<const double> query) {
  if (times.size() != frames.size() || times.empty())
    throw ShapeError("interpolate: times and frames must be non-empty and equal length");
  std::vector<Skeleton> out;
  out.reserve(query.size());
  std::size_t seg = 0;
  for (double q : query) {
    if (q <= times.front()) {
      out.push_back(frames.front());
      continue;
    }
    if (q >= times.back()) {
      out.push_back(frames.back());
      continue;
    }
    while (seg + 1 < times.size() && times[seg + 1] <= q) ++seg;
    if (seg + 1 >= times.size() || times[seg] == q) {
      out.push_back(frames[seg]);
      continue;
    }
    const double w = (q - times[seg]) / (times[seg + 1] - times[seg]);
    out.push_back(lerp(frames[seg], frames[seg + 1], w));
  }
  return out;
}

// Plays the sequence `factor` times faster: output length round(L / factor),
// output frame k samples source time k * factor.
inline SkeletonSequence time_scale(const SkeletonSequence& seq, double factor) {
  if (seq.size() < 2) throw SequenceTooShort("time_scale: need at least 2 frames");
  if (!(factor > 0.0)) throw ShapeError("time_scale: factor must be positive");
  const auto out_len = static_cast<std::size_t>(std::llround(static_cast<double>(seq.size()) / factor));
  if (out_len < 2) throw SequenceTooShort("time_scale: output would have fewer than 2 frames");
  std::vector<double> times(seq.size());
  for (std::size_t i = 0; i < times.size(); ++i) times[i] = static_cast<double>(i);
  std::vector<double> query(out_len);
  for (std::size_t k = 0; k < out_len; ++k) query[k] = static_cast<double>(k) * factor;
  SkeletonSequence out;
  out.frame_rate = seq.frame_rate;
  out.frames = interpolate(times, seq.frames, query);
  return out;
}

inline double draw_pace(const AugmentationParams& params, Rng& rng) {
  if (params.pace_max == params.pace_min) return params.pace_min;
  std::uniform_real_distribution<double> dist(params.pace_min, params.pace_max);
  return dist(rng);
}

inline SkeletonSequence random_pace(const SkeletonSequence& seq, const AugmentationParams& params, Rng& rng) {
  return time_scale(seq, draw_pace(params, rng));
}

// ---------------------------------------------------------------------------
// Coordinate noise

inline SkeletonSequence jitter(const SkeletonSequence& seq, const AugmentationParams& params, Rng& rng) {
  SkeletonSequence out = seq;
  if (params.noise_sigma == 0.0) return out;
  std::normal_distribution<double> noise(0.0, params.noise_sigma);
  for (auto& f : out.frames) {
    for (auto& j : f.joints) {
      j.x += noise(rng);
      j.y += noise(rng);
    }
  }
  return out;
}

// Full training-view augmentation: pace, crop, flip, jitter. The pace factor
// is capped so the paced sequence still covers one crop window.
inline SkeletonSequence augment(const SkeletonSequence& seq, const AugmentationParams& params, Rng& rng) {
  require_length(seq, params.crop_length, "augment");
  double pace = draw_pace(params, rng);
  SkeletonSequence paced = seq;
  if (seq.size() >= 2 && pace != 1.0) {
    const double max_pace = static_cast<double>(seq.size()) / static_cast<double>(params.crop_length);
    pace = std::min(pace, max_pace);
    paced = time_scale(seq, pace);
    if (paced.size() < params.crop_length) paced = seq;
  }
  auto cropped = random_crop(paced, params, rng);
  auto flipped = random_flip(cropped, params, rng);
  return jitter(flipped, params, rng);
}

}  // namespace gaitformer
