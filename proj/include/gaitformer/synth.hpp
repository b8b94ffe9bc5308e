#pragma once

// Synthetic walkers: per-identity periodic limb trajectories rendered as
// COCO-18 skeletons, attribute vectors computed from the identity latents,
// and a detection-stream fixture for the dataset pipeline.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "gaitformer/attributes.hpp"
#include "gaitformer/pipeline.hpp"
#include "gaitformer/skeleton.hpp"

namespace gaitformer::synth {

struct GaitLatent {
  double frequency;   // gait cycles per second
  double leg_swing;   // hip swing amplitude, radians
  double knee_flex;
  double arm_swing;
  double elbow_flex;
  double arm_phase;   // arm lag relative to the opposite leg
  double bounce;      // vertical oscillation at twice the gait frequency
  double sway;        // lateral oscillation
  double lean;        // forward torso lean, radians
  double leg_length;
  double torso_length;
  double arm_length;
  double shoulder_width;
  double hip_width;
  double view;        // share of forward motion visible along image x
};

inline constexpr std::size_t kLatentDim = 15;

inline std::array<double, kLatentDim> as_array(const GaitLatent& g) {
  return {g.frequency,  g.leg_swing,   g.knee_flex,    g.arm_swing,  g.elbow_flex,
          g.arm_phase,  g.bounce,      g.sway,         g.lean,       g.leg_length,
          g.torso_length, g.arm_length, g.shoulder_width, g.hip_width, g.view};
}

struct LatentRange {
  double lo, hi;
};

inline constexpr std::array<LatentRange, kLatentDim> kLatentRanges{{
    {0.75, 1.25},
    {0.25, 0.50},
    {0.30, 0.90},
    {0.15, 0.60},
    {0.10, 0.50},
    {-0.40, 0.40},
    {0.010, 0.040},
    {0.005, 0.030},
    {-0.05, 0.15},
    {0.42, 0.52},
    {0.28, 0.34},
    {0.30, 0.38},
    {0.18, 0.26},
    {0.10, 0.16},
    {0.30, 0.60},
}};

inline GaitLatent sample_latent(Rng& rng) {
  std::array<double, kLatentDim> v{};
  for (std::size_t i = 0; i < kLatentDim; ++i) {
    std::uniform_real_distribution<double> u(kLatentRanges[i].lo, kLatentRanges[i].hi);
    v[i] = u(rng);
  }
  return {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11], v[12], v[13], v[14]};
}

// Pose at gait phase `phi` in body units (height 1, y down, pelvis origin).
inline Skeleton body_pose(const GaitLatent& g, double phi, double confidence = 0.9) {
  using std::cos;
  using std::sin;
  constexpr double kPi = std::numbers::pi;
  Skeleton s;
  auto put = [&](std::size_t j, double lateral, double forward, double y) {
    s.joints[j] = {lateral + g.view * forward + g.sway * sin(phi), y + g.bounce * cos(2.0 * phi), confidence};
  };
  const double thigh = 0.53 * g.leg_length, shank = 0.47 * g.leg_length;
  for (int side = 0; side < 2; ++side) {
    const double ph = phi + (side ? kPi : 0.0);
    const double lat = (side ? 0.5 : -0.5) * g.hip_width;
    const double theta = g.leg_swing * sin(ph);
    const double beta = g.knee_flex * 0.5 * (1.0 - cos(ph - 0.6));
    const double kf = thigh * sin(theta), ky = thigh * cos(theta);
    const double af = kf + shank * sin(theta - beta), ay = ky + shank * cos(theta - beta);
    put(side ? kLHip : kRHip, lat, 0.0, 0.0);
    put(side ? kLKnee : kRKnee, lat, kf, ky);
    put(side ? kLAnkle : kRAnkle, lat, af, ay);

    const double alpha = g.arm_swing * sin(ph + kPi + g.arm_phase);
    const double gamma = g.elbow_flex * 0.5 * (1.0 + sin(ph));
    const double upper = 0.5 * g.arm_length, fore = 0.5 * g.arm_length;
    const double slat = (side ? 0.5 : -0.5) * g.shoulder_width;
    const double sf = g.lean * g.torso_length, sy = -g.torso_length;
    const double ef = sf + upper * sin(alpha), ey = sy + upper * cos(alpha);
    const double wf = ef + fore * sin(alpha + gamma), wy = ey + fore * cos(alpha + gamma);
    put(side ? kLShoulder : kRShoulder, slat, sf, sy);
    put(side ? kLElbow : kRElbow, slat, ef, ey);
    put(side ? kLWrist : kRWrist, slat, wf, wy);
    put(side ? kLEye : kREye, (side ? 0.02 : -0.02), sf + 0.03, sy - 0.13);
    put(side ? kLEar : kREar, (side ? 0.05 : -0.05), sf, sy - 0.12);
  }
  const double nf = g.lean * g.torso_length, ny = -g.torso_length;
  put(kNeck, 0.0, nf, ny);
  put(kNose, 0.0, nf + 0.04, ny - 0.11);
  return s;
}

// Places a body-unit skeleton in the image at (cx, cy) with `height` pixels.
inline Skeleton to_pixels(const Skeleton& body, double cx, double cy, double height) {
  Skeleton s = body;
  for (auto& j : s.joints) {
    j.x = cx + height * j.x;
    j.y = cy + height * j.y;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Attributes

// Slots whose value depends on gait frequency alone.
inline constexpr std::array<std::size_t, 6> kFrequencyAttributes{0, 3, 9, 20, 29, 40};

inline bool is_frequency_attribute(std::size_t j) {
  for (auto f : kFrequencyAttributes)
    if (f == j) return true;
  return false;
}

// Fixed mapping from latents to 42 soft labels: frequency attributes are
// logistic functions of the standardized frequency, the rest logistic
// functions of a fixed sparse mix of the other latents.
inline AttributeVector attributes_from_latent(const GaitLatent& g) {
  const auto v = as_array(g);
  std::array<double, kLatentDim> z{};
  for (std::size_t i = 0; i < kLatentDim; ++i) {
    const double mid = 0.5 * (kLatentRanges[i].lo + kLatentRanges[i].hi);
    const double half = 0.5 * (kLatentRanges[i].hi - kLatentRanges[i].lo);
    z[i] = (v[i] - mid) / half;
  }
  AttributeVector out{};
  std::mt19937_64 table(0x6a09e667f3bcc908ull);
  std::normal_distribution<double> w(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(1, kLatentDim - 1);
  for (std::size_t j = 0; j < kNumAttributes; ++j) {
    double logit = 0.3 * w(table);
    if (is_frequency_attribute(j)) {
      const double slope = (j % 2 ? -1.0 : 1.0) * (1.5 + 0.25 * static_cast<double>(j % 3));
      logit += slope * z[0];
    } else {
      for (int k = 0; k < 3; ++k) logit += 1.2 * w(table) * z[pick(table)];
    }
    out[j] = 1.0 / (1.0 + std::exp(-logit));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpora

struct SequenceOptions {
  std::size_t frames = 96;
  double fps = 24.0;
  double pixel_noise = 0.5;       // in pixels, on a person ~120 px tall
  double frequency_jitter = 0.02; // relative, per sequence
  double view_jitter = 0.03;      // absolute, per sequence
};

// Renders one walk of identity `g`, normalized per frame.
inline SkeletonSequence render_sequence(const GaitLatent& g, const SequenceOptions& opt, Rng& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, opt.pixel_noise);
  GaitLatent walk = g;
  walk.frequency *= 1.0 + opt.frequency_jitter * (2.0 * u01(rng) - 1.0);
  walk.view += opt.view_jitter * (2.0 * u01(rng) - 1.0);
  const double phase0 = 2.0 * std::numbers::pi * u01(rng);
  const double height = 90.0 + 60.0 * u01(rng);
  const double cx = 200.0 + 400.0 * u01(rng), cy = 200.0 + 100.0 * u01(rng);
  const double drift = 2.0 * u01(rng) - 1.0;
  SkeletonSequence seq;
  seq.frame_rate = opt.fps;
  seq.frames.resize(opt.frames);
  for (std::size_t t = 0; t < opt.frames; ++t) {
    const double phi = phase0 + 2.0 * std::numbers::pi * walk.frequency * static_cast<double>(t) / opt.fps;
    auto px = to_pixels(body_pose(walk, phi), cx + drift * static_cast<double>(t), cy, height);
    for (auto& j : px.joints) {
      j.x += noise(rng);
      j.y += noise(rng);
    }
    seq.frames[t] = px;
  }
  normalize_sequence(seq);
  return seq;
}

struct SyntheticSequence {
  std::size_t identity = 0;
  std::size_t take = 0;
  SkeletonSequence sequence;
  AttributeVector attributes{};
  int female = 0;
};

struct CorpusOptions {
  std::size_t identities = 32;
  std::size_t takes_per_identity = 3;
  SequenceOptions sequence;
  std::uint64_t seed = 0;
};

struct Corpus {
  std::vector<GaitLatent> latents;
  std::vector<SyntheticSequence> sequences;  // identity-major, take-minor
};

inline Corpus make_corpus(const CorpusOptions& opt) {
  Rng rng(opt.seed);
  Corpus c;
  for (std::size_t i = 0; i < opt.identities; ++i) c.latents.push_back(sample_latent(rng));
  for (std::size_t i = 0; i < opt.identities; ++i) {
    const auto attrs = attributes_from_latent(c.latents[i]);
    for (std::size_t k = 0; k < opt.takes_per_identity; ++k) {
      Rng take_rng(opt.seed ^ (0x9e3779b97f4a7c15ull * (i * 1009 + k + 1)));
      SyntheticSequence s;
      s.identity = i;
      s.take = k;
      s.sequence = render_sequence(c.latents[i], opt.sequence, take_rng);
      s.attributes = attrs;
      s.female = attrs[0] >= 0.5 ? 1 : 0;
      c.sequences.push_back(std::move(s));
    }
  }
  return c;
}

inline std::string take_id(std::size_t identity, std::size_t take) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "id%03zu-take%02zu", identity, take);
  return buf;
}

// Archive form used by the CLI: one tracklet per take, attributes attached.
inline std::vector<ProcessedTracklet> to_tracklets(const Corpus& c) {
  std::vector<ProcessedTracklet> out;
  for (const auto& s : c.sequences) {
    ProcessedTracklet t;
    t.id = take_id(s.identity, s.take);
    t.sequence = s.sequence;
    t.attributes = s.attributes;
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mini CASIA-style layout: ids x angles x conditions, named
// "<subject>-<condition>-<run>-<angle>".

struct CasiaOptions {
  std::size_t identities = 4;
  std::vector<int> angles{0, 90, 180};
  std::vector<std::string> conditions{"nm", "bg", "cl"};
  std::size_t runs = 1;
  SequenceOptions sequence;
  std::uint64_t seed = 0;
};

inline std::string casia_id(std::size_t subject, const std::string& cond, std::size_t run, int angle) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%03zu-%s-%02zu-%03d", subject + 1, cond.c_str(), run + 1, angle);
  return buf;
}

// The angle shifts the visible forward-motion share; conditions perturb
// arm swing (carrying) or body widths (clothing).
inline std::vector<ProcessedTracklet> make_casia_layout(const CasiaOptions& opt) {
  Rng rng(opt.seed);
  std::vector<GaitLatent> latents;
  for (std::size_t i = 0; i < opt.identities; ++i) latents.push_back(sample_latent(rng));
  std::vector<ProcessedTracklet> out;
  for (std::size_t i = 0; i < opt.identities; ++i)
    for (const auto& cond : opt.conditions)
      for (std::size_t r = 0; r < opt.runs; ++r)
        for (int angle : opt.angles) {
          GaitLatent g = latents[i];
          g.view = 0.3 + 0.3 * std::abs(std::sin(angle * std::numbers::pi / 180.0));
          if (cond == "bg") g.arm_swing *= 0.6;
          if (cond == "cl") {
            g.shoulder_width *= 1.08;
            g.hip_width *= 1.1;
          }
          const auto id = casia_id(i, cond, r, angle);
          Rng take_rng(opt.seed ^ std::hash<std::string>{}(id));
          ProcessedTracklet t;
          t.id = id;
          t.sequence = render_sequence(g, opt.sequence, take_rng);
          out.push_back(std::move(t));
        }
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline fixture: five tracklets at 30 fps in disjoint image columns.
//   A  90 frames walking with a 3-frame occlusion gap; includes frames with
//      mean confidence exactly 0.5 and ankle confidence exactly 0.4 (kept) and
//      frames with ankles at 0.35 (dropped)
//   B  exactly 60 frames walking (= T*fps/24, kept)
//   C  walking, every confidence 0.49 (removed by the confidence filter)
//   D  59 frames walking (removed by the duration filter)
//   E  90 frames standing still (removed by the leg-speed filter)

struct FixtureTrack {
  char name;
  std::int64_t first_frame;
  std::int64_t frames;
  bool walking;
};

inline void write_fixture_stream(std::ostream& out) {
  const double fps = 30.0;
  const std::array<FixtureTrack, 5> tracks{{
      {'A', 0, 90, true}, {'B', 5, 60, true}, {'C', 0, 80, true}, {'D', 10, 59, true}, {'E', 0, 90, false}}};
  GaitLatent g{1.0, 0.35, 0.6, 0.35, 0.3, 0.0, 0.02, 0.01, 0.05, 0.47, 0.31, 0.34, 0.22, 0.13, 0.45};
  out << "# pipeline fixture: frame x y w h (x y c)*18 area\n#fps=30\n";
  std::vector<std::pair<std::int64_t, std::string>> lines;
  for (std::size_t k = 0; k < tracks.size(); ++k) {
    const auto& tr = tracks[k];
    const double column = 150.0 + 300.0 * static_cast<double>(k);
    for (std::int64_t i = 0; i < tr.frames; ++i) {
      if (tr.name == 'A' && i >= 40 && i < 43) continue;
      const std::int64_t f = tr.first_frame + i;
      const double phi = tr.walking ? 2.0 * std::numbers::pi * g.frequency * static_cast<double>(i) / fps : 0.0;
      double conf = tr.name == 'C' ? 0.49 : 0.9;
      auto s = to_pixels(body_pose(g, phi, conf), column + 0.5 * static_cast<double>(i), 300.0, 160.0);
      if (tr.name == 'A' && i >= 10 && i < 13)
        for (auto& j : s.joints) j.c = 0.5;
      if (tr.name == 'A' && i >= 20 && i < 23) s[kRAnkle].c = s[kLAnkle].c = 0.4;
      if (tr.name == 'A' && i >= 30 && i < 32) s[kRAnkle].c = s[kLAnkle].c = 0.35;
      const double bx = column + 0.5 * static_cast<double>(i) - 50.0, by = 300.0 - 110.0;
      const double bw = 100.0, bh = 220.0;
      const double area = bw * bh / (1920.0 * 1080.0);
      std::string line;
      char buf[64];
      std::snprintf(buf, sizeof buf, "%lld %.3f %.3f %.3f %.3f", static_cast<long long>(f), bx, by, bw, bh);
      line += buf;
      for (const auto& j : s.joints) {
        std::snprintf(buf, sizeof buf, " %.4f %.4f %.2f", j.x, j.y, j.c);
        line += buf;
      }
      std::snprintf(buf, sizeof buf, " %.6f", area);
      line += buf;
      lines.emplace_back(f, std::move(line));
    }
  }
  std::stable_sort(lines.begin(), lines.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& [f, l] : lines) out << l << '\n';
}

}  // namespace gaitformer::synth
