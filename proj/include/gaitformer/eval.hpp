#pragma once

// Recognition, gender and attribute metrics plus the inference benchmark.

#include <algorithm>
#include <chrono>
#include <functional>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <new>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gaitformer/errors.hpp"
#include "gaitformer/model.hpp"

namespace gaitformer {

struct LabeledEmbedding {
  std::vector<double> vector;  // unit norm
  std::string identity;
  std::optional<int> viewpoint;
  std::optional<std::string> condition;
  std::optional<int> gender;
};

inline double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw ShapeError("embedding dimensions differ: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Index of the nearest gallery entry; ties go to the lowest index.
inline std::size_t nearest(const std::vector<LabeledEmbedding>& gallery, const std::vector<double>& probe) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t g = 0; g < gallery.size(); ++g) {
    const double d = squared_distance(gallery[g].vector, probe);
    if (d < best_d) {
      best_d = d;
      best = g;
    }
  }
  return best;
}

inline double rank1(const std::vector<LabeledEmbedding>& gallery, const std::vector<LabeledEmbedding>& probes) {
  if (gallery.empty()) throw DataError("rank1: empty gallery");
  if (probes.empty()) throw DataError("rank1: no probes");
  std::size_t hits = 0;
  for (const auto& p : probes) hits += gallery[nearest(gallery, p.vector)].identity == p.identity;
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

// ---------------------------------------------------------------------------
// CASIA-B style protocol

struct CasiaKey {
  std::string subject;
  std::string condition;  // nm, bg, cl (case-insensitive)
  int run = 0;
  int angle = 0;
};

// Parses "<subject>-<condition>-<run>-<angle>", e.g. "001-nm-01-090".
inline std::optional<CasiaKey> parse_casia_id(const std::string& id) {
  std::vector<std::string> parts;
  std::stringstream ss(id);
  std::string p;
  while (std::getline(ss, p, '-')) parts.push_back(p);
  if (parts.size() != 4) return std::nullopt;
  CasiaKey k;
  k.subject = parts[0];
  k.condition = parts[1];
  std::transform(k.condition.begin(), k.condition.end(), k.condition.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  try {
    k.run = std::stoi(parts[2]);
    k.angle = std::stoi(parts[3]);
  } catch (const std::exception&) {
    return std::nullopt;
  }
  return k;
}

struct CasiaTable {
  std::vector<int> angles;
  std::vector<std::string> conditions;
  std::map<std::string, std::map<int, double>> accuracy;  // NaN when no probes
  std::map<std::string, double> mean;                      // over angles with probes
};

inline const std::string kGalleryCondition = "nm";

// Gallery for probe angle `angle`: gallery-condition entries at every other angle.
inline std::vector<std::size_t> casia_gallery(const std::vector<LabeledEmbedding>& all, int angle) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (all[i].condition == kGalleryCondition && all[i].viewpoint && *all[i].viewpoint != angle) out.push_back(i);
  return out;
}

inline CasiaTable casia_protocol(const std::vector<LabeledEmbedding>& all,
                                 std::vector<std::string> conditions = {"nm", "bg", "cl"}) {
  std::set<int> angle_set;
  std::set<std::string> ids;
  std::set<std::pair<std::string, int>> gallery_cells;
  for (const auto& e : all) {
    if (!e.viewpoint || !e.condition) throw DataError("casia_protocol: embedding of " + e.identity + " lacks tags");
    angle_set.insert(*e.viewpoint);
    ids.insert(e.identity);
    if (*e.condition == kGalleryCondition) gallery_cells.insert({e.identity, *e.viewpoint});
  }
  std::vector<std::string> missing;
  for (const auto& id : ids)
    for (int a : angle_set)
      if (!gallery_cells.count({id, a})) missing.push_back(id + "@" + std::to_string(a));
  if (!missing.empty()) {
    std::string msg = "casia_protocol: missing gallery cells:";
    for (const auto& m : missing) msg += " " + m;
    throw DataError(msg);
  }
  CasiaTable table;
  table.angles.assign(angle_set.begin(), angle_set.end());
  table.conditions = conditions;
  for (const auto& cond : conditions) {
    double sum = 0.0;
    std::size_t n = 0;
    for (int angle : table.angles) {
      std::vector<LabeledEmbedding> gallery, probes;
      for (std::size_t i : casia_gallery(all, angle)) {
        if (*all[i].viewpoint == angle) throw std::logic_error("casia_protocol: probe angle leaked into gallery");
        gallery.push_back(all[i]);
      }
      for (const auto& e : all)
        if (*e.condition == cond && *e.viewpoint == angle) probes.push_back(e);
      if (probes.empty() || gallery.empty()) {
        table.accuracy[cond][angle] = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      const double acc = rank1(gallery, probes);
      table.accuracy[cond][angle] = acc;
      sum += acc;
      ++n;
    }
    table.mean[cond] = n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  }
  return table;
}

inline void write_casia_csv(std::ostream& out, const CasiaTable& t) {
  out << "condition";
  for (int a : t.angles) out << ',' << a;
  out << ",mean\n" << std::setprecision(6);
  for (const auto& c : t.conditions) {
    out << c;
    for (int a : t.angles) out << ',' << 100.0 * t.accuracy.at(c).at(a);
    out << ',' << 100.0 * t.mean.at(c) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Gender classification

struct ClassMetrics {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::size_t support = 0;
};

struct GenderMetrics {
  double precision = 0.0, recall = 0.0, f1 = 0.0;  // macro averages
  ClassMetrics positive, negative;
  std::vector<std::string> warnings;
};

// Threshold 0.5; macro-averaged over the classes present in `labels`.
// Undefined precision (no predictions of a class) counts as 0.
inline GenderMetrics gender_metrics(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("gender_metrics: scores and labels differ in length");
  if (scores.empty()) throw DataError("gender_metrics: no samples");
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!(scores[i] >= 0.0 && scores[i] <= 1.0)) throw DataError("gender_metrics: score outside [0,1]");
    const bool pred = scores[i] >= 0.5;
    const bool pos = labels[i] != 0;
    tp += pred && pos;
    fp += pred && !pos;
    fn += !pred && pos;
    tn += !pred && !pos;
  }
  auto cls = [](std::size_t hit, std::size_t false_pos, std::size_t miss) {
    ClassMetrics m;
    m.support = hit + miss;
    m.precision = hit + false_pos ? static_cast<double>(hit) / static_cast<double>(hit + false_pos) : 0.0;
    m.recall = m.support ? static_cast<double>(hit) / static_cast<double>(m.support) : 0.0;
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    return m;
  };
  GenderMetrics g;
  g.positive = cls(tp, fp, fn);
  g.negative = cls(tn, fn, fp);
  std::vector<const ClassMetrics*> present;
  if (g.positive.support) present.push_back(&g.positive);
  else g.warnings.push_back("no positive labels: F1 undefined for the positive class");
  if (g.negative.support) present.push_back(&g.negative);
  else g.warnings.push_back("no negative labels: F1 undefined for the negative class");
  for (const auto* m : present) {
    g.precision += m->precision / static_cast<double>(present.size());
    g.recall += m->recall / static_cast<double>(present.size());
    g.f1 += m->f1 / static_cast<double>(present.size());
  }
  return g;
}

// ---------------------------------------------------------------------------
// Attribute R^2

struct R2Result {
  std::vector<std::optional<double>> scores;  // nullopt for zero-variance labels
  double mean = std::numeric_limits<double>::quiet_NaN();
  std::size_t defined = 0;
};

inline R2Result r2_scores(const std::vector<std::vector<double>>& predictions,
                          const std::vector<std::vector<double>>& labels) {
  if (predictions.size() != labels.size()) throw ShapeError("r2_scores: batch sizes differ");
  if (labels.size() < 2) throw DataError("r2_scores: need at least 2 samples");
  const std::size_t K = labels[0].size();
  R2Result r;
  r.scores.resize(K);
  double sum = 0.0;
  for (std::size_t j = 0; j < K; ++j) {
    double mean = 0.0;
    for (std::size_t b = 0; b < labels.size(); ++b) {
      if (labels[b].size() != K || predictions[b].size() != K) throw ShapeError("r2_scores: ragged rows");
      mean += labels[b][j];
    }
    mean /= static_cast<double>(labels.size());
    double ss_tot = 0.0, ss_res = 0.0;
    for (std::size_t b = 0; b < labels.size(); ++b) {
      ss_tot += (labels[b][j] - mean) * (labels[b][j] - mean);
      ss_res += (labels[b][j] - predictions[b][j]) * (labels[b][j] - predictions[b][j]);
    }
    if (!(ss_tot > 0.0)) continue;
    r.scores[j] = 1.0 - ss_res / ss_tot;
    sum += *r.scores[j];
    ++r.defined;
  }
  if (r.defined) r.mean = sum / static_cast<double>(r.defined);
  return r;
}

// ---------------------------------------------------------------------------
// Inference benchmark

struct BenchmarkResult {
  std::string size;
  std::size_t period_length = 0;
  std::size_t batch = 0;
  std::size_t runs = 0;
  double mean_seconds = 0.0;
  double std_seconds = 0.0;
  std::size_t param_count = 0;
  std::string note;
};

struct BenchOptions {
  std::vector<std::string> sizes{"SM", "MD", "XL"};
  std::vector<std::size_t> period_lengths{12, 24, 48, 96};
  std::size_t batch = 512;
  std::size_t runs = 100;
  std::size_t warmup = 3;
  std::uint64_t seed = 0;
};

// Forward-only wall clock per (size, period). On allocation failure the batch
// is halved and the row carries a note.
template <typename T = float>
std::vector<BenchmarkResult> bench_inference(const BenchOptions& opt,
                                             const std::function<void(const BenchmarkResult&)>& on_row = {}) {
  if (opt.runs == 0) throw ConfigError("bench.runs must be >= 1");
  std::vector<BenchmarkResult> out;
  for (const auto& size : opt.sizes) {
    auto cfg = ModelConfig::named(size);
    cfg.max_T = *std::max_element(opt.period_lengths.begin(), opt.period_lengths.end());
    GaitFormer<T> model(cfg, opt.seed);
    ad::NoGradGuard no_grad;
    for (std::size_t period : opt.period_lengths) {
      BenchmarkResult r;
      r.size = size;
      r.period_length = period;
      r.batch = opt.batch;
      r.param_count = param_count(ModelConfig::named(size));
      std::vector<double> times;
      while (true) {
        try {
          std::mt19937_64 rng(opt.seed + period);
          std::normal_distribution<double> n(0.0, 1.0);
          std::vector<T> data(r.batch * period * kFlatDim);
          for (auto& v : data) v = static_cast<T>(n(rng));
          auto input = ad::Tensor<T>::from({r.batch, period, kFlatDim}, std::move(data));
          for (std::size_t w = 0; w < opt.warmup; ++w) model.forward(input);
          times.clear();
          for (std::size_t k = 0; k < opt.runs; ++k) {
            const auto t0 = std::chrono::steady_clock::now();
            auto res = model.forward(input);
            const auto t1 = std::chrono::steady_clock::now();
            times.push_back(std::chrono::duration<double>(t1 - t0).count());
          }
          break;
        } catch (const std::bad_alloc&) {
          if (r.batch <= 1) throw;
          r.batch /= 2;
          r.note = "out of memory; batch reduced to " + std::to_string(r.batch);
        }
      }
      r.runs = times.size();
      double mean = 0.0;
      for (double t : times) mean += t;
      mean /= static_cast<double>(times.size());
      double var = 0.0;
      for (double t : times) var += (t - mean) * (t - mean);
      r.mean_seconds = mean;
      r.std_seconds = times.size() > 1 ? std::sqrt(var / static_cast<double>(times.size() - 1)) : 0.0;
      if (on_row) on_row(r);
      out.push_back(r);
    }
  }
  return out;
}

inline void write_bench_csv(std::ostream& out, const std::vector<BenchmarkResult>& rows) {
  out << "size,period_length,batch,runs,mean_seconds,std_seconds,param_count,note\n" << std::setprecision(9);
  for (const auto& r : rows)
    out << r.size << ',' << r.period_length << ',' << r.batch << ',' << r.runs << ',' << r.mean_seconds << ','
        << r.std_seconds << ',' << r.param_count << ',' << r.note << '\n';
}

}  // namespace gaitformer
