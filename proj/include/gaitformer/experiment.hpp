#pragma once

// Glue between tracklet archives, training sets and evaluation reports.

#include <algorithm>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "gaitformer/eval.hpp"
#include "gaitformer/model.hpp"
#include "gaitformer/pipeline.hpp"
#include "gaitformer/train.hpp"

namespace gaitformer {

// kTracklet: every tracklet is its own class. kPrefix: the id up to the first
// '-' names the subject ("id003-take01" -> "id003", "001-nm-01-090" -> "001").
enum class LabelMode { kTracklet, kPrefix };

inline LabelMode parse_label_mode(const std::string& s) {
  if (s == "tracklet") return LabelMode::kTracklet;
  if (s == "prefix") return LabelMode::kPrefix;
  throw ConfigError("label mode must be tracklet or prefix, got '" + s + "'");
}

inline std::string subject_of(const std::string& id, LabelMode mode) {
  if (mode == LabelMode::kTracklet) return id;
  return id.substr(0, id.find('-'));
}

inline constexpr std::size_t kFemaleSlot = 0;

// Gender labels come from the Female slot at 0.5 when attributes are present.
inline TrainingSet make_training_set(const std::vector<ProcessedTracklet>& tracklets, LabelMode mode) {
  if (tracklets.empty()) throw DataError("no tracklets");
  std::map<std::string, std::size_t> ids;
  for (const auto& t : tracklets) ids.emplace(subject_of(t.id, mode), 0);
  std::size_t next = 0;
  for (auto& [k, v] : ids) v = next++;
  const bool attrs = std::all_of(tracklets.begin(), tracklets.end(), [](const auto& t) { return t.attributes.has_value(); });
  TrainingSet set;
  for (const auto& t : tracklets) {
    set.sequences.push_back(t.sequence);
    set.labels.push_back(ids.at(subject_of(t.id, mode)));
    if (attrs) {
      set.attributes.emplace_back(t.attributes->begin(), t.attributes->end());
      set.gender.push_back((*t.attributes)[kFemaleSlot] >= 0.5);
    }
  }
  return set;
}

struct SplitIndices {
  std::vector<std::size_t> gallery, probes;
};

// First tracklet (by id order) of every subject is the gallery; the rest probe.
inline SplitIndices subject_split(const std::vector<ProcessedTracklet>& tracklets, LabelMode mode) {
  std::vector<std::size_t> order(tracklets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return tracklets[a].id < tracklets[b].id; });
  SplitIndices s;
  std::map<std::string, bool> seen;
  for (std::size_t i : order) {
    if (seen.emplace(subject_of(tracklets[i].id, mode), true).second) s.gallery.push_back(i);
    else s.probes.push_back(i);
  }
  return s;
}

struct TrackletPredictions {
  std::vector<LabeledEmbedding> embeddings;
  SequenceOutputs outputs;
};

template <typename T>
TrackletPredictions predict(const GaitFormer<T>& model, const std::vector<ProcessedTracklet>& tracklets,
                            LabelMode mode, std::size_t period) {
  std::vector<SkeletonSequence> seqs;
  for (const auto& t : tracklets) {
    if (t.sequence.size() < period)
      throw SequenceTooShort("tracklet " + t.id + " has " + std::to_string(t.sequence.size()) +
                             " frames, evaluation needs " + std::to_string(period));
    seqs.push_back(t.sequence);
  }
  TrackletPredictions p;
  p.outputs = infer(model, std::span<const SkeletonSequence>(seqs), period);
  for (std::size_t i = 0; i < tracklets.size(); ++i) {
    LabeledEmbedding e;
    e.vector = p.outputs.embeddings[i];
    e.identity = subject_of(tracklets[i].id, mode);
    if (auto k = parse_casia_id(tracklets[i].id)) {
      e.viewpoint = k->angle;
      e.condition = k->condition;
    }
    if (tracklets[i].attributes) e.gender = (*tracklets[i].attributes)[kFemaleSlot] >= 0.5;
    p.embeddings.push_back(std::move(e));
  }
  return p;
}

struct EvaluationReport {
  double rank1 = 0.0;
  std::size_t gallery = 0, probes = 0;
  std::optional<GenderMetrics> gender;
  std::string gender_source;  // "gender_head" or "attribute:Female"
  std::optional<R2Result> r2;
  std::optional<CasiaTable> casia;
};

// Rank-1 over the subject split, gender F1 and attribute R^2 over the probes.
// With `casia` set, tracklet ids must follow the subject-condition-run-angle form.
template <typename T>
EvaluationReport evaluate_tracklets(const GaitFormer<T>& model, const std::vector<ProcessedTracklet>& tracklets,
                                    LabelMode mode, std::size_t period, bool casia = false) {
  const auto pred = predict(model, tracklets, mode, period);
  EvaluationReport r;
  if (casia) {
    r.casia = casia_protocol(pred.embeddings);
  }
  const auto split = subject_split(tracklets, mode);
  if (split.probes.empty()) throw DataError("evaluation needs at least two tracklets of some subject");
  std::vector<LabeledEmbedding> gallery, probes;
  for (auto i : split.gallery) gallery.push_back(pred.embeddings[i]);
  for (auto i : split.probes) probes.push_back(pred.embeddings[i]);
  r.rank1 = rank1(gallery, probes);
  r.gallery = gallery.size();
  r.probes = probes.size();
  const bool attrs = std::all_of(tracklets.begin(), tracklets.end(), [](const auto& t) { return t.attributes.has_value(); });
  if (attrs && split.probes.size() >= 2) {
    std::vector<std::vector<double>> predicted, labels;
    std::vector<double> scores;
    std::vector<int> genders;
    for (auto i : split.probes) {
      predicted.push_back(pred.outputs.attributes[i]);
      labels.emplace_back(tracklets[i].attributes->begin(), tracklets[i].attributes->end());
      scores.push_back(model.has_gender_head() ? pred.outputs.gender[i] : pred.outputs.attributes[i][kFemaleSlot]);
      genders.push_back(*pred.embeddings[i].gender);
    }
    r.r2 = r2_scores(predicted, labels);
    r.gender = gender_metrics(scores, genders);
    r.gender_source = model.has_gender_head() ? "gender_head" : "attribute:Female";
  }
  return r;
}

inline void write_evaluation_csv(std::ostream& out, const EvaluationReport& r) {
  out << std::setprecision(6);
  out << "# rank1\nmetric,value\n";
  out << "rank1," << r.rank1 << "\ngallery," << r.gallery << "\nprobes," << r.probes << "\n\n";
  out << "# gender (macro, threshold 0.5)\nmetric,value\n";
  if (r.gender) {
    out << "source," << r.gender_source << "\nprecision," << r.gender->precision << "\nrecall," << r.gender->recall
        << "\nf1," << r.gender->f1 << '\n';
    for (const auto& w : r.gender->warnings) out << "warning," << w << '\n';
  } else {
    out << "f1,NA\n";
  }
  out << "\n# r2\nattribute,r2\n";
  if (r.r2) {
    for (std::size_t j = 0; j < r.r2->scores.size(); ++j) {
      out << kAttributeNames[j] << ',';
      if (r.r2->scores[j]) out << *r.r2->scores[j];
      else out << "NA";
      out << '\n';
    }
    out << "mean," << r.r2->mean << '\n';
  }
  if (r.casia) {
    out << "\n# casia rank1 (%)\n";
    write_casia_csv(out, *r.casia);
  }
}

}  // namespace gaitformer
