#pragma once

// Losses, schedules, optimizer and the pretraining / fine-tuning loops.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gaitformer/errors.hpp"
#include "gaitformer/model.hpp"
#include "gaitformer/skeleton.hpp"
#include "gaitformer/tensor.hpp"

namespace gaitformer {

struct TrainConfig {
  std::size_t batch_size = 64;
  double tau = 0.001;
  double lambda = 0.5;
  double lr_min = 1e-4;
  double lr_max = 1e-3;
  std::size_t cycle_epochs = 20;
  std::size_t total_epochs = 200;
  double finetune_lr0 = 1e-4;
  std::size_t finetune_epochs = 200;
  double llrd_decay = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("train.tau must be > 0");
    if (!(lambda >= 0.0)) throw ConfigError("train.lambda must be >= 0");
    if (!(lr_min <= lr_max) || lr_min < 0.0) throw ConfigError("train.lr_min must satisfy 0 <= lr_min <= lr_max");
    if (cycle_epochs == 0) throw ConfigError("train.cycle_epochs must be > 0");
    if (batch_size == 0) throw ConfigError("train.batch_size must be > 0");
    if (!(llrd_decay > 0.0 && llrd_decay <= 1.0)) throw ConfigError("train.llrd_decay must lie in (0,1]");
  }
};

// ---------------------------------------------------------------------------
// Losses

// Supervised contrastive loss over a multi-view batch. Rows of `projections`
// are l2-normalized first; the loss is the mean over anchors of
//   -1/|P(i)| sum_p log softmax_{a != i}(z_i . z_a / tau)[p].
template <typename T>
ad::Tensor<T> supcon_loss(const ad::Tensor<T>& projections, std::span<const std::size_t> labels, T tau) {
  if (projections.rank() != 2 || projections.dim(0) != labels.size()) {
    throw ShapeError("supcon_loss: projections " + ad::shape_str(projections.shape()) + " with " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t M = labels.size();
  if (M < 2) throw ShapeError("supcon_loss: need at least 2 views");
  auto z = ad::l2_normalize_rows(projections);
  auto sim = ad::matmul(z, ad::transpose(z));
  auto sd = sim.data();

  std::vector<T> prob(M * M, T(0));  // softmax over a != i
  std::vector<std::size_t> positives(M, 0);
  T total = T(0);
  for (std::size_t i = 0; i < M; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t a = 0; a < M; ++a)
      if (a != i) mx = std::max(mx, sd[i * M + a] / tau);
    T z_sum = T(0);
    for (std::size_t a = 0; a < M; ++a) {
      if (a == i) continue;
      const T e = std::exp(sd[i * M + a] / tau - mx);
      prob[i * M + a] = e;
      z_sum += e;
    }
    const T lse = mx + std::log(z_sum);
    T pos_sum = T(0);
    for (std::size_t a = 0; a < M; ++a) {
      if (a == i) continue;
      prob[i * M + a] /= z_sum;
      if (labels[a] == labels[i]) {
        ++positives[i];
        pos_sum += sd[i * M + a] / tau;
      }
    }
    if (positives[i] == 0) throw ShapeError("supcon_loss: anchor " + std::to_string(i) + " has no positive view");
    total += lse - pos_sum / static_cast<T>(positives[i]);
  }
  total /= static_cast<T>(M);

  std::vector<std::size_t> lab(labels.begin(), labels.end());
  auto ps = sim.node();
  return ad::detail::make_result<T>(
      {}, {total}, "supcon", {ps},
      [ps, prob = std::move(prob), positives = std::move(positives), lab = std::move(lab), M, tau](std::span<const T> g) {
        if (!ps->requires_grad) return;
        auto dst = ps->ensure_grad();
        const T c = g[0] / (static_cast<T>(M) * tau);
        for (std::size_t i = 0; i < M; ++i) {
          const T inv_p = T(1) / static_cast<T>(positives[i]);
          for (std::size_t a = 0; a < M; ++a) {
            if (a == i) continue;
            const T target = lab[a] == lab[i] ? inv_p : T(0);
            dst[i * M + a] += c * (prob[i * M + a] - target);
          }
        }
      });
}

// Mean binary cross-entropy between sigmoid(logits) and soft targets in
// [0,1], evaluated as max(l,0) - l*y + log(1 + exp(-|l|)).
template <typename T>
ad::Tensor<T> bce_soft(const ad::Tensor<T>& logits, const ad::Tensor<T>& targets) {
  if (logits.shape() != targets.shape()) {
    throw ShapeError("bce_soft: logits " + ad::shape_str(logits.shape()) + " vs targets " +
                     ad::shape_str(targets.shape()));
  }
  auto l = logits.data();
  auto y = targets.data();
  T total = T(0);
  for (std::size_t i = 0; i < l.size(); ++i) {
    if (!(y[i] >= T(0) && y[i] <= T(1))) throw ShapeError("bce_soft: target outside [0,1]");
    total += std::max(l[i], T(0)) - l[i] * y[i] + std::log1p(std::exp(-std::abs(l[i])));
  }
  const T n = static_cast<T>(l.size());
  total /= n;
  auto pl = logits.node(), py = targets.node();
  return ad::detail::make_result<T>({}, {total}, "bce_soft", {pl, py}, [pl, py, n](std::span<const T> g) {
    if (pl->requires_grad) {
      auto dst = pl->ensure_grad();
      for (std::size_t i = 0; i < dst.size(); ++i)
        dst[i] += g[0] * (ad::sigmoid_value(pl->value[i]) - py->value[i]) / n;
    }
    if (py->requires_grad) {
      auto dst = py->ensure_grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += -g[0] * pl->value[i] / n;
    }
  });
}

template <typename T>
ad::Tensor<T> combined_loss(const ad::Tensor<T>& supcon, const ad::Tensor<T>& appearance, T lambda) {
  return ad::add(supcon, ad::scale(appearance, lambda));
}

inline double combined_loss(double supcon, double appearance, double lambda) { return supcon + lambda * appearance; }

// ---------------------------------------------------------------------------
// Schedules

// Triangular cycle: lr_min at the cycle boundaries, lr_max at mid-cycle.
inline double cyclical_lr(std::size_t step, std::size_t steps_per_epoch, const TrainConfig& cfg) {
  if (cfg.cycle_epochs == 0) throw ConfigError("train.cycle_epochs must be > 0");
  const double epoch = static_cast<double>(step) / static_cast<double>(std::max<std::size_t>(steps_per_epoch, 1));
  const double cycle = static_cast<double>(cfg.cycle_epochs);
  const double x = std::fmod(epoch, cycle) / cycle;
  return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1.0 - std::abs(2.0 * x - 1.0));
}

// lr0 decayed linearly to 0 at `total`.
inline double linear_decay_lr(double progress, double total, double lr0) {
  if (!(total > 0.0)) return 0.0;
  return lr0 * std::max(0.0, 1.0 - progress / total);
}

// Per-layer rates, top encoder layer first.
inline std::vector<double> llrd_rates(double base_lr, double decay, std::size_t num_layers) {
  if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("llrd decay must lie in (0,1]");
  std::vector<double> rates(num_layers);
  double r = base_lr;
  for (auto& v : rates) {
    v = r;
    r *= decay;
  }
  return rates;
}

// Multiplier for each LLRD depth group (see NamedParam): heads and the top
// layer get 1, each layer below one more factor of `decay`, the token
// projection and positional embedding one factor below the bottom layer.
inline double llrd_multiplier(std::size_t group, std::size_t num_layers, double decay) {
  if (group > num_layers) return 1.0;
  return std::pow(decay, static_cast<double>(num_layers - group));
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
class Adam {
 public:
  Adam(std::vector<ad::Tensor<T>> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  // One update; `lr_scale[k]` multiplies `lr` for parameter k when given.
  void step(double lr, std::span<const double> lr_scale = {}) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      const double rate = lr * (lr_scale.empty() ? 1.0 : lr_scale[k]);
      auto g = p.grad();
      auto w = p.mutable_data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        w[i] -= static_cast<T>(rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t steps() const { return t_; }

 private:
  std::vector<ad::Tensor<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Data

// Sequences with class labels (tracklet ids for self-supervision, identities
// for fine-tuning), optional soft attributes and optional gender labels.
struct TrainingSet {
  std::vector<SkeletonSequence> sequences;
  std::vector<std::size_t> labels;
  std::vector<std::vector<double>> attributes;
  std::vector<int> gender;  // 1 female, 0 male

  std::size_t size() const { return sequences.size(); }
  bool has_attributes() const { return !attributes.empty(); }
};

template <typename T>
struct MultiViewBatch {
  ad::Tensor<T> views;       // [2N, T, 54]; rows i and i+N share a label
  std::vector<std::size_t> labels;
  ad::Tensor<T> attributes;  // [2N, A] when the set carries attributes
  std::vector<std::size_t> members;
};

template <typename T>
MultiViewBatch<T> assemble_two_view(const TrainingSet& data, std::span<const std::size_t> members,
                                    const AugmentationParams& aug, Rng& rng) {
  const std::size_t N = members.size();
  std::vector<SkeletonSequence> views(2 * N);
  for (std::size_t i = 0; i < N; ++i) views[i] = augment(data.sequences[members[i]], aug, rng);
  for (std::size_t i = 0; i < N; ++i) views[N + i] = augment(data.sequences[members[i]], aug, rng);
  MultiViewBatch<T> batch;
  batch.views = make_batch<T>(views);
  batch.members.assign(members.begin(), members.end());
  batch.labels.resize(2 * N);
  for (std::size_t i = 0; i < N; ++i) batch.labels[i] = batch.labels[N + i] = data.labels[members[i]];
  if (data.has_attributes()) {
    const std::size_t A = data.attributes[members[0]].size();
    std::vector<T> attrs(2 * N * A);
    for (std::size_t v = 0; v < 2; ++v)
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < A; ++j)
          attrs[(v * N + i) * A + j] = static_cast<T>(data.attributes[members[i]][j]);
    batch.attributes = ad::Tensor<T>::from({2 * N, A}, std::move(attrs));
  }
  return batch;
}

// Samples `batch_size` distinct sequences and draws two augmented views of each.
template <typename T>
MultiViewBatch<T> two_view_batch(const TrainingSet& data, std::size_t batch_size, const AugmentationParams& aug,
                                 Rng& rng) {
  if (data.size() < batch_size) {
    throw DataError("two_view_batch: dataset has " + std::to_string(data.size()) + " sequences, batch needs " +
                    std::to_string(batch_size));
  }
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(batch_size);
  return assemble_two_view<T>(data, idx, aug, rng);
}

// ---------------------------------------------------------------------------
// Pretraining

enum class Regime { kContrastive, kAttributes, kMultitask };

inline Regime parse_regime(const std::string& s) {
  if (s == "contrastive") return Regime::kContrastive;
  if (s == "attributes") return Regime::kAttributes;
  if (s == "multitask" || s == "mt") return Regime::kMultitask;
  throw ConfigError("regime must be contrastive, attributes or multitask, got '" + s + "'");
}

inline const char* regime_name(Regime r) {
  switch (r) {
    case Regime::kContrastive: return "contrastive";
    case Regime::kAttributes: return "attributes";
    case Regime::kMultitask: return "multitask";
  }
  return "?";
}

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;  // rate at the first step of the epoch
  double loss_supcon = 0.0;
  double loss_appearance = 0.0;
  double loss_total = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

namespace detail {

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s + batch_size <= n; s += batch_size)
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s),
                     idx.begin() + static_cast<std::ptrdiff_t>(s + batch_size));
  return out;
}

inline void check_finite(double v, const char* what, std::size_t epoch) {
  if (!std::isfinite(v))
    throw NumericError(std::string(what) + " loss became non-finite at epoch " + std::to_string(epoch));
}

}  // namespace detail

// Trains `model` in place; returns one log row per epoch.
template <typename T>
std::vector<EpochLog> pretrain(GaitFormer<T>& model, const TrainingSet& data, Regime regime, const TrainConfig& cfg,
                               const AugmentationParams& aug, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  aug.validate();
  if (regime != Regime::kContrastive && !data.has_attributes())
    throw DataError(std::string("regime '") + regime_name(regime) + "' needs attribute labels");
  if (data.size() < cfg.batch_size)
    throw DataError("pretrain: dataset has " + std::to_string(data.size()) + " sequences, batch_size is " +
                    std::to_string(cfg.batch_size));
  Rng rng(cfg.seed);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  Adam<T> opt(model.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  const std::size_t steps_per_epoch = data.size() / cfg.batch_size;
  std::vector<EpochLog> logs;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    log.lr = cyclical_lr(step, steps_per_epoch, cfg);
    const auto batches = detail::epoch_batches(data.size(), cfg.batch_size, rng);
    for (const auto& members : batches) {
      auto batch = assemble_two_view<T>(data, members, aug, rng);
      auto out = model.forward(batch.views, &dropout_rng);
      ad::Tensor<T> loss;
      double sc = 0.0, ap = 0.0;
      if (regime != Regime::kAttributes) {
        auto l = supcon_loss(out.projection, batch.labels, static_cast<T>(cfg.tau));
        sc = static_cast<double>(l.item());
        loss = l;
      }
      if (regime != Regime::kContrastive) {
        auto l = bce_soft(out.attr_logits, batch.attributes);
        ap = static_cast<double>(l.item());
        loss = regime == Regime::kAttributes ? l : combined_loss(loss, l, static_cast<T>(cfg.lambda));
      }
      detail::check_finite(static_cast<double>(loss.item()), regime_name(regime), epoch);
      opt.zero_grad();
      loss.backward();
      opt.step(cyclical_lr(step, steps_per_epoch, cfg));
      ++step;
      log.loss_supcon += sc;
      log.loss_appearance += ap;
      log.loss_total += static_cast<double>(loss.item());
    }
    const double n = static_cast<double>(batches.size());
    log.loss_supcon /= n;
    log.loss_appearance /= n;
    log.loss_total /= n;
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return logs;
}

// ---------------------------------------------------------------------------
// Fine-tuning

enum class FinetuneTask { kRecognition, kGender };

inline FinetuneTask parse_task(const std::string& s) {
  if (s == "recognition") return FinetuneTask::kRecognition;
  if (s == "gender") return FinetuneTask::kGender;
  throw ConfigError("finetune task must be recognition or gender, got '" + s + "'");
}

// Per-parameter LLRD multipliers in named_parameters() order.
template <typename T>
std::vector<double> llrd_scales(const GaitFormer<T>& model, double decay) {
  std::vector<double> out;
  for (const auto& p : model.named_parameters())
    out.push_back(llrd_multiplier(p.first.group, model.config().num_layers, decay));
  return out;
}

// Recognition: SupCon on identity labels. Gender: BCE on a fresh single-logit
// head. Rates follow LLRD and decay linearly from finetune_lr0 to 0.
template <typename T>
std::vector<EpochLog> finetune(GaitFormer<T>& model, const TrainingSet& data, FinetuneTask task,
                               const TrainConfig& cfg, const AugmentationParams& aug,
                               const EpochCallback& on_epoch = {}) {
  cfg.validate();
  aug.validate();
  if (task == FinetuneTask::kGender) {
    if (data.gender.size() != data.size()) throw DataError("gender fine-tuning needs a gender label per sequence");
    model.add_gender_head(cfg.seed ^ 0x5bd1e995ull);
  }
  const std::size_t batch_size = std::min(cfg.batch_size, data.size());
  if (batch_size == 0) throw DataError("finetune: empty dataset");
  Rng rng(cfg.seed);
  Adam<T> opt(model.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  const auto scales = llrd_scales(model, cfg.llrd_decay);
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, data.size() / batch_size);
  const double total_steps = static_cast<double>(steps_per_epoch * cfg.finetune_epochs);
  std::vector<EpochLog> logs;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    log.lr = linear_decay_lr(static_cast<double>(step), total_steps, cfg.finetune_lr0);
    const auto batches = detail::epoch_batches(data.size(), batch_size, rng);
    for (const auto& members : batches) {
      auto batch = assemble_two_view<T>(data, members, aug, rng);
      auto out = model.forward(batch.views);
      ad::Tensor<T> loss;
      if (task == FinetuneTask::kRecognition) {
        loss = supcon_loss(out.projection, batch.labels, static_cast<T>(cfg.tau));
        log.loss_supcon += static_cast<double>(loss.item());
      } else {
        const std::size_t N = members.size();
        std::vector<T> targets(2 * N);
        for (std::size_t i = 0; i < N; ++i)
          targets[i] = targets[N + i] = static_cast<T>(data.gender[members[i]]);
        loss = bce_soft(model.gender_logits(out.embedding), ad::Tensor<T>::from({2 * N, 1}, std::move(targets)));
        log.loss_appearance += static_cast<double>(loss.item());
      }
      detail::check_finite(static_cast<double>(loss.item()), "finetune", epoch);
      opt.zero_grad();
      loss.backward();
      opt.step(linear_decay_lr(static_cast<double>(step), total_steps, cfg.finetune_lr0), scales);
      ++step;
      log.loss_total += static_cast<double>(loss.item());
    }
    const double n = static_cast<double>(batches.size());
    log.loss_supcon /= n;
    log.loss_appearance /= n;
    log.loss_total /= n;
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return logs;
}

}  // namespace gaitformer
