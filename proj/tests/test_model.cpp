#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "gaitformer/checkpoint.hpp"
#include "gaitformer/model.hpp"
#include "gaitformer/train.hpp"

using namespace gaitformer;
using Tensor = ad::Tensor<double>;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.num_layers = 2;
  c.d_model = 32;
  c.num_heads = 2;
  c.d_ff = 32;
  c.d_proj = 16;
  c.max_T = 8;
  return c;
}

Tensor random_batch(std::size_t B, std::size_t L, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(B * L * kFlatDim);
  for (auto& x : v) x = n(rng);
  return Tensor::from({B, L, kFlatDim}, std::move(v));
}

SkeletonSequence random_sequence(std::size_t L, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  SkeletonSequence s;
  s.frames.resize(L);
  for (auto& f : s.frames)
    for (auto& j : f.joints) j = {n(rng), n(rng), 1.0};
  return s;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "gaitformer_model_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Model, OutputShapes) {
  GaitFormer<double> model(ModelConfig::sm(), 1);
  auto out = model.forward(random_batch(2, 48, 3));
  EXPECT_EQ(out.embedding.shape(), (ad::Shape{2, 256}));
  EXPECT_EQ(out.projection.shape(), (ad::Shape{2, 128}));
  EXPECT_EQ(out.attr_logits.shape(), (ad::Shape{2, 42}));
}

TEST(Model, RejectsWrongInputShape) {
  GaitFormer<double> model(tiny_config(), 1);
  EXPECT_THROW(model.forward(Tensor::zeros({2, 8, 50})), ShapeError);
  EXPECT_THROW(model.forward(Tensor::zeros({2, 9, kFlatDim})), ShapeError);
}

TEST(Model, ConfigValidation) {
  auto c = tiny_config();
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(ModelConfig::named("XXL"), ConfigError);
  EXPECT_EQ(ModelConfig::named("MD").num_layers, 8u);
}

TEST(Model, DeterministicForSeed) {
  GaitFormer<double> a(tiny_config(), 7), b(tiny_config(), 7), c(tiny_config(), 8);
  auto x = random_batch(3, 8, 1);
  auto ea = a.forward(x).embedding, eb = b.forward(x).embedding, ec = c.forward(x).embedding;
  for (std::size_t i = 0; i < ea.size(); ++i) EXPECT_EQ(ea.data()[i], eb.data()[i]);
  bool differs = false;
  for (std::size_t i = 0; i < ea.size(); ++i) differs |= ea.data()[i] != ec.data()[i];
  EXPECT_TRUE(differs);
}

TEST(Model, BatchElementsAreIndependent) {
  GaitFormer<double> model(tiny_config(), 2);
  auto x = random_batch(4, 8, 5);
  auto full = model.forward(x).embedding;
  for (std::size_t b = 0; b < 4; ++b) {
    std::vector<double> one(x.data().begin() + b * 8 * kFlatDim, x.data().begin() + (b + 1) * 8 * kFlatDim);
    auto single = model.forward(Tensor::from({1, 8, kFlatDim}, one)).embedding;
    for (std::size_t j = 0; j < 32; ++j) EXPECT_NEAR(single.data()[j], full.data()[b * 32 + j], 1e-12);
  }
}

TEST(Model, FramePermutationInvariantWithoutPositions) {
  GaitFormer<double> model(tiny_config(), 4);
  for (auto& v : model.pos_embedding.mutable_data()) v = 0.0;
  auto x = random_batch(1, 8, 9);
  std::vector<std::size_t> perm{3, 7, 0, 5, 1, 6, 2, 4};
  std::vector<double> shuffled(x.size());
  for (std::size_t t = 0; t < 8; ++t)
    std::copy_n(x.data().begin() + perm[t] * kFlatDim, kFlatDim, shuffled.begin() + t * kFlatDim);
  auto a = model.forward(x).embedding;
  auto b = model.forward(Tensor::from({1, 8, kFlatDim}, shuffled)).embedding;
  for (std::size_t j = 0; j < a.size(); ++j) EXPECT_NEAR(a.data()[j], b.data()[j], 1e-9);
}

TEST(Model, PositionsBreakPermutationInvariance) {
  GaitFormer<double> model(tiny_config(), 4);
  auto x = random_batch(1, 8, 9);
  std::vector<double> reversed(x.size());
  for (std::size_t t = 0; t < 8; ++t)
    std::copy_n(x.data().begin() + (7 - t) * kFlatDim, kFlatDim, reversed.begin() + t * kFlatDim);
  auto a = model.forward(x).embedding;
  auto b = model.forward(Tensor::from({1, 8, kFlatDim}, reversed)).embedding;
  double diff = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) diff = std::max(diff, std::abs(a.data()[j] - b.data()[j]));
  EXPECT_GT(diff, 1e-6);
}

TEST(Model, ParamCountMatchesTensors) {
  for (auto cfg : {tiny_config(), ModelConfig::sm(), ModelConfig::md(), ModelConfig::xl()}) {
    GaitFormer<double> model(cfg, 0);
    EXPECT_EQ(param_count(cfg), model.trainable_count());
  }
}

TEST(Model, ParamCountHandComputedTiny) {
  // d=32, ff=32, 2 layers, proj 16, 42 attributes, T=8:
  // input 54*32+32, pos 8*32, per layer 2*32 + 4*32*32 + 3*32 + 2*32 + 32*32+32 + 32*32+32,
  // final LN 64, embedding 32*32+32, projection 32*16+16, appearance 32*42+42.
  const std::size_t layer = 64 + 4096 + 96 + 64 + 1056 + 1056;
  const std::size_t expected = 1760 + 256 + 2 * layer + 64 + 1056 + 528 + 1386;
  EXPECT_EQ(param_count(tiny_config()), expected);
}

TEST(Model, ParamCountOrderingAndLayerAdditivity) {
  const auto sm = param_count(ModelConfig::sm()), md = param_count(ModelConfig::md()),
             xl = param_count(ModelConfig::xl());
  EXPECT_LT(sm, md);
  EXPECT_LT(md, xl);
  EXPECT_EQ(md - sm, xl - md);
  EXPECT_EQ((md - sm) / 4, encoder_layer_param_count(ModelConfig::sm()));
}

TEST(Model, GenderHeadAddsParameters) {
  GaitFormer<double> model(tiny_config(), 0);
  const auto before = model.trainable_count();
  model.add_gender_head(1);
  EXPECT_EQ(model.trainable_count(), before + 33);
  auto out = model.forward(random_batch(2, 8, 0));
  EXPECT_EQ(model.gender_logits(out.embedding).shape(), (ad::Shape{2, 1}));
}

TEST(Model, InitStaysWithinTwoSigma) {
  GaitFormer<double> model(ModelConfig::sm(), 11);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (double v : model.layers[0].w1.data()) {
    EXPECT_LE(std::abs(v), 0.04);
    sum += v;
    sq += v * v;
    ++n;
  }
  const double mean = sum / static_cast<double>(n);
  const double sd = std::sqrt(sq / static_cast<double>(n) - mean * mean);
  // A N(0, 0.02) truncated at 2 sigma has sd 0.02 * 0.8796.
  EXPECT_NEAR(sd, 0.02 * 0.8796, 0.0005);
}

TEST(Model, TinyModelGradCheck) {
  auto cfg = tiny_config();
  GaitFormer<double> model(cfg, 3);
  // Enlarged weights.
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& t : model.parameters())
    for (auto& v : t.mutable_data()) v += n(rng);
  auto x = random_batch(4, 8, 21);
  std::vector<std::size_t> labels{0, 1, 0, 1};
  std::mt19937_64 arng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> attrs(4 * 42);
  for (auto& a : attrs) a = u(arng);
  auto targets = Tensor::from({4, 42}, attrs);
  auto loss = [&] {
    auto out = model.forward(x);
    return combined_loss(supcon_loss(out.projection, labels, 0.5), bce_soft(out.attr_logits, targets), 0.5);
  };
  std::vector<std::pair<std::string, Tensor>> params;
  for (auto& [meta, t] : model.named_parameters()) params.emplace_back(meta.name, t);
  auto res = ad::grad_check(loss, params);
  EXPECT_LT(res.max_relative_error, 1e-4) << res.worst_tensor << "[" << res.worst_index << "] analytic "
                                          << res.worst_analytic << " numeric " << res.worst_numeric;
}

TEST(Model, EmbedHasUnitNorm) {
  GaitFormer<double> model(tiny_config(), 0);
  auto e = embed(model, random_sequence(20, 4), 8);
  ASSERT_EQ(e.size(), 32u);
  double n2 = 0.0;
  for (double v : e) n2 += v * v;
  EXPECT_NEAR(std::sqrt(n2), 1.0, 1e-12);
}

TEST(Model, EmbedRejectsShortSequence) {
  GaitFormer<double> model(tiny_config(), 0);
  EXPECT_THROW(embed(model, random_sequence(5, 4), 8), SequenceTooShort);
}

TEST(Model, InferDoesNotRecordGraph) {
  GaitFormer<double> model(tiny_config(), 0);
  std::vector<SkeletonSequence> seqs{random_sequence(8, 1), random_sequence(12, 2)};
  auto out = infer(model, seqs, 8);
  EXPECT_EQ(out.embeddings.size(), 2u);
  EXPECT_EQ(out.attributes[1].size(), 42u);
  for (auto& t : model.parameters()) EXPECT_FALSE(t.has_grad());
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
  GaitFormer<double> model(tiny_config(), 12);
  model.add_gender_head(3);
  const auto path = temp_path("roundtrip.ckpt");
  save_model(model, path, {{"regime", "multitask"}});
  auto loaded = load_model<double>(path);
  EXPECT_TRUE(loaded.has_gender_head());
  auto x = random_batch(2, 8, 8);
  auto a = model.forward(x), b = loaded.forward(x);
  for (std::size_t i = 0; i < a.embedding.size(); ++i) EXPECT_EQ(a.embedding.data()[i], b.embedding.data()[i]);
  EXPECT_EQ(load_archive(path).meta.at("regime"), "multitask");
}

TEST(Checkpoint, IncompatibleShapeIsReported) {
  GaitFormer<double> model(tiny_config(), 12);
  const auto path = temp_path("small.ckpt");
  save_model(model, path);
  auto other_cfg = tiny_config();
  other_cfg.d_ff = 64;
  GaitFormer<double> other(other_cfg, 0);
  try {
    load_parameters(other, load_archive(path));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("incompatible checkpoint"), std::string::npos);
    EXPECT_NE(msg.find("ff.in.weight"), std::string::npos);
  }
}

TEST(Checkpoint, TruncatedPayloadIsReported) {
  GaitFormer<double> model(tiny_config(), 12);
  const auto path = temp_path("trunc.ckpt");
  save_model(model, path);
  std::filesystem::resize_file(path.string() + ".bin", 100);
  EXPECT_THROW(load_model<double>(path), DataError);
}
