#pragma once

// End-to-end gradient check of a tiny GaitFormer under the combined loss.

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gaitformer/model.hpp"
#include "gaitformer/tensor.hpp"
#include "gaitformer/train.hpp"

namespace gaitformer {

inline ModelConfig tiny_gradcheck_config() {
  ModelConfig c;
  c.num_layers = 2;
  c.d_model = 32;
  c.num_heads = 2;
  c.d_ff = 32;
  c.d_proj = 16;
  c.max_T = 8;
  return c;
}

struct TinyGradCheckOptions {
  std::size_t batch = 4;
  std::size_t period = 8;
  double tau = 0.5;
  double lambda = 0.5;
  std::uint64_t seed = 3;
  ad::GradCheckOptions check;
};

// B=4, T=8 batch with two identities; weights perturbed by N(0, 0.3).
inline ad::GradCheckResult tiny_model_gradcheck(const TinyGradCheckOptions& opt = {},
                                                GaitFormer<double>::Activation activation = {}) {
  using Tensor = ad::Tensor<double>;
  GaitFormer<double> model(tiny_gradcheck_config(), opt.seed);
  model.activation = std::move(activation);
  std::mt19937_64 rng(opt.seed * 7919 + 17);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& t : model.parameters())
    for (auto& v : t.mutable_data()) v += n(rng);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> xs(opt.batch * opt.period * kFlatDim);
  for (auto& v : xs) v = unit(rng);
  const auto x = Tensor::from({opt.batch, opt.period, kFlatDim}, std::move(xs));
  std::vector<std::size_t> labels(opt.batch);
  for (std::size_t i = 0; i < opt.batch; ++i) labels[i] = i % 2;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> attrs(opt.batch * kNumAttributes);
  for (auto& a : attrs) a = u(rng);
  const auto targets = Tensor::from({opt.batch, kNumAttributes}, std::move(attrs));
  auto loss = [&] {
    auto out = model.forward(x);
    return combined_loss(supcon_loss(out.projection, labels, opt.tau), bce_soft(out.attr_logits, targets), opt.lambda);
  };
  std::vector<std::pair<std::string, Tensor>> params;
  for (auto& [meta, t] : model.named_parameters()) params.emplace_back(meta.name, t);
  return ad::grad_check(loss, params, opt.check);
}

// GELU forward with a backward rule off by a factor of 1.5.
template <typename T>
ad::Tensor<T> gelu_with_corrupted_backward(const ad::Tensor<T>& x) {
  return ad::unary(x, ad::gelu_value<T>, [](T v) { return T(1.5) * ad::gelu_derivative<T>(v); }, "gelu_corrupt");
}

}  // namespace gaitformer
