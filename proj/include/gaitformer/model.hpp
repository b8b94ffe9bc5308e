#pragma once

// GaitFormer: flattened skeletons -> linear token projection -> learnable
// positional embedding -> pre-norm transformer encoder -> temporal mean pool
// -> 256-d embedding, with a contrastive projection head and an appearance
// head on top of the embedding.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gaitformer/errors.hpp"
#include "gaitformer/skeleton.hpp"
#include "gaitformer/tensor.hpp"

namespace gaitformer {

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t d_model = 256;
  std::size_t num_heads = 8;
  std::size_t d_ff = 256;
  std::size_t d_proj = 128;
  std::size_t n_attributes = 42;
  std::size_t input_dim = kFlatDim;
  std::size_t max_T = 48;
  double dropout = 0.0;

  static ModelConfig sm() { return with_layers(4); }
  static ModelConfig md() { return with_layers(8); }
  static ModelConfig xl() { return with_layers(12); }

  static ModelConfig with_layers(std::size_t layers) {
    ModelConfig c;
    c.num_layers = layers;
    return c;
  }

  static ModelConfig named(const std::string& size) {
    if (size == "SM" || size == "sm") return sm();
    if (size == "MD" || size == "md") return md();
    if (size == "XL" || size == "xl") return xl();
    throw ConfigError("model size must be one of SM, MD, XL, got '" + size + "'");
  }

  void validate() const {
    if (input_dim != kFlatDim) throw ConfigError("model.input_dim must be 54");
    if (num_heads == 0 || d_model % num_heads != 0)
      throw ConfigError("model.d_model must be divisible by model.num_heads");
    if (num_layers == 0 || d_ff == 0 || d_proj == 0 || max_T == 0)
      throw ConfigError("model dimensions must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must lie in [0,1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Trainable parameters in one encoder block (keys carry no bias).
inline std::size_t encoder_layer_param_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  return 2 * d                      // ln1
         + 3 * d * d + 2 * d         // q (w,b), k (w), v (w,b)
         + d * d + d                 // output projection
         + 2 * d                     // ln2
         + d * c.d_ff + c.d_ff       // feed-forward in
         + c.d_ff * d + d;           // feed-forward out
}

inline std::size_t param_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  return c.input_dim * d + d           // token projection
         + c.max_T * d                 // positional embedding
         + c.num_layers * encoder_layer_param_count(c)
         + 2 * d                       // final layer norm
         + d * d + d                   // embedding linear
         + d * c.d_proj + c.d_proj     // contrastive head
         + d * c.n_attributes + c.n_attributes;  // appearance head
}

// LLRD depth group of a parameter: 0 holds the token projection and
// positional embedding, 1..L the encoder layers bottom to top, L+1 the
// layers after the encoder.
struct NamedParam {
  std::string name;
  std::size_t group = 0;
};

template <typename T>
struct EncoderLayer {
  ad::Tensor<T> ln1_g, ln1_b;
  ad::Tensor<T> wq, bq, wk, wv, bv, wo, bo;
  ad::Tensor<T> ln2_g, ln2_b;
  ad::Tensor<T> w1, b1, w2, b2;
};

template <typename T>
class GaitFormer {
 public:
  using Tensor = ad::Tensor<T>;
  using Activation = std::function<Tensor(const Tensor&)>;

  struct Output {
    Tensor embedding;    // [B, d_model]
    Tensor projection;   // [B, d_proj]
    Tensor attr_logits;  // [B, n_attributes]
  };

  GaitFormer() = default;

  explicit GaitFormer(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg_.d_model;
    input_w = init({cfg_.input_dim, d}, rng);
    input_b = zeros({d});
    pos_embedding = init({cfg_.max_T, d}, rng);
    layers.resize(cfg_.num_layers);
    for (auto& l : layers) {
      l.ln1_g = ones({d});
      l.ln1_b = zeros({d});
      l.wq = init({d, d}, rng);
      l.bq = zeros({d});
      l.wk = init({d, d}, rng);
      l.wv = init({d, d}, rng);
      l.bv = zeros({d});
      l.wo = init({d, d}, rng);
      l.bo = zeros({d});
      l.ln2_g = ones({d});
      l.ln2_b = zeros({d});
      l.w1 = init({d, cfg_.d_ff}, rng);
      l.b1 = zeros({cfg_.d_ff});
      l.w2 = init({cfg_.d_ff, d}, rng);
      l.b2 = zeros({d});
    }
    final_ln_g = ones({d});
    final_ln_b = zeros({d});
    out_w = init({d, d}, rng);
    out_b = zeros({d});
    proj_w = init({d, cfg_.d_proj}, rng);
    proj_b = zeros({cfg_.d_proj});
    attr_w = init({d, cfg_.n_attributes}, rng);
    attr_b = zeros({cfg_.n_attributes});
  }

  const ModelConfig& config() const { return cfg_; }

  // batch: [B, T, 54] with T <= max_T.
  Output forward(const Tensor& batch, std::mt19937_64* dropout_rng = nullptr) const {
    if (batch.rank() != 3 || batch.dim(2) != cfg_.input_dim)
      throw ShapeError("forward: expected [B, T, 54], got " + ad::shape_str(batch.shape()));
    const std::size_t B = batch.dim(0), L = batch.dim(1), d = cfg_.d_model;
    if (B == 0) throw ShapeError("forward: empty batch");
    if (L == 0 || L > cfg_.max_T)
      throw ShapeError("forward: period length " + std::to_string(L) + " exceeds max_T " +
                       std::to_string(cfg_.max_T));
    const std::size_t H = cfg_.num_heads, dh = d / H;
    const T attn_scale = T(1) / std::sqrt(static_cast<T>(dh));

    auto drop = [&](const Tensor& x) {
      if (cfg_.dropout == 0.0 || dropout_rng == nullptr) return x;
      return ad::dropout(x, cfg_.dropout, *dropout_rng);
    };
    auto heads = [&](const Tensor& x2d) {
      return ad::reshape(ad::permute(ad::reshape(x2d, {B, L, H, dh}), {0, 2, 1, 3}), {B * H, L, dh});
    };

    Tensor tokens = ad::linear(ad::reshape(batch, {B * L, cfg_.input_dim}), input_w, input_b);
    Tensor h = drop(ad::embedding_add(ad::reshape(tokens, {B, L, d}), pos_embedding));
    const Activation& act = activation ? activation : default_activation();

    for (const auto& l : layers) {
      Tensor a = ad::reshape(ad::layer_norm(h, l.ln1_g, l.ln1_b), {B * L, d});
      Tensor q = heads(ad::linear(a, l.wq, l.bq));
      Tensor k = heads(ad::matmul(a, l.wk));
      Tensor v = heads(ad::linear(a, l.wv, l.bv));
      Tensor attn = ad::softmax_axis(ad::scale(ad::matmul(q, ad::transpose(k)), attn_scale), 2);
      Tensor ctx = ad::matmul(attn, v);
      ctx = ad::reshape(ad::permute(ad::reshape(ctx, {B, H, L, dh}), {0, 2, 1, 3}), {B * L, d});
      h = ad::add(h, drop(ad::reshape(ad::linear(ctx, l.wo, l.bo), {B, L, d})));

      Tensor f = ad::reshape(ad::layer_norm(h, l.ln2_g, l.ln2_b), {B * L, d});
      f = ad::linear(act(ad::linear(f, l.w1, l.b1)), l.w2, l.b2);
      h = ad::add(h, drop(ad::reshape(f, {B, L, d})));
    }

    Tensor pooled = ad::mean_axis(ad::layer_norm(h, final_ln_g, final_ln_b), 1);
    Output out;
    out.embedding = ad::linear(pooled, out_w, out_b);
    out.projection = ad::linear(out.embedding, proj_w, proj_b);
    out.attr_logits = ad::linear(out.embedding, attr_w, attr_b);
    return out;
  }

  // Single-logit head used for gender fine-tuning.
  void add_gender_head(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    gender_w = init({cfg_.d_model, 1}, rng);
    gender_b = zeros({1});
  }
  bool has_gender_head() const { return gender_w.defined(); }
  Tensor gender_logits(const Tensor& embedding) const {
    if (!has_gender_head()) throw ShapeError("gender_logits: model has no gender head");
    return ad::linear(embedding, gender_w, gender_b);
  }

  // Every trainable tensor with its checkpoint name and LLRD depth group.
  std::vector<std::pair<NamedParam, Tensor>> named_parameters() const {
    std::vector<std::pair<NamedParam, Tensor>> out;
    const std::size_t top = cfg_.num_layers + 1;
    auto push = [&](std::string name, std::size_t group, const Tensor& t) {
      out.push_back({NamedParam{std::move(name), group}, t});
    };
    push("input.weight", 0, input_w);
    push("input.bias", 0, input_b);
    push("pos_embedding", 0, pos_embedding);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      const std::size_t g = i + 1;
      push(p + "ln1.gamma", g, l.ln1_g);
      push(p + "ln1.beta", g, l.ln1_b);
      push(p + "attn.q.weight", g, l.wq);
      push(p + "attn.q.bias", g, l.bq);
      push(p + "attn.k.weight", g, l.wk);
      push(p + "attn.v.weight", g, l.wv);
      push(p + "attn.v.bias", g, l.bv);
      push(p + "attn.out.weight", g, l.wo);
      push(p + "attn.out.bias", g, l.bo);
      push(p + "ln2.gamma", g, l.ln2_g);
      push(p + "ln2.beta", g, l.ln2_b);
      push(p + "ff.in.weight", g, l.w1);
      push(p + "ff.in.bias", g, l.b1);
      push(p + "ff.out.weight", g, l.w2);
      push(p + "ff.out.bias", g, l.b2);
    }
    push("final_ln.gamma", top, final_ln_g);
    push("final_ln.beta", top, final_ln_b);
    push("embedding.weight", top, out_w);
    push("embedding.bias", top, out_b);
    push("projection.weight", top, proj_w);
    push("projection.bias", top, proj_b);
    push("appearance.weight", top, attr_w);
    push("appearance.bias", top, attr_b);
    if (has_gender_head()) {
      push("gender.weight", top, gender_w);
      push("gender.bias", top, gender_b);
    }
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [meta, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (auto& t : parameters()) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& t : parameters()) t.zero_grad();
  }

  // Feed-forward activation; GELU when unset.
  Activation activation;

  Tensor input_w, input_b, pos_embedding;
  std::vector<EncoderLayer<T>> layers;
  Tensor final_ln_g, final_ln_b;
  Tensor out_w, out_b, proj_w, proj_b, attr_w, attr_b;
  Tensor gender_w, gender_b;

 private:
  static const Activation& default_activation() {
    static const Activation gelu = [](const Tensor& x) { return ad::gelu(x); };
    return gelu;
  }

  // Normal(0, 0.02) truncated at two standard deviations.
  static Tensor init(ad::Shape shape, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 0.02);
    std::vector<T> v(ad::numel(shape));
    for (auto& x : v) {
      double s;
      do s = n(rng);
      while (std::abs(s) > 0.04);
      x = static_cast<T>(s);
    }
    return Tensor::from(std::move(shape), std::move(v), true);
  }
  static Tensor zeros(ad::Shape shape) { return Tensor::zeros(std::move(shape), true); }
  static Tensor ones(ad::Shape shape) { return Tensor::full(std::move(shape), T(1), true); }

  ModelConfig cfg_;
};

// ---------------------------------------------------------------------------
// Batching and embedding extraction

// Stacks equal-length sequences into a [B, T, 54] tensor.
template <typename T>
ad::Tensor<T> make_batch(std::span<const SkeletonSequence> seqs) {
  if (seqs.empty()) throw ShapeError("make_batch: no sequences");
  const std::size_t L = seqs[0].size();
  std::vector<T> data;
  data.reserve(seqs.size() * L * kFlatDim);
  for (const auto& s : seqs) {
    if (s.size() != L) throw ShapeError("make_batch: sequences differ in length");
    for (const auto& f : s.frames)
      for (double v : flatten(f)) data.push_back(static_cast<T>(v));
  }
  return ad::Tensor<T>::from({seqs.size(), L, kFlatDim}, std::move(data));
}

inline std::vector<double> l2_normalized(std::span<const double> v) {
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  const double n = std::sqrt(n2);
  std::vector<double> out(v.begin(), v.end());
  if (n >= ad::kRowNormFloor)
    for (auto& x : out) x /= n;
  return out;
}

struct SequenceOutputs {
  std::vector<std::vector<double>> embeddings;   // unit norm
  std::vector<std::vector<double>> attributes;   // sigmoid probabilities
  std::vector<double> gender;                    // sigmoid of the gender head, if present
};

// Centre-crops each sequence to `period` frames and runs the model in
// inference mode.
template <typename T>
SequenceOutputs infer(const GaitFormer<T>& model, std::span<const SkeletonSequence> seqs, std::size_t period = 48,
                      std::size_t batch_size = 64) {
  ad::NoGradGuard no_grad;
  SequenceOutputs out;
  for (std::size_t start = 0; start < seqs.size(); start += batch_size) {
    const std::size_t end = std::min(seqs.size(), start + batch_size);
    std::vector<SkeletonSequence> crops;
    for (std::size_t i = start; i < end; ++i) crops.push_back(center_crop(seqs[i], period));
    auto res = model.forward(make_batch<T>(crops));
    const std::size_t D = res.embedding.dim(1), A = res.attr_logits.dim(1);
    ad::Tensor<T> gender;
    if (model.has_gender_head()) gender = model.gender_logits(res.embedding);
    for (std::size_t b = 0; b < crops.size(); ++b) {
      std::vector<double> e(D);
      for (std::size_t j = 0; j < D; ++j) e[j] = static_cast<double>(res.embedding.data()[b * D + j]);
      out.embeddings.push_back(l2_normalized(e));
      std::vector<double> a(A);
      for (std::size_t j = 0; j < A; ++j) a[j] = static_cast<double>(ad::sigmoid_value(res.attr_logits.data()[b * A + j]));
      out.attributes.push_back(std::move(a));
      if (gender.defined()) out.gender.push_back(static_cast<double>(ad::sigmoid_value(gender.data()[b])));
    }
  }
  return out;
}

// Unit-norm 256-d identity embedding of one sequence.
template <typename T>
std::vector<double> embed(const GaitFormer<T>& model, const SkeletonSequence& seq, std::size_t period = 48) {
  std::span<const SkeletonSequence> one(&seq, 1);
  return infer(model, one, period).embeddings.front();
}

}  // namespace gaitformer
