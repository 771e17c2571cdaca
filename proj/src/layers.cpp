#include "fatspeech/layers.hpp"

#include <cmath>

#include "fatspeech/masking.hpp"
#include "fatspeech/numerics/ops.hpp"

namespace fatspeech::nn {

using namespace fatspeech::num;

std::uint64_t ForwardContext::next_seed() { return mix_seed(seed, counter++); }

Tensor ForwardContext::maybe_dropout(const Tensor& x) {
  if (!training || dropout <= 0.0) return x;
  return num::dropout(x, dropout, next_seed());
}

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Shape shape, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor normal_init(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor sinusoidal_positions(std::size_t length, std::size_t dim) {
  std::vector<double> v(length * dim);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * freq;
      v[pos * dim + i] = std::sin(angle);
      if (i + 1 < dim) v[pos * dim + i + 1] = std::cos(angle);
    }
  }
  return Tensor({length, dim}, std::move(v));
}

Linear::Linear(std::size_t in, std::size_t out, std::mt19937_64& rng)
    : weight(xavier_uniform(in, out, {in, out}, rng)), bias(Tensor::zeros({out})) {}

Tensor Linear::operator()(const Tensor& x) const { return add_row(matmul(x, weight), bias); }

void Linear::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".bias", bias);
  fn(prefix + ".weight", weight);
}

LayerNorm::LayerNorm(std::size_t dim) : gamma(Tensor::full({dim}, 1.0)), beta(Tensor::zeros({dim})) {}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

void LayerNorm::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".beta", beta);
  fn(prefix + ".gamma", gamma);
}

MultiHeadAttention::MultiHeadAttention(std::size_t dim, std::size_t h, std::mt19937_64& rng)
    : heads(h), query(dim, dim, rng), key(dim, dim, rng), value(dim, dim, rng), output(dim, dim, rng) {
  if (h == 0 || dim % h != 0) throw ShapeError("attention", "model dim must be divisible by heads");
}

Tensor MultiHeadAttention::operator()(const Tensor& queries, const Tensor& keys, bool causal,
                                      std::vector<Tensor>* probs) const {
  const Tensor q = query(queries);
  const Tensor k = key(keys);
  const Tensor v = value(keys);
  const std::size_t dim = q.dim(1);
  const std::size_t head_dim = dim / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t b = h * head_dim, e = b + head_dim;
    const Tensor qh = heads == 1 ? q : slice(q, 1, b, e);
    const Tensor kh = heads == 1 ? k : slice(k, 1, b, e);
    const Tensor vh = heads == 1 ? v : slice(v, 1, b, e);
    const Tensor scores = scale(matmul_nt(qh, kh), inv_scale);
    const Tensor p = causal ? causal_softmax(scores) : softmax(scores);
    if (probs) probs->push_back(p.detach());
    outs.push_back(matmul(p, vh));
  }
  const Tensor joined = heads == 1 ? outs.front() : concat(outs, 1);
  return output(joined);
}

void MultiHeadAttention::visit(const std::string& prefix, const ParamVisitor& fn) {
  key.visit(prefix + ".key", fn);
  output.visit(prefix + ".output", fn);
  query.visit(prefix + ".query", fn);
  value.visit(prefix + ".value", fn);
}

FeedForward::FeedForward(std::size_t dim, std::size_t hidden, Activation act, std::mt19937_64& rng)
    : inner(dim, hidden, rng), outer(hidden, dim, rng), activation(act) {}

Tensor FeedForward::operator()(const Tensor& x, ForwardContext& ctx) const {
  Tensor h = inner(x);
  h = activation == Activation::kGelu ? gelu(h) : relu(h);
  return outer(ctx.maybe_dropout(h));
}

void FeedForward::visit(const std::string& prefix, const ParamVisitor& fn) {
  inner.visit(prefix + ".inner", fn);
  outer.visit(prefix + ".outer", fn);
}

EncoderLayer::EncoderLayer(std::size_t dim, std::size_t heads, std::size_t hidden, Activation act,
                           std::mt19937_64& rng)
    : attn_norm(dim), ffn_norm(dim), attn(dim, heads, rng), ffn(dim, hidden, act, rng) {}

Tensor EncoderLayer::operator()(const Tensor& x, ForwardContext& ctx, std::vector<Tensor>* probs) const {
  const Tensor n1 = attn_norm(x);
  Tensor y = add(x, ctx.maybe_dropout(attn(n1, n1, false, probs)));
  return add(y, ctx.maybe_dropout(ffn(ffn_norm(y), ctx)));
}

void EncoderLayer::visit(const std::string& prefix, const ParamVisitor& fn) {
  attn.visit(prefix + ".attn", fn);
  attn_norm.visit(prefix + ".attn_norm", fn);
  ffn.visit(prefix + ".ffn", fn);
  ffn_norm.visit(prefix + ".ffn_norm", fn);
}

DecoderLayer::DecoderLayer(std::size_t dim, std::size_t heads, std::size_t hidden, Activation act,
                           std::mt19937_64& rng)
    : self_norm(dim),
      cross_norm(dim),
      ffn_norm(dim),
      self_attn(dim, heads, rng),
      cross_attn(dim, heads, rng),
      ffn(dim, hidden, act, rng) {}

Tensor DecoderLayer::operator()(const Tensor& x, const Tensor& memory, ForwardContext& ctx) const {
  const Tensor n1 = self_norm(x);
  Tensor y = add(x, ctx.maybe_dropout(self_attn(n1, n1, true)));
  y = add(y, ctx.maybe_dropout(cross_attn(cross_norm(y), memory, false)));
  return add(y, ctx.maybe_dropout(ffn(ffn_norm(y), ctx)));
}

void DecoderLayer::visit(const std::string& prefix, const ParamVisitor& fn) {
  cross_attn.visit(prefix + ".cross_attn", fn);
  cross_norm.visit(prefix + ".cross_norm", fn);
  ffn.visit(prefix + ".ffn", fn);
  ffn_norm.visit(prefix + ".ffn_norm", fn);
  self_attn.visit(prefix + ".self_attn", fn);
  self_norm.visit(prefix + ".self_norm", fn);
}

EncoderStack::EncoderStack(std::size_t depth, std::size_t dim, std::size_t heads, std::size_t hidden,
                           Activation act, std::mt19937_64& rng)
    : norm(dim) {
  layers.reserve(depth);
  for (std::size_t i = 0; i < depth; ++i) layers.emplace_back(dim, heads, hidden, act, rng);
}

Tensor EncoderStack::operator()(const Tensor& x, ForwardContext& ctx, AttentionRecorder* rec) const {
  Tensor h = x;
  if (rec) rec->layers.assign(layers.size(), {});
  for (std::size_t i = 0; i < layers.size(); ++i) h = layers[i](h, ctx, rec ? &rec->layers[i] : nullptr);
  return norm(h);
}

void EncoderStack::visit(const std::string& prefix, const ParamVisitor& fn) {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + ".layers." + std::to_string(i), fn);
  norm.visit(prefix + ".norm", fn);
}

}  // namespace fatspeech::nn
