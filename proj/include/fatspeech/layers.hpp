#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fatspeech/numerics/tensor.hpp"

namespace fatspeech::nn {

using num::Tensor;
using ParamVisitor = std::function<void(const std::string& name, Tensor& param)>;

enum class Activation { kRelu, kGelu };

// Per-forward options. Dropout seeds are drawn from a counter so that a
// forward pass is reproducible from (seed, call order).
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  std::uint64_t next_seed();
  Tensor maybe_dropout(const Tensor& x);
};

// Attention probabilities captured per layer, per head (query x key).
struct AttentionRecorder {
  std::vector<std::vector<Tensor>> layers;
};

// Initialization helpers; all draws come from one engine in a fixed order.
Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, num::Shape shape, std::mt19937_64& rng);
Tensor normal_init(num::Shape shape, double stddev, std::mt19937_64& rng);

Tensor sinusoidal_positions(std::size_t length, std::size_t dim);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);
  Tensor operator()(const Tensor& x) const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct MultiHeadAttention {
  std::size_t heads = 1;
  Linear query, key, value, output;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t heads, std::mt19937_64& rng);
  // causal: query i sees keys j <= i. probs, when given, receives one
  // [queries, keys] tensor per head.
  Tensor operator()(const Tensor& queries, const Tensor& keys, bool causal,
                    std::vector<Tensor>* probs = nullptr) const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct FeedForward {
  Linear inner, outer;
  Activation activation = Activation::kRelu;

  FeedForward() = default;
  FeedForward(std::size_t dim, std::size_t hidden, Activation act, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x, ForwardContext& ctx) const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

// Pre-norm transformer encoder block.
struct EncoderLayer {
  LayerNorm attn_norm, ffn_norm;
  MultiHeadAttention attn;
  FeedForward ffn;

  EncoderLayer() = default;
  EncoderLayer(std::size_t dim, std::size_t heads, std::size_t hidden, Activation act,
               std::mt19937_64& rng);
  Tensor operator()(const Tensor& x, ForwardContext& ctx, std::vector<Tensor>* probs = nullptr) const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

// Pre-norm decoder block: causal self-attention, cross-attention, FFN.
struct DecoderLayer {
  LayerNorm self_norm, cross_norm, ffn_norm;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ffn;

  DecoderLayer() = default;
  DecoderLayer(std::size_t dim, std::size_t heads, std::size_t hidden, Activation act,
               std::mt19937_64& rng);
  Tensor operator()(const Tensor& x, const Tensor& memory, ForwardContext& ctx) const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

// Stack of encoder layers followed by a final LayerNorm.
struct EncoderStack {
  std::vector<EncoderLayer> layers;
  LayerNorm norm;

  EncoderStack() = default;
  EncoderStack(std::size_t depth, std::size_t dim, std::size_t heads, std::size_t hidden,
               Activation act, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x, ForwardContext& ctx, AttentionRecorder* rec = nullptr) const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

}  // namespace fatspeech::nn
