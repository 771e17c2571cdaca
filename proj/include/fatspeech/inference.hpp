#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fatspeech/model.hpp"
#include "fatspeech/numerics/tensor.hpp"

namespace fatspeech {

// Next-token log-distribution for a prefix that starts with bos().
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual int bos() const = 0;
  virtual int eos() const = 0;
  virtual std::vector<double> log_probs(std::span<const int> prefix) const = 0;
};

// Decoder of a trained model over fixed encoder states. Pad, bos and mask
// are never proposed.
class ModelScorer : public StepScorer {
 public:
  ModelScorer(const FatModel& model, num::Tensor memory) : model_(model), memory_(std::move(memory)) {}
  std::size_t vocab_size() const override { return model_.config().vocab_size; }
  int bos() const override;
  int eos() const override;
  std::vector<double> log_probs(std::span<const int> prefix) const override;

 private:
  const FatModel& model_;
  num::Tensor memory_;
};

struct Hypothesis {
  std::vector<int> tokens;  // bos ... eos
  double log_prob = 0.0;
  double score = 0.0;  // log_prob / length_penalty
  bool finished = false;

  // Generated tokens, without bos and eos.
  std::vector<int> output() const;
};

// ((5 + length) / 6)^alpha, with length counting generated tokens including eos.
double length_penalty(std::size_t length, double alpha);

struct BeamOptions {
  std::size_t beam = 5;
  double alpha = 0.0;
  // Upper bound on generated tokens including eos; the last slot only admits eos.
  std::size_t max_len = 64;
};

// Keeps the `beam` best partial hypotheses by log-probability per step and
// parks those ending in eos. Returns the finished hypothesis with the best
// normalized score; ties prefer the lexicographically smaller sequence.
Hypothesis beam_search(const StepScorer& scorer, const BeamOptions& opts);
// Argmax decoding; ties go to the lower token id.
Hypothesis greedy_search(const StepScorer& scorer, std::size_t max_len);

// Cap on generated length for a source: twice the latent frames for speech,
// twice the tokens for text, at most 512.
std::size_t default_max_len(std::size_t source_length, bool speech);

Hypothesis translate_speech(const FatModel& model, const num::Tensor& speech, const BeamOptions& opts);
Hypothesis translate_text(const FatModel& model, std::span<const int> source, const BeamOptions& opts);

struct BleuResult {
  double bleu = 0.0;  // percent
  std::array<double, 4> precisions{};
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  double brevity_penalty = 1.0;
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
};

// Corpus BLEU-4 over whitespace tokens with clipped counts and brevity
// penalty. Orders with no hypothesis n-grams at all are left out of the mean.
// A zero match count gives 0 unless `smooth`, which replaces it by
// 1 / (2^k * total) for the k-th such order.
BleuResult corpus_bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references,
                       bool smooth = false);

}  // namespace fatspeech
