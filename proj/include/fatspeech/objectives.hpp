#pragma once

#include <cstdint>
#include <fstream>
#include <span>
#include <string>

#include "fatspeech/corpus.hpp"
#include "fatspeech/masking.hpp"
#include "fatspeech/model.hpp"
#include "fatspeech/numerics/tensor.hpp"

namespace fatspeech {

struct CtcResult {
  num::Tensor loss;  // scalar negative log-likelihood; +inf when infeasible
  bool feasible = true;
};

// Frames needed to emit `labels`: one per label plus one blank between repeats.
std::size_t ctc_min_frames(std::span<const int> labels);

// Forward-backward over the blank-interleaved lattice in log space.
// log_probs: [T, C] row-wise log-probabilities. Infeasible labels yield +inf
// with feasible = false and no gradient.
CtcResult ctc_loss(const num::Tensor& log_probs, std::span<const int> labels, int blank);

// Squared error summed over features, averaged over masked frames.
num::Tensor loss_speech_recon(const num::Tensor& target, const num::Tensor& predicted, const MaskPlan& mask);
// Mean cross-entropy over masked positions; 0 if none.
num::Tensor loss_masked_tokens(const num::Tensor& logits, std::span<const int> targets, const MaskPlan& mask);

struct LossWeights {
  double st = 1.0;
  double mt = 1.0;
  double mlm = 1.0;
  double ctc = 0.3;
};

struct LossBreakdown {
  double speech = 0.0;  // masked speech reconstruction
  double source = 0.0;  // masked transcription tokens
  double target = 0.0;  // masked translation tokens
  double st = 0.0;
  double mt = 0.0;
  double ctc = 0.0;
  LossWeights weights;
  double total = 0.0;
  num::Tensor total_tensor;  // differentiable total
  std::size_t ctc_infeasible = 0;

  double mlm() const { return speech + source + target; }
  // Weighted sum recomputed from the scalar terms.
  double recomputed_total() const;
};

// Identifies the masking draw for one step: every example's plans derive
// from (seed, step, example uid, modality).
struct MaskSeed {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t for_example(std::uint64_t uid, unsigned modality) const;
};

// Masks every present modality, encodes the concatenation and sums the
// reconstruction terms pooled over the batch.
LossBreakdown loss_fat_mlm(const FatModel& model, const Batch& batch, const MaskSeed& seed,
                           nn::ForwardContext& ctx);

struct CtcTerm {
  num::Tensor loss;
  std::size_t feasible = 0;
  std::size_t infeasible = 0;
};

// Teacher-forced token-mean NLL of the translation given the speech (ST) or
// transcription (MT) source. No masking. With `ctc` and a speech source that
// has transcriptions, also fills the mean CTC loss over feasible examples.
num::Tensor loss_seq2seq(const FatModel& model, const Batch& batch, Objective objective, nn::ForwardContext& ctx,
                         double label_smoothing = 0.0, CtcTerm* ctc = nullptr);

// Weighted combination of whichever sub-batches are present.
LossBreakdown loss_fat_st(const FatModel& model, const Batch* st, const Batch* mt, const Batch* mlm,
                          const LossWeights& weights, const MaskSeed& seed, nn::ForwardContext& ctx,
                          double label_smoothing = 0.0);

// Appends one CSV row per logged step.
class LossLog {
 public:
  explicit LossLog(const std::string& path, bool append = false);
  void write(std::uint64_t step, const std::string& objective, const std::string& flavor, const LossBreakdown& b);

 private:
  std::ofstream out_;
};

}  // namespace fatspeech
