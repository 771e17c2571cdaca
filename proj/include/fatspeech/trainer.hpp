#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fatspeech/config.hpp"
#include "fatspeech/corpus.hpp"
#include "fatspeech/model.hpp"
#include "fatspeech/objectives.hpp"

namespace fatspeech {

enum class TrainMode { kPretrain, kFinetune };
const char* train_mode_name(TrainMode m);

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t warmup = 4000;
  double lr_factor = 1.0;  // multiplies d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double weight_decay = 0.0;
  double clip = 5.0;
  std::uint64_t seed = 1;
  std::size_t checkpoint_interval = 100;
  std::size_t average_last = 5;
  LossWeights weights;
  double label_smoothing = 0.0;
  bool proportional = false;
  BucketConfig bucket;

  void validate() const;
  // Keys train.*, loss.* and data.*.
  Config to_config() const;
  static TrainConfig from_config(const Config& c);
};

// Learning rate at a 1-based step.
double inverse_sqrt_lr(std::size_t step, std::size_t d_model, std::size_t warmup, double factor);

// Scales gradients in place so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(const ParameterMap& params, double max_norm);
double grad_norm(const ParameterMap& params);

// Adaptive moments with bias correction. Parameters that never received a
// gradient are left untouched. Values and moments are kept float-representable.
class Adam {
 public:
  Adam(const ParameterMap& params, double beta1, double beta2, double eps, double weight_decay = 0.0);
  void step(double lr);
  std::uint64_t steps_taken() const { return t_; }

  // Moments as "m.<name>" / "v.<name>".
  ParameterMap state() const;
  void load_state(const ParameterMap& state, std::uint64_t steps_taken);

 private:
  ParameterMap params_;
  std::map<std::string, std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::uint64_t t_ = 0;
};

struct StepReport {
  std::uint64_t step = 0;
  double lr = 0.0;
  double grad_norm = 0.0;
  LossBreakdown loss;
  std::string objective;
  std::string flavor;
};

struct TrainResult {
  std::vector<StepReport> history;
  std::vector<std::string> checkpoints;  // paths written, in order
  std::string final_checkpoint;          // averaged
};

// Drives one optimization run. Each pretraining step draws one batch; each
// fine-tuning step draws one batch per stream and combines them.
class Trainer {
 public:
  Trainer(FatModel& model, const TrainConfig& config, TrainMode mode, BatchSchedule schedule,
          std::uint64_t vocab_hash);

  // Restores parameters, optimizer moments and the schedule position.
  void resume(const ModelCheckpoint& ck);
  std::uint64_t step() const { return step_; }

  StepReport train_step();
  // Runs to config.steps. With a non-empty out_dir, writes checkpoint_<step>.fatc
  // every interval (and at the last step), the loss CSV train_log.csv, and
  // final.fatc averaging the last `average_last` checkpoints.
  TrainResult run(const std::string& out_dir, const std::function<void(const StepReport&)>& on_step = {});

  ModelCheckpoint checkpoint() const;

  // Example-weighted mean loss without dropout. Pretraining uses the masked
  // reconstruction loss with a fixed masking draw; fine-tuning the ST loss.
  double dev_loss(const std::vector<Batch>& batches) const;

 private:
  FatModel& model_;
  TrainConfig config_;
  TrainMode mode_;
  BatchSchedule schedule_;
  std::uint64_t vocab_hash_;
  Adam optimizer_;
  std::uint64_t step_ = 0;
};

struct TokenAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double value() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

// Argmax agreement of the teacher-forced decoder with translation+eos, from
// speech when present, otherwise from the transcription.
TokenAccuracy teacher_forced_accuracy(const FatModel& model, const std::vector<Batch>& batches);

// Loads manifests in order, renumbering example uids so they stay unique.
std::vector<MultimodalExample> load_manifests(const std::vector<std::string>& paths, const Vocabulary& vocab,
                                              const ManifestOptions& opts);

}  // namespace fatspeech
