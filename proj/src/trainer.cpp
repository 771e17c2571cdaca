#include "fatspeech/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

#include "fatspeech/errors.hpp"
#include "fatspeech/masking.hpp"
#include "fatspeech/numerics/ops.hpp"

namespace fatspeech {

using num::Tensor;

namespace {

constexpr std::uint64_t kDropoutDomain = 0xd50;
constexpr std::uint64_t kDevMaskStep = 0xdefa17;

std::size_t get_size(const Config& c, const std::string& key, std::size_t fallback) {
  const long long v = c.get_int(key, static_cast<long long>(fallback));
  if (v < 0) throw UsageError(key + " must be non-negative");
  return static_cast<std::size_t>(v);
}

float to_float(double x) { return static_cast<float>(x); }

void accumulate(LossBreakdown& acc, const LossBreakdown& b, bool first) {
  if (first) {
    acc = b;
    return;
  }
  acc.speech += b.speech;
  acc.source += b.source;
  acc.target += b.target;
  acc.st += b.st;
  acc.mt += b.mt;
  acc.ctc += b.ctc;
  acc.total += b.total;
  acc.ctc_infeasible += b.ctc_infeasible;
  acc.total_tensor = num::add(acc.total_tensor, b.total_tensor);
}

std::string checkpoint_name(std::uint64_t step) { return "checkpoint_" + std::to_string(step) + ".fatc"; }

// Step numbers of checkpoint_<k>.fatc files in dir, ascending.
std::vector<std::uint64_t> saved_steps(const std::filesystem::path& dir) {
  std::vector<std::uint64_t> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    const std::string prefix = "checkpoint_", suffix = ".fatc";
    if (name.size() <= prefix.size() + suffix.size() || name.rfind(prefix, 0) != 0 ||
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0)
      continue;
    const std::string digits = name.substr(prefix.size(), name.size() - prefix.size() - suffix.size());
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; }))
      continue;
    out.push_back(std::stoull(digits));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

const char* train_mode_name(TrainMode m) { return m == TrainMode::kPretrain ? "pretrain" : "finetune"; }

void TrainConfig::validate() const {
  if (steps == 0) throw UsageError("train.steps must be >= 1");
  if (warmup == 0) throw UsageError("train.warmup must be >= 1");
  if (!(lr_factor > 0.0)) throw UsageError("train.lr_factor must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw UsageError("train.beta1 and train.beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) throw UsageError("train.eps must be > 0");
  if (weight_decay < 0.0) throw UsageError("train.weight_decay must be >= 0");
  if (!(clip > 0.0)) throw UsageError("train.clip must be > 0");
  if (checkpoint_interval == 0) throw UsageError("train.checkpoint_interval must be >= 1");
  if (average_last == 0) throw UsageError("train.average_last must be >= 1");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw UsageError("train.label_smoothing must lie in [0, 1)");
  if (weights.st < 0 || weights.mt < 0 || weights.mlm < 0 || weights.ctc < 0)
    throw UsageError("loss weights must be non-negative");
  if (bucket.batch_frames == 0 || bucket.batch_tokens == 0) throw UsageError("batch budgets must be positive");
}

Config TrainConfig::to_config() const {
  Config c;
  auto num = [&](const std::string& k, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    c.set(k, buf);
  };
  c.set("train.steps", std::to_string(steps));
  c.set("train.warmup", std::to_string(warmup));
  num("train.lr_factor", lr_factor);
  num("train.beta1", beta1);
  num("train.beta2", beta2);
  num("train.eps", eps);
  num("train.weight_decay", weight_decay);
  num("train.clip", clip);
  c.set("train.seed", std::to_string(seed));
  c.set("train.checkpoint_interval", std::to_string(checkpoint_interval));
  c.set("train.average_last", std::to_string(average_last));
  num("train.label_smoothing", label_smoothing);
  c.set("train.proportional", proportional ? "true" : "false");
  num("loss.st", weights.st);
  num("loss.mt", weights.mt);
  num("loss.mlm", weights.mlm);
  num("loss.ctc", weights.ctc);
  c.set("data.max_frames", std::to_string(bucket.max_frames));
  c.set("data.batch_frames", std::to_string(bucket.batch_frames));
  c.set("data.batch_tokens", std::to_string(bucket.batch_tokens));
  return c;
}

TrainConfig TrainConfig::from_config(const Config& c) {
  TrainConfig t;
  t.steps = get_size(c, "train.steps", t.steps);
  t.warmup = get_size(c, "train.warmup", t.warmup);
  t.lr_factor = c.get_double("train.lr_factor", t.lr_factor);
  t.beta1 = c.get_double("train.beta1", t.beta1);
  t.beta2 = c.get_double("train.beta2", t.beta2);
  t.eps = c.get_double("train.eps", t.eps);
  t.weight_decay = c.get_double("train.weight_decay", t.weight_decay);
  t.clip = c.get_double("train.clip", t.clip);
  t.seed = get_size(c, "train.seed", t.seed);
  t.checkpoint_interval = get_size(c, "train.checkpoint_interval", t.checkpoint_interval);
  t.average_last = get_size(c, "train.average_last", t.average_last);
  t.label_smoothing = c.get_double("train.label_smoothing", t.label_smoothing);
  t.proportional = c.get_bool("train.proportional", t.proportional);
  t.weights.st = c.get_double("loss.st", t.weights.st);
  t.weights.mt = c.get_double("loss.mt", t.weights.mt);
  t.weights.mlm = c.get_double("loss.mlm", t.weights.mlm);
  t.weights.ctc = c.get_double("loss.ctc", t.weights.ctc);
  t.bucket.max_frames = get_size(c, "data.max_frames", t.bucket.max_frames);
  t.bucket.batch_frames = get_size(c, "data.batch_frames", t.bucket.batch_frames);
  t.bucket.batch_tokens = get_size(c, "data.batch_tokens", t.bucket.batch_tokens);
  t.validate();
  return t;
}

double inverse_sqrt_lr(std::size_t step, std::size_t d_model, std::size_t warmup, double factor) {
  const double s = static_cast<double>(std::max<std::size_t>(step, 1));
  const double w = static_cast<double>(warmup);
  return factor / std::sqrt(static_cast<double>(d_model)) * std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

double grad_norm(const ParameterMap& params) {
  double sq = 0.0;
  for (const auto& [name, t] : params)
    for (double g : t.grad_view()) sq += g * g;
  return std::sqrt(sq);
}

double clip_grad_norm(const ParameterMap& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& [name, t] : params)
      if (t.has_grad())
        for (double& g : t.grad()) g *= scale;
  }
  return norm;
}

Adam::Adam(const ParameterMap& params, double beta1, double beta2, double eps, double weight_decay)
    : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, p] : params_) {
    // Once a parameter has moments it keeps moving even on steps where no
    // gradient reached it.
    if (!p.has_grad() && !m_.count(name)) continue;
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(p.numel(), 0.0);
      v.assign(p.numel(), 0.0);
    }
    const auto g = p.grad();
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = to_float(beta1_ * m[i] + (1.0 - beta1_) * g[i]);
      v[i] = to_float(beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i]);
      double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      if (weight_decay_ > 0.0) update += weight_decay_ * w[i];
      w[i] = to_float(w[i] - lr * update);
    }
  }
}

ParameterMap Adam::state() const {
  ParameterMap out;
  for (const auto& [name, m] : m_) {
    const auto& shape = params_.at(name).shape();
    out.emplace("m." + name, Tensor(shape, m));
    out.emplace("v." + name, Tensor(shape, v_.at(name)));
  }
  return out;
}

void Adam::load_state(const ParameterMap& state, std::uint64_t steps_taken) {
  m_.clear();
  v_.clear();
  for (const auto& [key, t] : state) {
    if (key.size() < 3 || (key.rfind("m.", 0) != 0 && key.rfind("v.", 0) != 0))
      throw DataError("unknown optimizer state " + key);
    const std::string name = key.substr(2);
    const auto it = params_.find(name);
    if (it == params_.end()) throw DataError("optimizer state for unknown parameter " + name);
    if (it->second.shape() != t.shape()) throw DataError("optimizer state shape mismatch for " + name);
    std::vector<double> values(t.data().begin(), t.data().end());
    (key[0] == 'm' ? m_ : v_)[name] = std::move(values);
  }
  for (const auto& [name, m] : m_)
    if (!v_.count(name)) throw DataError("optimizer state missing v." + name);
  if (m_.size() != v_.size()) throw DataError("optimizer state missing m. entries");
  t_ = steps_taken;
}

Trainer::Trainer(FatModel& model, const TrainConfig& config, TrainMode mode, BatchSchedule schedule,
                 std::uint64_t vocab_hash)
    : model_(model),
      config_(config),
      mode_(mode),
      schedule_(std::move(schedule)),
      vocab_hash_(vocab_hash),
      optimizer_(model.parameters(), config.beta1, config.beta2, config.eps, config.weight_decay) {
  config_.validate();
}

void Trainer::resume(const ModelCheckpoint& ck) {
  const std::string mode = ck.extra.get("train.mode", train_mode_name(mode_));
  if (mode != train_mode_name(mode_))
    throw UsageError("cannot resume a " + mode + " checkpoint in " + train_mode_name(mode_) + " mode");
  const auto mismatches = model_.config().architecture_mismatches(ck.config);
  if (!mismatches.empty()) throw UsageError("resume checkpoint differs in " + mismatches.front());
  if (vocab_hash_ != 0 && ck.vocab_hash != 0 && ck.vocab_hash != vocab_hash_)
    throw DataError("resume checkpoint was trained with a different vocabulary");
  model_.load_parameters(ck.tensors);
  optimizer_.load_state(ck.optimizer, ck.step);
  const std::size_t draws = mode_ == TrainMode::kPretrain ? 1 : schedule_.stream_count();
  schedule_.skip(static_cast<std::size_t>(ck.step) * draws);
  step_ = ck.step;
}

StepReport Trainer::train_step() {
  const std::uint64_t step = step_ + 1;
  StepReport report;
  report.step = step;
  const MaskSeed mask_seed{config_.seed, step};
  auto ctx = model_.context(true, mix_seed(mix_seed(config_.seed, kDropoutDomain), step));

  for (auto& [name, p] : model_.parameters()) p.zero_grad();
  num::Tape tape;
  {
    num::TapeScope scope(tape);
    if (mode_ == TrainMode::kPretrain) {
      const ScheduledBatch sb = schedule_.next();
      report.loss = loss_fat_mlm(model_, sb.batch, mask_seed, ctx);
      report.objective = objective_name(sb.objective);
      report.flavor = flavor_name(sb.batch.flavor);
    } else {
      // One batch per stream; a repeated objective (proportional sampling)
      // closes the current group.
      std::optional<Batch> slots[3];
      bool first = true;
      auto flush = [&] {
        if (!slots[0] && !slots[1] && !slots[2]) return;
        const LossBreakdown b =
            loss_fat_st(model_, slots[0] ? &*slots[0] : nullptr, slots[1] ? &*slots[1] : nullptr,
                        slots[2] ? &*slots[2] : nullptr, config_.weights, mask_seed, ctx, config_.label_smoothing);
        accumulate(report.loss, b, first);
        first = false;
        for (auto& s : slots) s.reset();
      };
      report.objective = "fat-st";
      for (std::size_t i = 0; i < schedule_.stream_count(); ++i) {
        ScheduledBatch sb = schedule_.next();
        const std::size_t slot = static_cast<std::size_t>(sb.objective);
        if (slots[slot]) flush();
        if (!report.flavor.empty()) report.flavor += "|";
        report.flavor += std::string(objective_name(sb.objective)) + ":" + flavor_name(sb.batch.flavor);
        slots[slot] = std::move(sb.batch);
      }
      flush();
    }
  }
  if (!std::isfinite(report.loss.total)) {
    throw DivergenceError("non-finite loss at step " + std::to_string(step), "");
  }
  tape.backward(report.loss.total_tensor);
  report.grad_norm = clip_grad_norm(model_.parameters(), config_.clip);
  if (!std::isfinite(report.grad_norm)) {
    throw DivergenceError("non-finite gradient at step " + std::to_string(step), "");
  }
  report.lr = inverse_sqrt_lr(step, model_.config().d_model, config_.warmup, config_.lr_factor);
  optimizer_.step(report.lr);
  step_ = step;
  return report;
}

ModelCheckpoint Trainer::checkpoint() const {
  ModelCheckpoint ck = make_checkpoint(model_, vocab_hash_, step_);
  ck.optimizer = optimizer_.state();
  ck.extra = config_.to_config();
  ck.extra.set("train.mode", train_mode_name(mode_));
  return ck;
}

TrainResult Trainer::run(const std::string& out_dir, const std::function<void(const StepReport&)>& on_step) {
  TrainResult result;
  const bool write = !out_dir.empty();
  const std::filesystem::path dir(out_dir);
  std::optional<LossLog> log;
  std::string last_checkpoint;
  if (write) {
    std::filesystem::create_directories(dir);
    log.emplace((dir / "train_log.csv").string(), step_ > 0);
    const auto existing = saved_steps(dir);
    for (std::uint64_t s : existing)
      if (s <= step_) last_checkpoint = (dir / checkpoint_name(s)).string();
  }
  while (step_ < config_.steps) {
    StepReport r;
    try {
      r = train_step();
    } catch (const DivergenceError& e) {
      throw DivergenceError(e.what(), last_checkpoint);
    }
    if (log) log->write(r.step, r.objective, r.flavor, r.loss);
    if (on_step) on_step(r);
    result.history.push_back(std::move(r));
    if (write && (step_ % config_.checkpoint_interval == 0 || step_ == config_.steps)) {
      last_checkpoint = (dir / checkpoint_name(step_)).string();
      save_checkpoint(last_checkpoint, checkpoint());
      result.checkpoints.push_back(last_checkpoint);
    }
  }
  if (write) {
    auto steps = saved_steps(dir);
    steps.erase(std::remove_if(steps.begin(), steps.end(), [&](std::uint64_t s) { return s > step_; }), steps.end());
    if (steps.size() > config_.average_last)
      steps.erase(steps.begin(), steps.end() - static_cast<std::ptrdiff_t>(config_.average_last));
    std::vector<ModelCheckpoint> recent;
    for (std::uint64_t s : steps) {
      ModelCheckpoint ck = load_checkpoint((dir / checkpoint_name(s)).string());
      ck.optimizer.clear();
      recent.push_back(std::move(ck));
    }
    if (!recent.empty()) {
      ModelCheckpoint avg = average_checkpoints(recent);
      avg.extra.set("train.averaged", std::to_string(recent.size()));
      result.final_checkpoint = (dir / "final.fatc").string();
      save_checkpoint(result.final_checkpoint, avg);
    }
  }
  return result;
}

double Trainer::dev_loss(const std::vector<Batch>& batches) const {
  num::NoGradScope no_grad;
  double total = 0.0;
  std::size_t count = 0;
  for (const Batch& b : batches) {
    auto ctx = model_.context(false, 0);
    double value;
    if (mode_ == TrainMode::kPretrain) {
      value = loss_fat_mlm(model_, b, MaskSeed{config_.seed, kDevMaskStep}, ctx).total;
    } else {
      if (!flavor_has(b.flavor, kSpeechBit) || !flavor_has(b.flavor, kTargetBit)) continue;
      value = loss_seq2seq(model_, b.view(kSpeechBit | kTargetBit), Objective::kST, ctx).item();
    }
    total += value * static_cast<double>(b.size());
    count += b.size();
  }
  if (count == 0) throw DataError("dev set has no usable examples");
  return total / static_cast<double>(count);
}

TokenAccuracy teacher_forced_accuracy(const FatModel& model, const std::vector<Batch>& batches) {
  num::NoGradScope no_grad;
  TokenAccuracy acc;
  auto ctx = model.context(false, 0);
  for (const Batch& b : batches) {
    for (const MultimodalExample& ex : b.examples) {
      if (!ex.translation || (!ex.speech && !ex.transcription)) continue;
      const FusedEncoderStates states =
          ex.speech ? model.encode_speech(ex.speech->to_tensor(), ctx) : model.encode_text(ex.transcription->ids, ctx);
      std::vector<int> inputs{Vocabulary::kBos};
      inputs.insert(inputs.end(), ex.translation->ids.begin(), ex.translation->ids.end());
      std::vector<int> targets(ex.translation->ids.begin(), ex.translation->ids.end());
      targets.push_back(Vocabulary::kEos);
      const Tensor logits = model.decoder_logits(states.hidden, inputs, ctx);
      const std::size_t vocab = logits.dim(1);
      for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto row = logits.data().subspan(i * vocab, vocab);
        const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        acc.correct += best == targets[i];
        ++acc.total;
      }
    }
  }
  return acc;
}

std::vector<MultimodalExample> load_manifests(const std::vector<std::string>& paths, const Vocabulary& vocab,
                                              const ManifestOptions& opts) {
  std::vector<MultimodalExample> out;
  for (const auto& path : paths) {
    auto part = load_manifest(path, vocab, opts);
    for (auto& ex : part) {
      ex.uid = out.size();
      out.push_back(std::move(ex));
    }
  }
  return out;
}

}  // namespace fatspeech
