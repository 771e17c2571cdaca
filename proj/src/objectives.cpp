#include "fatspeech/objectives.hpp"

#include <cmath>
#include <filesystem>
#include <limits>

#include "fatspeech/errors.hpp"
#include "fatspeech/numerics/ops.hpp"

namespace fatspeech {

using namespace fatspeech::num;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

// Accumulates count-weighted per-example means into one pooled mean.
struct Pooled {
  std::vector<Tensor> parts;
  std::vector<std::size_t> counts;
  std::size_t total = 0;

  void add(const Tensor& mean_value, std::size_t count) {
    if (count == 0) return;
    parts.push_back(mean_value);
    counts.push_back(count);
    total += count;
  }

  Tensor value() const {
    if (total == 0) return Tensor::scalar(0.0);
    Tensor acc;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const Tensor term = scale(parts[i], static_cast<double>(counts[i]) / static_cast<double>(total));
      acc = acc.defined() ? num::add(acc, term) : term;
    }
    return acc;
  }
};

Tensor weighted_sum(const std::vector<std::pair<double, Tensor>>& terms) {
  Tensor acc;
  for (const auto& [w, t] : terms) {
    if (w == 0.0) continue;
    const Tensor term = w == 1.0 ? t : scale(t, w);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc.defined() ? acc : Tensor::scalar(0.0);
}

std::vector<int> with_bos(const std::vector<int>& ids) {
  std::vector<int> out{Vocabulary::kBos};
  out.insert(out.end(), ids.begin(), ids.end());
  return out;
}

std::vector<int> with_eos(const std::vector<int>& ids) {
  std::vector<int> out(ids);
  out.push_back(Vocabulary::kEos);
  return out;
}

}  // namespace

std::size_t ctc_min_frames(std::span<const int> labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i)
    if (labels[i] == labels[i - 1]) ++n;
  return n;
}

CtcResult ctc_loss(const Tensor& log_probs, std::span<const int> labels, int blank) {
  if (log_probs.rank() != 2) throw ShapeError("ctc_loss", "expected [frames, classes], got " + shape_str(log_probs.shape()));
  const std::size_t frames = log_probs.dim(0), classes = log_probs.dim(1);
  if (blank < 0 || static_cast<std::size_t>(blank) >= classes) throw ShapeError("ctc_loss", "blank id out of range");
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes || l == blank) throw ShapeError("ctc_loss", "label id out of range");
  }
  if (frames == 0 || ctc_min_frames(labels) > frames) {
    return {Tensor::scalar(std::numeric_limits<double>::infinity()), false};
  }
  // Extended label: blank, l1, blank, l2, ..., blank
  const std::size_t states = 2 * labels.size() + 1;
  std::vector<int> ext(states, blank);
  for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
  const auto lp = log_probs.data();
  auto emit = [&](std::size_t t, std::size_t s) { return lp[t * classes + static_cast<std::size_t>(ext[s])]; };
  auto can_skip = [&](std::size_t s) { return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]; };

  std::vector<double> alpha(frames * states, kNegInf), beta(frames * states, kNegInf);
  alpha[0] = emit(0, 0);
  if (states > 1) alpha[1] = emit(0, 1);
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t s = 0; s < states; ++s) {
      double a = alpha[(t - 1) * states + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * states + s - 1]);
      if (can_skip(s)) a = log_add(a, alpha[(t - 1) * states + s - 2]);
      alpha[t * states + s] = a == kNegInf ? kNegInf : a + emit(t, s);
    }
  }
  const std::size_t last = frames - 1;
  beta[last * states + states - 1] = emit(last, states - 1);
  if (states > 1) beta[last * states + states - 2] = emit(last, states - 2);
  for (std::size_t t = last; t-- > 0;) {
    for (std::size_t s = 0; s < states; ++s) {
      double b = beta[(t + 1) * states + s];
      if (s + 1 < states) b = log_add(b, beta[(t + 1) * states + s + 1]);
      if (s + 2 < states && can_skip(s + 2)) b = log_add(b, beta[(t + 1) * states + s + 2]);
      beta[t * states + s] = b == kNegInf ? kNegInf : b + emit(t, s);
    }
  }
  double log_p = alpha[last * states + states - 1];
  if (states > 1) log_p = log_add(log_p, alpha[last * states + states - 2]);

  const bool track = detail::needs_grad({&log_probs});
  Tensor y = detail::make_result({}, {-log_p}, track);
  if (track) {
    active_tape()->record({log_probs}, y, [log_probs, y, alpha, beta, ext, frames, states, classes, log_p]() mutable {
      const double gy = y.grad_view()[0];
      auto g = log_probs.grad();
      const auto lp = log_probs.data();
      std::vector<double> occupancy(classes);
      for (std::size_t t = 0; t < frames; ++t) {
        std::fill(occupancy.begin(), occupancy.end(), kNegInf);
        for (std::size_t s = 0; s < states; ++s) {
          const std::size_t k = static_cast<std::size_t>(ext[s]);
          // alpha and beta both include the emission at t
          const double v = alpha[t * states + s] + beta[t * states + s] - lp[t * classes + k];
          occupancy[k] = log_add(occupancy[k], v);
        }
        for (std::size_t k = 0; k < classes; ++k) {
          if (occupancy[k] != kNegInf) g[t * classes + k] -= gy * std::exp(occupancy[k] - log_p);
        }
      }
    });
  }
  return {y, true};
}

Tensor loss_speech_recon(const Tensor& target, const Tensor& predicted, const MaskPlan& mask) {
  return masked_sq_error(predicted, target, mask.indicator);
}

Tensor loss_masked_tokens(const Tensor& logits, std::span<const int> targets, const MaskPlan& mask) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size() || mask.size() != targets.size()) {
    throw ShapeError("loss_masked_tokens", logits.shape(), Shape{targets.size(), mask.size()});
  }
  const std::vector<std::size_t> rows = mask.masked_positions();
  if (rows.empty()) return Tensor::scalar(0.0);
  std::vector<int> picked;
  picked.reserve(rows.size());
  for (std::size_t r : rows) picked.push_back(targets[r]);
  const Tensor sel = rows.size() == logits.dim(0) ? logits : index_rows(logits, rows);
  return cross_entropy(sel, picked);
}

double LossBreakdown::recomputed_total() const {
  return weights.st * st + weights.mt * mt + weights.mlm * speech + weights.mlm * source + weights.mlm * target +
         weights.ctc * ctc;
}

std::uint64_t MaskSeed::for_example(std::uint64_t uid, unsigned modality) const {
  return mix_seed(mix_seed(mix_seed(seed, step), uid), modality);
}

namespace {

struct MlmTerms {
  Pooled speech, source, target;
};

void accumulate_fat_mlm(const FatModel& model, const Batch& batch, const MaskSeed& seed, nn::ForwardContext& ctx,
                        MlmTerms& terms) {
  const MaskConfig& mc = model.config().mask;
  for (const MultimodalExample& ex : batch.examples) {
    if (ex.flavor() == 0) throw DataError("example " + ex.id + " has no modality");
    std::optional<MaskPlan> speech_plan, src_plan, tgt_plan;
    Tensor speech, e_s, e_x, e_y;
    if (ex.speech) {
      speech = ex.speech->to_tensor();
      speech_plan = mask_span(ex.speech->frames, mc.lambda, mc.span_len, seed.for_example(ex.uid, kSpeechBit));
      e_s = model.acoustic_embed(speech, &*speech_plan, ctx);
    }
    if (ex.transcription) {
      src_plan = mask_token(ex.transcription->size(), mc.lambda, seed.for_example(ex.uid, kSourceBit));
      e_x = model.embed_text(ex.transcription->ids, &*src_plan);
    }
    if (ex.translation) {
      tgt_plan = mask_token(ex.translation->size(), mc.lambda, seed.for_example(ex.uid, kTargetBit));
      e_y = model.embed_text(ex.translation->ids, &*tgt_plan);
    }
    const FusedEncoderStates states = model.fuse_encode(ex.speech ? &e_s : nullptr, ex.transcription ? &e_x : nullptr,
                                                        ex.translation ? &e_y : nullptr, ctx);
    if (speech_plan && speech_plan->masked_count() > 0) {
      const Tensor pred = model.reconstruct_speech(states, ex.speech->frames);
      terms.speech.add(loss_speech_recon(speech, pred, *speech_plan), speech_plan->masked_count());
    }
    if (src_plan && src_plan->masked_count() > 0) {
      const Tensor logits = model.predict_tokens(states, Segment::kSource);
      terms.source.add(loss_masked_tokens(logits, ex.transcription->ids, *src_plan), src_plan->masked_count());
    }
    if (tgt_plan && tgt_plan->masked_count() > 0) {
      const Tensor logits = model.predict_tokens(states, Segment::kTarget);
      terms.target.add(loss_masked_tokens(logits, ex.translation->ids, *tgt_plan), tgt_plan->masked_count());
    }
  }
}

}  // namespace

LossBreakdown loss_fat_mlm(const FatModel& model, const Batch& batch, const MaskSeed& seed, nn::ForwardContext& ctx) {
  if (batch.examples.empty()) throw DataError("loss_fat_mlm: empty batch");
  MlmTerms terms;
  accumulate_fat_mlm(model, batch, seed, ctx, terms);
  LossBreakdown b;
  b.weights = {0.0, 0.0, 1.0, 0.0};
  const Tensor s = terms.speech.value(), x = terms.source.value(), y = terms.target.value();
  b.speech = s.item();
  b.source = x.item();
  b.target = y.item();
  b.total_tensor = weighted_sum({{1.0, s}, {1.0, x}, {1.0, y}});
  b.total = b.total_tensor.item();
  return b;
}

Tensor loss_seq2seq(const FatModel& model, const Batch& batch, Objective objective, nn::ForwardContext& ctx,
                    double label_smoothing, CtcTerm* ctc) {
  if (objective == Objective::kFatMlm) throw UsageError("loss_seq2seq needs an ST or MT objective");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw UsageError("label smoothing must be in [0, 1)");
  Pooled nll;
  std::vector<Tensor> ctc_parts;
  std::size_t infeasible = 0;
  for (const MultimodalExample& ex : batch.examples) {
    if (!ex.translation) throw DataError("example " + ex.id + " has no translation");
    FusedEncoderStates states;
    if (objective == Objective::kST) {
      if (!ex.speech) throw DataError("example " + ex.id + " has no speech for ST");
      const Tensor e = model.acoustic_embed(ex.speech->to_tensor(), nullptr, ctx);
      states = model.fuse_encode(&e, nullptr, nullptr, ctx);
      if (ctc && ex.transcription) {
        const CtcResult r = ctc_loss(model.ctc_head(e), ex.transcription->ids, static_cast<int>(model.blank_id()));
        if (r.feasible) {
          ctc_parts.push_back(r.loss);
        } else {
          ++infeasible;
        }
      }
    } else {
      if (!ex.transcription) throw DataError("example " + ex.id + " has no transcription for MT");
      states = model.encode_text(ex.transcription->ids, ctx);
    }
    const std::vector<int> inputs = with_bos(ex.translation->ids);
    const std::vector<int> targets = with_eos(ex.translation->ids);
    const Tensor logits = model.decoder_logits(states.hidden, inputs, ctx);
    Tensor loss = cross_entropy(logits, targets);
    if (label_smoothing > 0.0) {
      const double n = static_cast<double>(logits.numel());
      const Tensor uniform = scale(sum(log_softmax(logits)), -1.0 / n);
      loss = add(scale(loss, 1.0 - label_smoothing), scale(uniform, label_smoothing));
    }
    nll.add(loss, targets.size());
  }
  if (ctc) {
    ctc->feasible = ctc_parts.size();
    ctc->infeasible = infeasible;
    Pooled pooled;
    for (const auto& p : ctc_parts) pooled.add(p, 1);
    ctc->loss = pooled.value();
  }
  return nll.value();
}

LossBreakdown loss_fat_st(const FatModel& model, const Batch* st, const Batch* mt, const Batch* mlm,
                          const LossWeights& weights, const MaskSeed& seed, nn::ForwardContext& ctx,
                          double label_smoothing) {
  if (!st && !mt && !mlm) throw DataError("loss_fat_st: no sub-batch present");
  LossBreakdown b;
  b.weights = weights;
  Tensor st_loss = Tensor::scalar(0.0), mt_loss = Tensor::scalar(0.0), ctc_loss_t = Tensor::scalar(0.0);
  Tensor s = Tensor::scalar(0.0), x = Tensor::scalar(0.0), y = Tensor::scalar(0.0);
  if (st) {
    CtcTerm ctc;
    st_loss = loss_seq2seq(model, *st, Objective::kST, ctx, label_smoothing, weights.ctc != 0.0 ? &ctc : nullptr);
    if (ctc.loss.defined()) ctc_loss_t = ctc.loss;
    b.ctc_infeasible = ctc.infeasible;
  }
  if (mt) mt_loss = loss_seq2seq(model, *mt, Objective::kMT, ctx, label_smoothing);
  if (mlm) {
    MlmTerms terms;
    accumulate_fat_mlm(model, *mlm, seed, ctx, terms);
    s = terms.speech.value();
    x = terms.source.value();
    y = terms.target.value();
  }
  b.st = st_loss.item();
  b.mt = mt_loss.item();
  b.ctc = ctc_loss_t.item();
  b.speech = s.item();
  b.source = x.item();
  b.target = y.item();
  b.total_tensor = weighted_sum({{weights.st, st_loss},
                                 {weights.mt, mt_loss},
                                 {weights.mlm, s},
                                 {weights.mlm, x},
                                 {weights.mlm, y},
                                 {weights.ctc, ctc_loss_t}});
  b.total = b.total_tensor.item();
  return b;
}

LossLog::LossLog(const std::string& path, bool append) {
  const bool fresh = !append || !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  out_.open(path, append ? std::ios::app : std::ios::trunc);
  if (!out_) throw DataError("cannot open loss log " + path);
  if (fresh) out_ << "step,objective,flavor,speech,source,target,st,mt,ctc,total\n";
}

void LossLog::write(std::uint64_t step, const std::string& objective, const std::string& flavor,
                    const LossBreakdown& b) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%llu,%s,\"%s\",%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                static_cast<unsigned long long>(step), objective.c_str(), flavor.c_str(), b.speech, b.source,
                b.target, b.st, b.mt, b.ctc, b.total);
  out_ << buf;
  out_.flush();
}

}  // namespace fatspeech
