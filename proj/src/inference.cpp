#include "fatspeech/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "fatspeech/errors.hpp"
#include "fatspeech/subword.hpp"

namespace fatspeech {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<std::string> tokenize(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

std::map<std::vector<std::string>, std::size_t> ngram_counts(const std::vector<std::string>& words, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> out;
  for (std::size_t i = 0; i + n <= words.size(); ++i)
    ++out[std::vector<std::string>(words.begin() + static_cast<std::ptrdiff_t>(i),
                                   words.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

// Higher normalized score first, then the smaller sequence.
bool better_final(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

}  // namespace

int ModelScorer::bos() const { return Vocabulary::kBos; }
int ModelScorer::eos() const { return Vocabulary::kEos; }

std::vector<double> ModelScorer::log_probs(std::span<const int> prefix) const {
  std::vector<double> lp = model_.decode_step(prefix, memory_);
  lp[Vocabulary::kPad] = kNegInf;
  lp[Vocabulary::kBos] = kNegInf;
  lp[Vocabulary::kMask] = kNegInf;
  return lp;
}

std::vector<int> Hypothesis::output() const {
  std::vector<int> out;
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    if (finished && i + 1 == tokens.size()) break;
    out.push_back(tokens[i]);
  }
  return out;
}

double length_penalty(std::size_t length, double alpha) {
  if (alpha == 0.0) return 1.0;
  return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

Hypothesis beam_search(const StepScorer& scorer, const BeamOptions& opts) {
  if (opts.beam == 0) throw UsageError("beam must be >= 1");
  if (opts.max_len == 0) throw UsageError("max_len must be >= 1");
  const int eos = scorer.eos();
  struct Candidate {
    std::size_t parent;
    int token;
    double log_prob;
  };
  std::vector<Hypothesis> active{{{scorer.bos()}, 0.0, 0.0, false}};
  std::vector<Hypothesis> finished;
  for (std::size_t step = 1; step <= opts.max_len && !active.empty(); ++step) {
    const bool last = step == opts.max_len;
    std::vector<Candidate> cands;
    for (std::size_t h = 0; h < active.size(); ++h) {
      const std::vector<double> lp = scorer.log_probs(active[h].tokens);
      for (std::size_t k = 0; k < lp.size(); ++k) {
        if (lp[k] == kNegInf || std::isnan(lp[k])) continue;
        if (last && static_cast<int>(k) != eos) continue;
        cands.push_back({h, static_cast<int>(k), active[h].log_prob + lp[k]});
      }
    }
    // Active hypotheses are kept in rank order, so (parent, token) breaks ties
    // toward the smaller sequence.
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    });
    if (cands.size() > opts.beam) cands.resize(opts.beam);
    std::vector<Hypothesis> next;
    for (const Candidate& c : cands) {
      Hypothesis h;
      h.tokens = active[c.parent].tokens;
      h.tokens.push_back(c.token);
      h.log_prob = c.log_prob;
      if (c.token == eos) {
        h.finished = true;
        h.score = h.log_prob / length_penalty(h.tokens.size() - 1, opts.alpha);
        finished.push_back(std::move(h));
      } else {
        h.score = h.log_prob / length_penalty(h.tokens.size() - 1, opts.alpha);
        next.push_back(std::move(h));
      }
    }
    // Keep sibling order lexicographic among equal scores.
    std::stable_sort(next.begin(), next.end(), [](const Hypothesis& a, const Hypothesis& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      return a.tokens < b.tokens;
    });
    active = std::move(next);
  }
  if (finished.empty()) {
    // Only reachable when the scorer forbids eos everywhere.
    throw DataError("beam search produced no finished hypothesis");
  }
  return *std::min_element(finished.begin(), finished.end(),
                           [](const Hypothesis& a, const Hypothesis& b) { return better_final(a, b); });
}

Hypothesis greedy_search(const StepScorer& scorer, std::size_t max_len) {
  if (max_len == 0) throw UsageError("max_len must be >= 1");
  Hypothesis h{{scorer.bos()}, 0.0, 0.0, false};
  for (std::size_t step = 1; step <= max_len; ++step) {
    const std::vector<double> lp = scorer.log_probs(h.tokens);
    int best = -1;
    if (step == max_len) {
      best = scorer.eos();
    } else {
      for (std::size_t k = 0; k < lp.size(); ++k)
        if (lp[k] != kNegInf && (best < 0 || lp[k] > lp[static_cast<std::size_t>(best)])) best = static_cast<int>(k);
    }
    if (best < 0 || lp[static_cast<std::size_t>(best)] == kNegInf) throw DataError("greedy search found no token");
    h.tokens.push_back(best);
    h.log_prob += lp[static_cast<std::size_t>(best)];
    if (best == scorer.eos()) break;
  }
  h.finished = true;
  h.score = h.log_prob;
  return h;
}

std::size_t default_max_len(std::size_t source_length, bool speech) {
  const std::size_t base = speech ? source_length / 4 : source_length;
  return std::clamp<std::size_t>(2 * base, 1, 512);
}

Hypothesis translate_speech(const FatModel& model, const num::Tensor& speech, const BeamOptions& opts) {
  num::NoGradScope no_grad;
  auto ctx = model.context(false, 0);
  const ModelScorer scorer(model, model.encode_speech(speech, ctx).hidden);
  return opts.beam == 1 ? greedy_search(scorer, opts.max_len) : beam_search(scorer, opts);
}

Hypothesis translate_text(const FatModel& model, std::span<const int> source, const BeamOptions& opts) {
  num::NoGradScope no_grad;
  auto ctx = model.context(false, 0);
  const ModelScorer scorer(model, model.encode_text(source, ctx).hidden);
  return opts.beam == 1 ? greedy_search(scorer, opts.max_len) : beam_search(scorer, opts);
}

BleuResult corpus_bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references,
                       bool smooth) {
  if (hypotheses.empty()) throw DataError("corpus_bleu: empty corpus");
  if (hypotheses.size() != references.size()) {
    throw DataError("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                    std::to_string(references.size()) + " references");
  }
  BleuResult r;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto hyp = tokenize(hypotheses[i]);
    const auto ref = tokenize(references[i]);
    r.hyp_length += hyp.size();
    r.ref_length += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto hc = ngram_counts(hyp, n);
      const auto rc = ngram_counts(ref, n);
      for (const auto& [gram, count] : hc) {
        r.totals[n - 1] += count;
        const auto it = rc.find(gram);
        if (it != rc.end()) r.matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  if (r.hyp_length == 0) return r;
  double log_sum = 0.0;
  std::size_t orders = 0;
  double smooth_factor = 1.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (r.totals[n] == 0) continue;
    ++orders;
    if (r.matches[n] == 0) {
      if (!smooth) return r;
      smooth_factor *= 2.0;
      r.precisions[n] = 1.0 / (smooth_factor * static_cast<double>(r.totals[n]));
    } else {
      r.precisions[n] = static_cast<double>(r.matches[n]) / static_cast<double>(r.totals[n]);
    }
    log_sum += std::log(r.precisions[n]);
  }
  r.brevity_penalty = r.hyp_length < r.ref_length
                          ? std::exp(1.0 - static_cast<double>(r.ref_length) / static_cast<double>(r.hyp_length))
                          : 1.0;
  r.bleu = 100.0 * r.brevity_penalty * std::exp(log_sum / static_cast<double>(orders));
  return r;
}

}  // namespace fatspeech
