// Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero
// if any fails. Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fatspeech/inference.hpp"
#include "fatspeech/masking.hpp"
#include "fatspeech/numerics/grad_check.hpp"
#include "fatspeech/numerics/ops.hpp"
#include "fatspeech/objectives.hpp"
#include "fatspeech/synth.hpp"
#include "fatspeech/trainer.hpp"
#include "test_util.hpp"

using namespace fatspeech;
using namespace fatspeech::num;
using fatspeech::testing::make_batch;
using fatspeech::testing::random_example;
using fatspeech::testing::random_extent;
using fatspeech::testing::random_tensor;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradRelTol = 1e-4;
constexpr double kGradBudgetSec = 120.0;
constexpr double kCtcAbsTol = 1e-6;
constexpr double kCtcBudgetSec = 30.0;
constexpr double kMaskFractionTol = 0.03;
constexpr double kUnmaskedGradTol = 1e-12;
constexpr double kTotalTol = 1e-6;
constexpr double kOverfitAccuracy = 0.99;
constexpr std::size_t kOverfitSteps = 500;
constexpr double kOverfitBudgetSec = 600.0;
constexpr double kDevLossThreshold = 1.45;
constexpr std::size_t kPretrainSteps = 500;
constexpr std::size_t kFinetuneSteps = 300;
constexpr std::size_t kDevInterval = 10;
constexpr int kBenefitSeeds = 5;
constexpr int kBenefitRequired = 4;
constexpr double kBleuTol = 1e-6;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("fatspeech_acceptance_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------
// 1. finite-difference gradients

struct GradTally {
  std::size_t checks = 0;
  double worst = 0.0;
  std::string first_failure;

  // Failing coordinates go to stderr, labelled with `point_names` when given.
  void add(const std::string& name, const GradCheckReport& r, const std::vector<std::string>& point_names = {}) {
    ++checks;
    worst = std::max(worst, r.max_rel_error);
    if (r.passed) return;
    if (first_failure.empty()) first_failure = name + ": " + r.summary();
    std::fprintf(stderr, "%s: %s\n", name.c_str(), r.summary().c_str());
    for (const auto& e : r.entries)
      if (e.rel_error >= kGradRelTol)
        std::fprintf(stderr, "  %s[%zu] analytic %.9g numeric %.9g\n",
                     e.point < point_names.size() ? point_names[e.point].c_str() : "point", e.coord, e.analytic,
                     e.numeric);
  }
};

Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

void check_primitives(std::mt19937_64& rng, GradTally& tally, const GradCheckOptions& opts) {
  const std::size_t n = random_extent(rng, 1, 4), d = random_extent(rng, 2, 5), k = random_extent(rng, 1, 4);
  Tensor a = random_tensor({n, d}, rng), b = random_tensor({n, d}, rng);
  Tensor c = random_tensor({d, k}, rng), e = random_tensor({k, d}, rng);
  Tensor row = random_tensor({d}, rng), gamma = random_tensor({d}, rng), beta = random_tensor({d}, rng);
  Tensor sq = random_tensor({d, d}, rng);
  std::vector<std::uint8_t> masked(n);
  for (std::size_t i = 0; i < n; ++i) masked[i] = static_cast<std::uint8_t>(i % 2);
  std::vector<int> targets(n);
  for (std::size_t i = 0; i < n; ++i) targets[i] = static_cast<int>(rng() % d);
  const std::vector<int> ids = {static_cast<int>(n - 1), 0, static_cast<int>(n - 1)};
  Tensor kinked(a.shape(), std::vector<double>(a.data().begin(), a.data().end()));
  for (auto& v : kinked.mutable_data()) v += v >= 0 ? 0.1 : -0.1;

  const std::size_t cin = random_extent(rng, 1, 2), cout = random_extent(rng, 1, 3);
  const std::size_t h = random_extent(rng, 3, 6), w = random_extent(rng, 3, 6);
  Tensor img = random_tensor({cin, h, w}, rng);
  Tensor kernel = random_tensor({cout, cin, 3, 3}, rng), tkernel = random_tensor({cin, cout, 3, 3}, rng);
  Tensor bias = random_tensor({cout}, rng);

  const std::vector<std::tuple<const char*, std::function<Tensor()>, std::vector<Tensor>>> prims = {
      {"add", [&] { return add(a, b); }, {a, b}},
      {"sub", [&] { return sub(a, b); }, {a, b}},
      {"mul", [&] { return mul(a, b); }, {a, b}},
      {"scale", [&] { return scale(a, -1.7); }, {a}},
      {"add_row", [&] { return add_row(a, row); }, {a, row}},
      {"matmul", [&] { return matmul(a, c); }, {a, c}},
      {"matmul_nt", [&] { return matmul_nt(a, e); }, {a, e}},
      {"transpose", [&] { return transpose(a); }, {a}},
      {"reshape", [&] { return reshape(a, {d, n}); }, {a}},
      {"concat", [&] { return concat(std::vector<Tensor>{a, b}, 1); }, {a, b}},
      {"slice", [&] { return slice(a, 1, 1, d); }, {a}},
      {"embedding", [&] { return embedding(a, ids); }, {a}},
      {"substitute_rows", [&] { return substitute_rows(a, row, masked); }, {a, row}},
      {"softmax", [&] { return softmax(a); }, {a}},
      {"causal_softmax", [&] { return causal_softmax(sq); }, {sq}},
      {"log_softmax", [&] { return log_softmax(a); }, {a}},
      {"layer_norm", [&] { return layer_norm(a, gamma, beta); }, {a, gamma, beta}},
      {"gelu", [&] { return gelu(a); }, {a}},
      {"relu", [&] { return relu(kinked); }, {kinked}},
      {"dropout", [&] { return dropout(a, 0.3, 11); }, {a}},
      {"swap_leading_axes", [&] { return swap_leading_axes(reshape(a, {1, n, d})); }, {a}},
      {"conv2d", [&] { return conv2d(img, kernel, bias, 2, 1); }, {img, kernel, bias}},
      {"conv_transpose2d", [&] { return conv_transpose2d(img, tkernel, bias, 2, 1, 1); }, {img, tkernel, bias}},
      {"mean", [&] { return mean(a); }, {a}},
      {"mse", [&] { return mse(a, b); }, {a, b}},
      {"cross_entropy", [&] { return cross_entropy(a, targets); }, {a}},
      {"masked_sq_error", [&] { return masked_sq_error(a, b, masked); }, {a, b}},
  };
  for (const auto& [name, fn, points] : prims)
    tally.add(name, grad_check([&] { return weighted_sum(fn(), 99); }, points, opts));
}

void check_standalone_losses(std::mt19937_64& rng, GradTally& tally, const GradCheckOptions& opts) {
  const std::size_t frames = random_extent(rng, 3, 8), dim = random_extent(rng, 2, 5);
  const Tensor target = random_tensor({frames, dim}, rng);
  const MaskPlan span = mask_span(frames, 0.5, 2, rng());
  tally.add("speech reconstruction",
            grad_check([&](const Tensor& p) { return loss_speech_recon(target, p, span); },
                       random_tensor({frames, dim}, rng), opts));

  const std::size_t len = random_extent(rng, 2, 6), vocab = random_extent(rng, 3, 7);
  std::vector<int> tokens(len);
  for (auto& t : tokens) t = static_cast<int>(rng() % vocab);
  MaskPlan tok = mask_token(len, 0.5, rng());
  if (tok.masked_count() == 0) tok.indicator[0] = 1;
  tally.add("masked tokens",
            grad_check([&](const Tensor& l) { return loss_masked_tokens(l, tokens, tok); },
                       random_tensor({len, vocab}, rng), opts));

  const std::size_t classes = random_extent(rng, 2, 5), steps = random_extent(rng, 3, 7);
  const int blank = static_cast<int>(classes) - 1;
  std::vector<int> label;
  for (std::size_t i = 0, n = random_extent(rng, 1, 2); i < n; ++i)
    label.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(blank)));
  tally.add("ctc", grad_check([&](const Tensor& x) { return ctc_loss(log_softmax(x), label, blank).loss; },
                              random_tensor({steps, classes}, rng), opts));
}

ModelConfig random_toy_config(std::mt19937_64& rng) {
  ModelConfig c;
  c.heads = random_extent(rng, 1, 2);
  c.d_model = c.heads * random_extent(rng, 4, 5);
  c.acoustic_layers = 1;
  c.shared_layers = random_extent(rng, 1, 2);
  c.decoder_layers = random_extent(rng, 1, 2);
  c.ffn_dim = c.d_model + random_extent(rng, 0, 8);
  c.feature_dim = random_extent(rng, 3, 6);
  c.vocab_size = random_extent(rng, 8, 12);
  c.conv_channels = random_extent(rng, 1, 2);
  c.activation = nn::Activation::kGelu;
  c.dropout = 0.0;
  return c;
}

void sample_parameters(FatModel& m, std::mt19937_64& rng, std::size_t count, std::vector<Tensor>& points,
                       std::vector<std::string>& names) {
  std::vector<std::pair<std::string, Tensor>> all(m.parameters().begin(), m.parameters().end());
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min(count, all.size()));
  for (auto& [name, p] : all) {
    names.push_back(name);
    points.push_back(p);
  }
}

void check_model_losses(std::mt19937_64& rng, GradTally& tally, GradCheckOptions opts) {
  const ModelConfig cfg = random_toy_config(rng);
  FatModel m(cfg, rng());
  const std::string tag = fmt(" (d=%zu heads=%zu layers=%zu/%zu)", cfg.d_model, cfg.heads, cfg.shared_layers,
                              cfg.decoder_layers);
  const std::size_t fd = cfg.feature_dim, v = cfg.vocab_size;
  const Batch triplet = make_batch({random_example(rng, 0, random_extent(rng, 16, 24), random_extent(rng, 2, 3),
                                                   random_extent(rng, 2, 4), fd, v),
                                    random_example(rng, 1, random_extent(rng, 16, 24), random_extent(rng, 2, 3),
                                                   random_extent(rng, 2, 4), fd, v)});
  const MaskSeed seed{rng(), 1};
  std::vector<Tensor> points;
  std::vector<std::string> names;
  sample_parameters(m, rng, 20, points, names);
  opts.max_coords = 8;
  opts.eps = 1e-4;

  auto check = [&](const std::string& name, const std::function<Tensor(nn::ForwardContext&)>& loss) {
    tally.add(name + tag,
              grad_check(
                  [&] {
                    auto ctx = m.context(false, 0);
                    return loss(ctx);
                  },
                  points, opts),
              names);
  };
  check("masked speech", [&](auto& ctx) { return loss_fat_mlm(m, triplet.view(kSpeechBit), seed, ctx).total_tensor; });
  check("masked source", [&](auto& ctx) { return loss_fat_mlm(m, triplet.view(kSourceBit), seed, ctx).total_tensor; });
  check("masked target", [&](auto& ctx) { return loss_fat_mlm(m, triplet.view(kTargetBit), seed, ctx).total_tensor; });
  check("speech translation",
        [&](auto& ctx) { return loss_seq2seq(m, triplet.view(kSpeechBit | kTargetBit), Objective::kST, ctx); });
  check("text translation",
        [&](auto& ctx) { return loss_seq2seq(m, triplet.view(kSourceBit | kTargetBit), Objective::kMT, ctx); });
  check("ctc through the model", [&](auto& ctx) {
    CtcTerm term;
    loss_seq2seq(m, triplet, Objective::kST, ctx, 0.0, &term);
    return term.loss;
  });
  check("fused masked LM", [&](auto& ctx) { return loss_fat_mlm(m, triplet, seed, ctx).total_tensor; });
  const Batch st = triplet, mt = triplet.view(kSourceBit | kTargetBit), mlm = triplet.view(kSpeechBit | kSourceBit);
  check("fused speech translation",
        [&](auto& ctx) { return loss_fat_st(m, &st, &mt, &mlm, {}, seed, ctx).total_tensor; });
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  GradCheckOptions opts;
  opts.tol = kGradRelTol;
  GradTally tally;
  std::mt19937_64 rng(20240601);
  constexpr int kConfigs = 10;
  for (int i = 0; i < kConfigs; ++i) {
    opts.seed = rng();
    check_primitives(rng, tally, opts);
    check_standalone_losses(rng, tally, opts);
    check_model_losses(rng, tally, opts);
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = tally.first_failure.empty() && tally.worst < kGradRelTol && secs < kGradBudgetSec;
  o.detail = fmt("%zu checks over %d configurations, max rel error %.2e (< %.0e), %.1f s (< %.0f s)", tally.checks,
                 kConfigs, tally.worst, kGradRelTol, secs, kGradBudgetSec);
  if (!tally.first_failure.empty()) o.detail += "; first failure " + tally.first_failure;
  return o;
}

// ---------------------------------------------------------------------------
// 2. CTC against path enumeration

double enumerate_ctc_probability(const Tensor& log_probs, const std::vector<int>& labels, int blank) {
  const std::size_t frames = log_probs.dim(0), classes = log_probs.dim(1);
  std::vector<std::size_t> path(frames, 0);
  double total = 0.0;
  while (true) {
    std::vector<int> collapsed;
    int prev = -1;
    double logp = 0.0;
    for (std::size_t t = 0; t < frames; ++t) {
      const int k = static_cast<int>(path[t]);
      logp += log_probs.at(t, path[t]);
      if (k != blank && k != prev) collapsed.push_back(k);
      prev = k;
    }
    if (collapsed == labels) total += std::exp(logp);
    std::size_t i = 0;
    while (i < frames && ++path[i] == classes) path[i++] = 0;
    if (i == frames) break;
  }
  return total;
}

Outcome ctc_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(77);
  double worst = 0.0;
  std::size_t cases = 0, infeasible = 0, mismatched_feasibility = 0;
  for (std::size_t frames = 1; frames <= 6; ++frames) {
    for (std::size_t symbols = 1; symbols <= 4; ++symbols) {
      const std::size_t classes = symbols + 1;
      for (int blank_first = 0; blank_first < 2; ++blank_first) {
        const int blank = blank_first ? 0 : static_cast<int>(symbols);
        std::vector<int> alphabet;
        for (int k = 0; k < static_cast<int>(classes); ++k)
          if (k != blank) alphabet.push_back(k);
        const Tensor lp = log_softmax(random_tensor({frames, classes}, rng, 1.5));
        for (std::size_t len = 1; len <= 3; ++len) {
          std::vector<std::size_t> digits(len, 0);
          while (true) {
            std::vector<int> label;
            for (std::size_t d : digits) label.push_back(alphabet[d]);
            const CtcResult r = ctc_loss(lp, label, blank);
            const double p = enumerate_ctc_probability(lp, label, blank);
            ++cases;
            if (p == 0.0) {
              ++infeasible;
              if (r.feasible || !std::isinf(r.loss.item())) ++mismatched_feasibility;
            } else if (!r.feasible) {
              ++mismatched_feasibility;
            } else {
              worst = std::max(worst, std::abs(r.loss.item() + std::log(p)));
            }
            std::size_t i = 0;
            while (i < len && ++digits[i] == alphabet.size()) digits[i++] = 0;
            if (i == len) break;
          }
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst < kCtcAbsTol && mismatched_feasibility == 0 && secs < kCtcBudgetSec;
  o.detail = fmt("%zu (frames<=6, symbols<=4, label<=3) cases, %zu infeasible, max |dp - enumeration| %.2e "
                 "(< %.0e), feasibility mismatches %zu, %.2f s (< %.0f s)",
                 cases, infeasible, worst, kCtcAbsTol, mismatched_feasibility, secs, kCtcBudgetSec);
  return o;
}

// ---------------------------------------------------------------------------
// 3. beam search against exhaustive search

// Frozen one-layer network over the prefix: mean token embedding, last token
// embedding and a position vector, tanh, then a linear read-out.
class FrozenToyModel : public StepScorer {
 public:
  FrozenToyModel(std::size_t vocab, std::size_t hidden, std::uint64_t seed) : vocab_(vocab), hidden_(hidden) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    auto fill = [&](std::vector<double>& v, std::size_t size) {
      v.resize(size);
      for (double& x : v) x = n(rng);
    };
    fill(embed_, vocab * hidden);
    fill(last_, vocab * hidden);
    fill(position_, 8 * hidden);
    fill(readout_, hidden * vocab);
    fill(bias_, vocab);
  }
  std::size_t vocab_size() const override { return vocab_; }
  int bos() const override { return 0; }
  int eos() const override { return static_cast<int>(vocab_) - 1; }
  std::vector<double> log_probs(std::span<const int> prefix) const override {
    std::vector<double> h(hidden_, 0.0);
    for (int t : prefix)
      for (std::size_t j = 0; j < hidden_; ++j) h[j] += embed_[t * hidden_ + j] / static_cast<double>(prefix.size());
    const std::size_t pos = std::min<std::size_t>(prefix.size(), 7);
    for (std::size_t j = 0; j < hidden_; ++j)
      h[j] = std::tanh(h[j] + last_[prefix.back() * hidden_ + j] + position_[pos * hidden_ + j]);
    std::vector<double> logits(bias_);
    for (std::size_t k = 0; k < vocab_; ++k)
      for (std::size_t j = 0; j < hidden_; ++j) logits[k] += 2.0 * h[j] * readout_[j * vocab_ + k];
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    for (double& v : logits) v -= mx + std::log(z);
    return logits;
  }

 private:
  std::size_t vocab_, hidden_;
  std::vector<double> embed_, last_, position_, readout_, bias_;
};

Hypothesis exhaustive_search(const StepScorer& scorer, std::size_t max_len, double alpha) {
  Hypothesis best;
  bool have = false;
  const int eos = scorer.eos();
  auto visit = [&](auto&& self, std::vector<int>& prefix, double logp) -> void {
    const auto lp = scorer.log_probs(prefix);
    Hypothesis h{prefix, logp + lp[static_cast<std::size_t>(eos)], 0.0, true};
    h.tokens.push_back(eos);
    h.score = h.log_prob / length_penalty(h.tokens.size() - 1, alpha);
    if (!have || h.score > best.score || (h.score == best.score && h.tokens < best.tokens)) {
      best = h;
      have = true;
    }
    if (prefix.size() >= max_len) return;
    for (int k = 0; k < static_cast<int>(scorer.vocab_size()); ++k) {
      if (k == eos) continue;
      prefix.push_back(k);
      self(self, prefix, logp + lp[static_cast<std::size_t>(k)]);
      prefix.pop_back();
    }
  };
  std::vector<int> prefix{scorer.bos()};
  visit(visit, prefix, 0.0);
  return best;
}

Outcome beam_oracle() {
  constexpr std::size_t kVocab = 3, kMaxLen = 4, kBeam = 81;
  constexpr int kModels = 20;
  std::size_t agree = 0, total = 0, distinct = 0;
  std::set<std::vector<int>> winners;
  for (double alpha : {0.0, 0.6, 1.0}) {
    for (int seed = 1; seed <= kModels; ++seed) {
      const FrozenToyModel model(kVocab, 6, 1000 + static_cast<std::uint64_t>(seed));
      const Hypothesis oracle = exhaustive_search(model, kMaxLen, alpha);
      const Hypothesis beam = beam_search(model, {kBeam, alpha, kMaxLen});
      ++total;
      if (beam.tokens == oracle.tokens && same_bits(beam.score, oracle.score)) ++agree;
      winners.insert(oracle.tokens);
    }
  }
  distinct = winners.size();
  Outcome o;
  o.pass = agree == total;
  o.detail = fmt("beam %zu vs exhaustive search, V=%zu, max_len=%zu: %zu/%zu agree over %d models x 3 length "
                 "penalties (%zu distinct optima)",
                 kBeam, kVocab, kMaxLen, agree, total, kModels, distinct);
  return o;
}

// ---------------------------------------------------------------------------
// 4. masking ratios

Outcome masking_statistics() {
  constexpr std::size_t kPositions = 10000;
  constexpr int kSeeds = 100;
  constexpr double kLambda = 0.3;
  double span_dev = 0.0, token_dev = 0.0;
  bool extremes = true;
  for (int s = 0; s < kSeeds; ++s) {
    const auto seed = static_cast<std::uint64_t>(s) * 7919u + 1u;
    span_dev = std::max(span_dev, std::abs(mask_span(kPositions, kLambda, 5, seed).masked_fraction() - kLambda));
    token_dev = std::max(token_dev, std::abs(mask_token(kPositions, kLambda, seed).masked_fraction() - kLambda));
    extremes = extremes && mask_span(kPositions, 0.0, 5, seed).masked_count() == 0 &&
               mask_token(kPositions, 0.0, seed).masked_count() == 0 &&
               mask_span(kPositions, 1.0, 5, seed).masked_count() == kPositions &&
               mask_token(kPositions, 1.0, seed).masked_count() == kPositions;
  }
  Outcome o;
  o.pass = span_dev <= kMaskFractionTol && token_dev <= kMaskFractionTol && extremes;
  o.detail = fmt("ratio 0.3 over %zu positions x %d seeds: max |span - 0.3| %.4f, max |token - 0.3| %.4f "
                 "(<= %.2f); ratios 0 and 1 exact: %s",
                 kPositions, kSeeds, span_dev, token_dev, kMaskFractionTol, extremes ? "yes" : "no");
  return o;
}

// ---------------------------------------------------------------------------
// 5. reconstruction gradient only at masked frames

Outcome masked_only_reconstruction() {
  std::mt19937_64 rng(55);
  double worst_unmasked = 0.0;
  std::size_t masked_without_grad = 0, trials = 0;
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig cfg = fatspeech::testing::tiny_config();
    cfg.feature_dim = random_extent(rng, 3, 8);
    FatModel m(cfg, rng());
    const std::size_t frames = random_extent(rng, 8, 60);
    const Tensor speech = random_tensor({frames, cfg.feature_dim}, rng);
    const MaskPlan plan = mask_span(frames, 0.3, 5, rng());
    Tensor prediction;
    {
      NoGradScope no_grad;
      auto ctx = m.context(false, 0);
      const Tensor e = m.acoustic_embed(speech, &plan, ctx);
      const Tensor out = m.reconstruct_speech(m.fuse_encode(&e, nullptr, nullptr, ctx), frames);
      prediction = Tensor(out.shape(), std::vector<double>(out.data().begin(), out.data().end()));
    }
    prediction.set_requires_grad(true);
    {
      Tape tape;
      TapeScope scope(tape);
      tape.backward(loss_speech_recon(speech, prediction, plan));
    }
    const auto g = prediction.grad_view();
    for (std::size_t t = 0; t < frames; ++t) {
      double row = 0.0;
      for (std::size_t f = 0; f < cfg.feature_dim; ++f) row = std::max(row, std::abs(g[t * cfg.feature_dim + f]));
      if (plan.indicator[t])
        masked_without_grad += row == 0.0;
      else
        worst_unmasked = std::max(worst_unmasked, row);
    }
    ++trials;
  }
  Outcome o;
  o.pass = worst_unmasked < kUnmaskedGradTol && masked_without_grad == 0;
  o.detail = fmt("%zu model reconstructions: max |grad| at unmasked frames %.1e (< %.0e), masked frames "
                 "without gradient %zu",
                 trials, worst_unmasked, kUnmaskedGradTol, masked_without_grad);
  return o;
}

// ---------------------------------------------------------------------------
// shared toy corpus for 6 and 10

struct Toy {
  Vocabulary vocab;
  ModelConfig model;
  std::vector<Batch> batches;
  std::vector<SynthUtterance> utts;
};

Toy toy_corpus() {
  Toy t;
  const SynthLanguage lang = make_synth_language(6, 8, 3);
  SynthOptions opts;
  opts.count = 16;
  opts.max_words = 3;
  t.utts = synthesize(lang, opts);
  std::vector<std::string> lines;
  for (const auto& u : t.utts) {
    lines.push_back(u.source);
    lines.push_back(u.target);
  }
  t.vocab = Vocabulary::train(lines, 36);
  t.model = fatspeech::testing::tiny_config();
  t.model.feature_dim = 8;
  t.model.vocab_size = t.vocab.size();
  BucketConfig bucket;
  bucket.batch_frames = 160;
  bucket.batch_tokens = 48;
  t.batches = filter_and_bucket(synth_examples(t.utts, t.vocab, kFlavorSXY), bucket, 1);
  return t;
}

TrainConfig toy_train(std::size_t steps) {
  TrainConfig c;
  c.steps = steps;
  c.warmup = 10;
  c.checkpoint_interval = 50;
  c.average_last = 2;
  return c;
}

// ---------------------------------------------------------------------------
// 6. logged totals

std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

Outcome loss_decomposition() {
  const Toy t = toy_corpus();
  TrainConfig tc = toy_train(100);
  tc.weights = LossWeights{1.0, 0.8, 0.6, 0.3};
  const auto dir = scratch("decomposition");
  FatModel model(t.model, 3);
  Trainer trainer(model, tc, TrainMode::kFinetune, BatchSchedule::finetuning(t.batches, 3), t.vocab.hash());
  trainer.run(dir.string());

  std::ifstream log(dir / "train_log.csv");
  std::string line;
  std::getline(log, line);
  const auto header = split_csv_row(line);
  std::size_t rows = 0;
  std::set<std::uint64_t> steps;
  double worst = 0.0;
  while (std::getline(log, line)) {
    const auto f = split_csv_row(line);
    if (f.size() != header.size()) return {false, "malformed log row: " + line};
    auto col = [&](const char* name) {
      const auto it = std::find(header.begin(), header.end(), name);
      return std::strtod(f[static_cast<std::size_t>(it - header.begin())].c_str(), nullptr);
    };
    const double recomputed = tc.weights.st * col("st") + tc.weights.mt * col("mt") +
                              tc.weights.mlm * (col("speech") + col("source") + col("target")) +
                              tc.weights.ctc * col("ctc");
    worst = std::max(worst, std::abs(col("total") - recomputed));
    steps.insert(std::strtoull(f[0].c_str(), nullptr, 10));
    ++rows;
  }
  std::filesystem::remove_all(dir);
  Outcome o;
  o.pass = steps.size() == tc.steps && worst <= kTotalTol;
  o.detail = fmt("%zu logged rows over %zu steps, max |total - weighted sum of terms| %.2e (<= %.0e)", rows,
                 steps.size(), worst, kTotalTol);
  return o;
}

// ---------------------------------------------------------------------------
// 7. overfitting 32 triplets

Outcome toy_overfit() {
  const auto t0 = Clock::now();
  const SynthLanguage lang = make_synth_language(8, 16, 1);
  SynthOptions so;
  so.count = 32;
  so.seed = 7;
  const auto utts = synthesize(lang, so);
  std::vector<std::string> lines;
  std::size_t max_frames = 0;
  for (const auto& u : utts) {
    lines.push_back(u.source);
    lines.push_back(u.target);
    max_frames = std::max(max_frames, u.speech.frames);
  }
  const Vocabulary vocab = Vocabulary::train(lines, 48);

  ModelConfig mc;
  mc.d_model = 32;
  mc.heads = 2;
  mc.acoustic_layers = 1;
  mc.shared_layers = 2;
  mc.decoder_layers = 1;
  mc.ffn_dim = 64;
  mc.feature_dim = 16;
  mc.vocab_size = vocab.size();
  mc.conv_channels = 4;
  mc.dropout = 0.0;
  FatModel model(mc, 1);

  TrainConfig tc;
  tc.steps = kOverfitSteps;
  tc.warmup = 100;
  tc.lr_factor = 1.0;
  tc.seed = 1;
  tc.bucket.batch_frames = 600;
  const auto batches = filter_and_bucket(synth_examples(utts, vocab, kFlavorSXY), tc.bucket, 1);
  Trainer trainer(model, tc, TrainMode::kFinetune, BatchSchedule::finetuning(batches, 1), vocab.hash());

  double accuracy = teacher_forced_accuracy(model, batches).value();
  std::size_t reached = 0;
  for (std::size_t s = 1; s <= kOverfitSteps && !reached; ++s) {
    trainer.train_step();
    if (s % 25 == 0) {
      accuracy = teacher_forced_accuracy(model, batches).value();
      if (accuracy >= kOverfitAccuracy) reached = s;
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = reached > 0 && secs < kOverfitBudgetSec && max_frames <= 120 && vocab.size() <= 50;
  o.detail = fmt("32 triplets (max %zu frames, vocab %zu): teacher-forced accuracy %.4f %s step %zu "
                 "(>= %.2f within %zu), %.1f s (< %.0f s)",
                 max_frames, vocab.size(), accuracy, reached ? "at" : "after", reached ? reached : kOverfitSteps,
                 kOverfitAccuracy, kOverfitSteps, secs, kOverfitBudgetSec);
  return o;
}

// ---------------------------------------------------------------------------
// 8. pretraining helps fine-tuning

Outcome pretraining_benefit() {
  const auto t0 = Clock::now();
  const SynthLanguage lang = make_synth_language(12, 16, 1);
  SynthOptions po, fo, dvo;
  po.count = 256;
  po.seed = 100;
  po.id_prefix = "pre";
  fo.count = 64;
  fo.seed = 200;
  fo.id_prefix = "ft";
  dvo.count = 32;
  dvo.seed = 300;
  dvo.id_prefix = "dev";
  const auto pre = synthesize(lang, po), ft = synthesize(lang, fo), dev = synthesize(lang, dvo);
  std::vector<std::string> lines;
  for (const auto* set : {&pre, &ft})
    for (const auto& u : *set) {
      lines.push_back(u.source);
      lines.push_back(u.target);
    }
  const Vocabulary vocab = Vocabulary::train(lines, 50);

  ModelConfig mc;
  mc.d_model = 32;
  mc.heads = 2;
  mc.acoustic_layers = 1;
  mc.shared_layers = 2;
  mc.decoder_layers = 1;
  mc.ffn_dim = 64;
  mc.feature_dim = 16;
  mc.vocab_size = vocab.size();
  mc.conv_channels = 16;
  mc.dropout = 0.1;

  TrainConfig base;
  base.warmup = 100;
  base.lr_factor = 1.0;
  base.bucket.batch_frames = 1200;
  const auto pre_b = filter_and_bucket(synth_examples(pre, vocab, kSpeechBit | kSourceBit), base.bucket, 1);
  const auto ft_b = filter_and_bucket(synth_examples(ft, vocab, kFlavorSXY), base.bucket, 1);
  const auto dev_b = filter_and_bucket(synth_examples(dev, vocab, kFlavorSXY), base.bucket, 1);

  auto steps_to_threshold = [&](FatModel& m, std::uint64_t seed) {
    TrainConfig fc = base;
    fc.steps = kFinetuneSteps;
    fc.seed = seed;
    Trainer tr(m, fc, TrainMode::kFinetune, BatchSchedule::finetuning(ft_b, seed), vocab.hash());
    for (std::size_t s = 1; s <= kFinetuneSteps; ++s) {
      tr.train_step();
      if (s % kDevInterval == 0 && tr.dev_loss(dev_b) <= kDevLossThreshold) return s;
    }
    return kFinetuneSteps + 1;
  };

  int wins = 0;
  std::string per_seed;
  for (int seed = 1; seed <= kBenefitSeeds; ++seed) {
    const auto s = static_cast<std::uint64_t>(seed);
    TrainConfig pc = base;
    pc.steps = kPretrainSteps;
    pc.seed = s;
    FatModel pm(mc, s);
    Trainer pt(pm, pc, TrainMode::kPretrain, BatchSchedule::pretraining(pre_b, s), vocab.hash());
    for (std::size_t i = 0; i < kPretrainSteps; ++i) pt.train_step();
    FatModel init = init_fatst_from_fatmlm(pt.checkpoint(), mc, s);
    FatModel fresh(mc, s);
    const std::size_t with = steps_to_threshold(init, s), without = steps_to_threshold(fresh, s);
    wins += with < without;
    auto show = [](std::size_t v) { return v > kFinetuneSteps ? std::string(">300") : std::to_string(v); };
    per_seed += fmt("%s%s/%s", seed > 1 ? " " : "", show(with).c_str(), show(without).c_str());
  }
  Outcome o;
  o.pass = wins >= kBenefitRequired;
  o.detail = fmt("steps to dev loss <= %.2f, pretrained/random per seed [%s]: pretrained faster in %d/%d "
                 "seeds (>= %d), %.0f s",
                 kDevLossThreshold, per_seed.c_str(), wins, kBenefitSeeds, kBenefitRequired, seconds_since(t0));
  return o;
}

// ---------------------------------------------------------------------------
// 9. BLEU

Outcome bleu_correctness() {
  struct Hand {
    const char* hyp;
    const char* ref;
    bool smooth;
    double expected;
  };
  // Worked by hand:
  //  clipped unigram 1/4, no bigram match -> 0
  //  all orders exact, brevity exp(1 - 5/4) -> 100 exp(-1/4)
  //  precisions 5/6, 3/5, 2/4, 1/3 -> 100 (1/12)^(1/4)
  //  smoothed: 1/4, 1/(2*3), 1/(4*2), 1/(8*1) -> 100 (1/1536)^(1/4)
  const Hand cases[] = {
      {"the the the the", "the cat", false, 0.0},
      {"a b c d", "a b c d e", false, 100.0 * std::exp(-0.25)},
      {"the cat sat on the mat", "the cat sat on a mat", false, 100.0 * std::pow(1.0 / 12.0, 0.25)},
      {"the the the the", "the cat", true, 100.0 * std::pow(1.0 / 1536.0, 0.25)},
  };
  double worst_hand = 0.0;
  for (const auto& c : cases)
    worst_hand = std::max(worst_hand, std::abs(corpus_bleu({c.hyp}, {c.ref}, c.smooth).bleu - c.expected));

  std::mt19937_64 rng(909);
  std::uniform_int_distribution<int> word(0, 30), len(1, 25), count(1, 20);
  double worst_self = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::string> corpus;
    for (int i = count(rng); i > 0; --i) {
      std::string s;
      for (int k = len(rng); k > 0; --k) s += (s.empty() ? "w" : " w") + std::to_string(word(rng));
      corpus.push_back(s);
    }
    worst_self = std::max(worst_self, std::abs(corpus_bleu(corpus, corpus).bleu - 100.0));
  }
  Outcome o;
  o.pass = worst_hand <= kBleuTol && worst_self <= kBleuTol;
  o.detail = fmt("%zu hand examples max error %.1e, self-BLEU over 100 random corpora max |BLEU - 100| %.1e "
                 "(<= %.0e)",
                 std::size(cases), worst_hand, worst_self, kBleuTol);
  return o;
}

// ---------------------------------------------------------------------------
// 10. reproducibility

Outcome reproducibility() {
  const Toy t = toy_corpus();
  std::vector<std::string> problems;

  double step10[2];
  std::vector<Hypothesis> outputs[2];
  for (int run = 0; run < 2; ++run) {
    FatModel model(t.model, 11);
    Trainer trainer(model, toy_train(10), TrainMode::kFinetune, BatchSchedule::finetuning(t.batches, 11), 0);
    StepReport r;
    for (int i = 0; i < 10; ++i) r = trainer.train_step();
    step10[run] = r.loss.total;
    for (std::size_t i = 0; i < 6; ++i) {
      const Tensor speech = t.utts[i].speech.to_tensor();
      outputs[run].push_back(translate_speech(model, speech, {3, 0.6, default_max_len(speech.dim(0), true)}));
    }
  }
  const bool same_loss = same_bits(step10[0], step10[1]);
  bool same_outputs = true;
  for (std::size_t i = 0; i < outputs[0].size(); ++i)
    same_outputs = same_outputs && outputs[0][i].tokens == outputs[1][i].tokens &&
                   same_bits(outputs[0][i].score, outputs[1][i].score);

  bool resume_exact = true;
  for (TrainMode mode : {TrainMode::kPretrain, TrainMode::kFinetune}) {
    auto schedule = [&] {
      return mode == TrainMode::kPretrain ? BatchSchedule::pretraining(t.batches, 5)
                                          : BatchSchedule::finetuning(t.batches, 5);
    };
    TrainConfig tc = toy_train(8);
    tc.checkpoint_interval = 5;
    const auto dir = scratch(std::string("resume_") + train_mode_name(mode));
    FatModel straight(t.model, 2);
    Trainer a(straight, tc, mode, schedule(), t.vocab.hash());
    const TrainResult full = a.run(dir.string());
    FatModel resumed(t.model, 77);
    Trainer b(resumed, tc, mode, schedule(), t.vocab.hash());
    b.resume(load_checkpoint((dir / "checkpoint_5.fatc").string()));
    const StepReport next = b.train_step();
    resume_exact = resume_exact && next.step == 6 && same_bits(next.loss.total, full.history[5].loss.total);
    std::filesystem::remove_all(dir);
  }
  Outcome o;
  o.pass = same_loss && same_outputs && resume_exact;
  o.detail = fmt("step-10 loss bitwise equal: %s (%.17g); translations identical: %s; resumed step 6 equals "
                 "uninterrupted run in both modes: %s",
                 same_loss ? "yes" : "no", step10[0], same_outputs ? "yes" : "no", resume_exact ? "yes" : "no");
  return o;
}

// ---------------------------------------------------------------------------
// 11. shapes

Outcome shape_contract() {
  ModelConfig cfg = fatspeech::testing::tiny_config();
  cfg.feature_dim = 80;
  cfg.conv_channels = 2;
  FatModel m(cfg, 4);
  std::mt19937_64 rng(1234);
  std::vector<std::size_t> lengths = {4, 5, 6, 7, 8, 9, 2999, 3000};
  while (lengths.size() < 40) lengths.push_back(random_extent(rng, 4, 3000));
  std::size_t bad_downsample = 0, bad_recon = 0;
  for (std::size_t frames : lengths) {
    NoGradScope no_grad;
    auto ctx = m.context(false, 0);
    const Tensor e = m.acoustic_embed(random_tensor({frames, cfg.feature_dim}, rng), nullptr, ctx);
    if (e.dim(0) != (frames + 3) / 4 || e.dim(1) != cfg.d_model) ++bad_downsample;
    const Tensor r = m.reconstruct_speech(m.fuse_encode(&e, nullptr, nullptr, ctx), frames);
    if (r.shape() != Shape{frames, cfg.feature_dim}) ++bad_recon;
  }
  Outcome o;
  o.pass = bad_downsample == 0 && bad_recon == 0;
  o.detail = fmt("%zu lengths in [4, 3000]: encoder length != ceil(T/4) in %zu, reconstruction != T x %zu in %zu",
                 lengths.size(), bad_downsample, cfg.feature_dim, bad_recon);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, Outcome (*)()>> criteria = {
      {"finite-difference gradients", gradient_suite},
      {"ctc against path enumeration", ctc_oracle},
      {"beam search against exhaustive search", beam_oracle},
      {"masking ratios", masking_statistics},
      {"reconstruction loss ignores unmasked frames", masked_only_reconstruction},
      {"logged total equals weighted terms", loss_decomposition},
      {"toy corpus overfit", toy_overfit},
      {"pretraining speeds up fine-tuning", pretraining_benefit},
      {"BLEU correctness", bleu_correctness},
      {"reproducibility", reproducibility},
      {"shape contract", shape_contract},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::atoi(argv[i])));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s criterion %zu (%s): %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
