#include "fatspeech/masking.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace fatspeech {

namespace {

void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("mask ratio must be in [0, 1]");
}

}  // namespace

std::size_t MaskPlan::masked_count() const {
  return static_cast<std::size_t>(std::count(indicator.begin(), indicator.end(), 1));
}

double MaskPlan::masked_fraction() const {
  return indicator.empty() ? 0.0
                           : static_cast<double>(masked_count()) / static_cast<double>(indicator.size());
}

std::vector<std::size_t> MaskPlan::masked_positions() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < indicator.size(); ++i)
    if (indicator[i]) out.push_back(i);
  return out;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined word
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

MaskPlan mask_span(std::size_t frames, double lambda, std::size_t span_len, std::uint64_t seed) {
  check_lambda(lambda);
  if (span_len < 1) throw std::invalid_argument("mask_span: span_len must be >= 1");
  MaskPlan plan;
  plan.indicator.assign(frames, 0);
  plan.lambda = lambda;
  plan.seed = seed;
  const auto target = static_cast<std::size_t>(std::ceil(lambda * static_cast<double>(frames) - 1e-9));
  // Unmasked frames with O(1) removal.
  std::vector<std::size_t> free(frames), where(frames);
  for (std::size_t i = 0; i < frames; ++i) free[i] = where[i] = i;
  auto take = [&](std::size_t frame) {
    const std::size_t at = where[frame];
    const std::size_t last = free.back();
    free[at] = last;
    where[last] = at;
    free.pop_back();
    plan.indicator[frame] = 1;
  };
  std::mt19937_64 rng(seed);
  std::size_t masked = 0;
  while (masked < target && !free.empty()) {
    const std::size_t start = free[std::uniform_int_distribution<std::size_t>(0, free.size() - 1)(rng)];
    std::size_t end = start;
    while (end < frames && end - start < span_len && !plan.indicator[end]) {
      take(end);
      ++end;
    }
    masked += end - start;
    plan.spans.emplace_back(start, end);
  }
  std::sort(plan.spans.begin(), plan.spans.end());
  return plan;
}

MaskPlan mask_token(std::size_t length, double lambda, std::uint64_t seed) {
  check_lambda(lambda);
  MaskPlan plan;
  plan.indicator.assign(length, 0);
  plan.lambda = lambda;
  plan.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& m : plan.indicator) m = u(rng) < lambda ? 1 : 0;
  return plan;
}

}  // namespace fatspeech
