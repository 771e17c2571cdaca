#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

namespace fatspeech {

struct MaskConfig {
  double lambda = 0.3;
  std::size_t span_len = 5;
};

struct MaskPlan {
  std::vector<std::uint8_t> indicator;  // 1 = masked
  double lambda = 0.0;
  std::uint64_t seed = 0;
  // Drawn spans as [begin, end); empty for token plans.
  std::vector<std::pair<std::size_t, std::size_t>> spans;

  std::size_t size() const { return indicator.size(); }
  std::size_t masked_count() const;
  double masked_fraction() const;
  std::vector<std::size_t> masked_positions() const;
};

// Draws disjoint spans of at most `span_len` frames until at least
// ceil(lambda * frames) frames are masked. A span starts at a random unmasked
// frame and stops early at an already-masked frame or the sequence end.
MaskPlan mask_span(std::size_t frames, double lambda, std::size_t span_len, std::uint64_t seed);

// Masks each position independently with probability lambda.
MaskPlan mask_token(std::size_t length, double lambda, std::uint64_t seed);

// Stateless 64-bit mixer used to derive per-example, per-modality seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace fatspeech
