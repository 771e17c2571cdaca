#pragma once

#include <string>
#include <vector>

#include "fatspeech/layers.hpp"
#include "fatspeech/model.hpp"

namespace fatspeech {

// One head's attention restricted to a (query segment, key segment) block,
// with every row renormalized to sum to 1.
struct AttentionMap {
  std::size_t layer = 0;
  std::size_t head = 0;
  Segment query = Segment::kSpeech;
  Segment key = Segment::kSpeech;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> weights;  // rows x cols

  double at(std::size_t r, std::size_t c) const { return weights[r * cols + c]; }
  // e.g. "layer1_head0_speech-text"
  std::string stem() const;
};

// Blocks speech->speech, text->text and speech->text for the requested layers
// and heads (empty selects all). Pairs whose segments are absent are skipped.
std::vector<AttentionMap> extract_attention(const FusedEncoderStates& states, const nn::AttentionRecorder& rec,
                                            const std::vector<std::size_t>& layers,
                                            const std::vector<std::size_t>& heads);

// Mean per-row mass within a band around the rescaled diagonal; the band half
// width is max(1, cols / 10).
double diagonal_score(const AttentionMap& map);

void write_attention_csv(const std::string& path, const AttentionMap& map);
// Binary 8-bit PGM; each row scaled by its own maximum.
void write_attention_pgm(const std::string& path, const AttentionMap& map);

}  // namespace fatspeech
