#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fatspeech/features.hpp"

namespace fatspeech {

enum class Language { kSource, kTarget };

struct TokenSequence {
  std::vector<int> ids;
  Language language = Language::kSource;
  std::string text;

  std::size_t size() const { return ids.size(); }
};

// Word-boundary marker prefixed to every word before segmentation.
inline constexpr std::string_view kWordMarker = "\xE2\x96\x81";  // U+2581

// Splits UTF-8 text into code points (invalid bytes become single-byte units).
std::vector<std::string> utf8_chars(std::string_view text);

// Joint byte-pair-encoding vocabulary. Ids 0..4 are reserved, then the
// character alphabet in sorted order, then one id per merge in merge order.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kMask = 4;
  static constexpr std::size_t kNumReserved = 5;

  using Merge = std::pair<std::string, std::string>;

  Vocabulary() = default;
  Vocabulary(std::vector<std::string> alphabet, std::vector<Merge> merges);

  // Greedy highest-count pair merges until `vocab_size` pieces exist or no
  // pair remains; ties go to the lexicographically smallest merged piece.
  static Vocabulary train(const std::vector<std::string>& lines, std::size_t vocab_size);

  TokenSequence encode(std::string_view text, Language language = Language::kSource) const;
  // Skips pad/bos/eos; unknown pieces render as "<unk>".
  std::string decode(std::span<const int> ids) const;

  std::size_t size() const { return pieces_.size(); }
  const std::string& piece(int id) const;
  std::optional<int> id_of(const std::string& piece) const;
  const std::vector<std::string>& alphabet() const { return alphabet_; }
  const std::vector<Merge>& merges() const { return merges_; }

  // Feature normalization statistics travel with the vocabulary.
  FeatureStats feature_stats;

  std::string serialize() const;
  static Vocabulary parse(const std::string& text);
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);
  // FNV-1a over the serialized form.
  std::uint64_t hash() const;

 private:
  std::vector<int> encode_word(const std::vector<std::string>& chars) const;

  std::vector<std::string> alphabet_;
  std::vector<Merge> merges_;
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, int> piece_ids_;
  std::unordered_map<std::string, std::size_t> merge_rank_;
};

std::vector<std::string> split_words(std::string_view text);

}  // namespace fatspeech
