#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "fatspeech/features.hpp"
#include "fatspeech/subword.hpp"

namespace fatspeech {

// Subset of {speech, transcription, translation} as a bitmask.
enum Modality : unsigned { kSpeechBit = 1u, kSourceBit = 2u, kTargetBit = 4u };
using Flavor = unsigned;
constexpr Flavor kFlavorSXY = kSpeechBit | kSourceBit | kTargetBit;

std::string flavor_name(Flavor f);  // e.g. "s,x,y"
bool flavor_has(Flavor f, Modality m);

struct MultimodalExample {
  std::string id;
  std::uint64_t uid = 0;  // position in the loaded corpus, used to derive mask seeds
  std::shared_ptr<const Spectrogram> speech;
  std::shared_ptr<const TokenSequence> transcription;  // language: source
  std::shared_ptr<const TokenSequence> translation;    // language: target

  Flavor flavor() const;
  // Frames when speech is present, otherwise the longest token sequence.
  std::size_t length() const;
  // Same example restricted to a sub-flavor; modalities stay shared.
  MultimodalExample view(Flavor f) const;
};

struct Batch {
  Flavor flavor = 0;
  std::vector<MultimodalExample> examples;
  std::vector<std::size_t> lengths;

  std::size_t size() const { return examples.size(); }
  std::size_t max_length() const;
  // Cost of the batch padded to its longest member.
  std::size_t padded_size() const { return max_length() * size(); }
  Batch view(Flavor f) const;
};

struct ManifestOptions {
  std::size_t feature_dim = 80;
  bool normalize = true;  // apply the vocabulary's feature statistics when present
};

// JSON lines with optional fields audio, feats, text_src, text_tgt, id.
// Relative paths resolve against the manifest's directory. Errors name the
// offending line.
std::vector<MultimodalExample> load_manifest(const std::string& path, const Vocabulary& vocab,
                                             const ManifestOptions& opts = {});
// Raw text fields, for vocabulary training.
std::vector<std::string> manifest_texts(const std::string& path);
// Unnormalized features of every speech record, for corpus statistics.
std::vector<Spectrogram> manifest_spectrograms(const std::string& path, std::size_t feature_dim);

struct FilterReport {
  std::size_t kept = 0;
  std::size_t dropped = 0;
  std::vector<std::string> dropped_ids;
};

// Drops examples whose speech exceeds max_frames.
std::vector<MultimodalExample> filter_examples(const std::vector<MultimodalExample>& examples,
                                               std::size_t max_frames, FilterReport* report = nullptr);

struct BucketConfig {
  std::size_t max_frames = 3000;
  std::size_t batch_frames = 6000;  // padded frame budget for speech batches
  std::size_t batch_tokens = 2000;  // padded token budget for text-only batches
};

// Filters, groups by flavor, sorts by length and packs greedily under the
// padded budget. Batch order is shuffled with `seed`.
std::vector<Batch> filter_and_bucket(const std::vector<MultimodalExample>& examples, const BucketConfig& cfg,
                                     std::uint64_t seed, FilterReport* report = nullptr);

enum class Objective { kST, kMT, kFatMlm };
const char* objective_name(Objective o);

struct ScheduledBatch {
  Objective objective;
  Batch batch;
};

// Endless interleaving of objective streams. Each stream walks its batches in
// a seeded order reshuffled per pass.
class BatchSchedule {
 public:
  // One FAT-MLM stream per flavor present.
  static BatchSchedule pretraining(const std::vector<Batch>& batches, std::uint64_t seed,
                                   bool proportional = false);
  // ST from batches with {s,y}, MT from {x,y}, FAT-MLM from {s,x}; a triplet
  // batch feeds all three as views sharing the same tensors.
  static BatchSchedule finetuning(const std::vector<Batch>& batches, std::uint64_t seed,
                                  bool proportional = false);

  ScheduledBatch next();
  // Advances as if next() were called n times.
  void skip(std::size_t n);
  std::size_t stream_count() const { return streams_.size(); }
  std::vector<std::string> stream_names() const;
  bool proportional() const { return proportional_; }

 private:
  struct Stream {
    std::string name;
    Objective objective;
    std::vector<Batch> batches;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    std::size_t pass = 0;
    std::size_t examples = 0;
  };

  BatchSchedule(std::vector<Stream> streams, std::uint64_t seed, bool proportional);
  void reshuffle(Stream& s);
  Stream& advance();

  std::vector<Stream> streams_;
  std::uint64_t seed_;
  bool proportional_;
  std::size_t turn_ = 0;
  std::mt19937_64 picker_;
};

}  // namespace fatspeech
