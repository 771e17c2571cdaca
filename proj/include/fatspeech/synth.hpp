#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fatspeech/corpus.hpp"
#include "fatspeech/features.hpp"

namespace fatspeech {

// A toy language pair: each source word has a fixed spectral template and a
// one-to-one target word.
struct SynthLanguage {
  std::vector<std::string> source_words;
  std::vector<std::string> target_words;
  std::vector<Spectrogram> templates;
  std::size_t feature_dim = 0;
};

// Up to 18 words per side.
SynthLanguage make_synth_language(std::size_t words, std::size_t feature_dim, std::uint64_t seed);

struct SynthOptions {
  std::size_t count = 32;
  std::size_t min_words = 2;
  std::size_t max_words = 5;
  double noise = 0.1;
  std::uint64_t seed = 1;
  std::string id_prefix = "utt";
};

struct SynthUtterance {
  std::string id;
  Spectrogram speech;
  std::string source;  // transcription
  std::string target;  // word-by-word translation
};

// Random sentences rendered by concatenating word templates with jittered
// durations, short silences and Gaussian noise.
std::vector<SynthUtterance> synthesize(const SynthLanguage& lang, const SynthOptions& opts);

// In-memory examples restricted to `flavor`, uids numbered from uid_base.
std::vector<MultimodalExample> synth_examples(const std::vector<SynthUtterance>& utts, const Vocabulary& vocab,
                                              Flavor flavor, std::uint64_t uid_base = 0);

// Writes feats/<id>.fatf under dir and a JSON-lines manifest with the fields
// of `flavor`. Returns the manifest path.
std::string write_synth_manifest(const std::string& dir, const std::string& name,
                                 const std::vector<SynthUtterance>& utts, Flavor flavor);

}  // namespace fatspeech
