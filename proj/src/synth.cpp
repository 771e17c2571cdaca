#include "fatspeech/synth.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

#include "fatspeech/errors.hpp"
#include "fatspeech/masking.hpp"

namespace fatspeech {

namespace {

std::vector<std::string> syllables(const std::string& consonants, const std::string& vowels) {
  std::vector<std::string> out;
  for (char c : consonants)
    for (char v : vowels) out.push_back(std::string{c, v});
  return out;
}

}  // namespace

SynthLanguage make_synth_language(std::size_t words, std::size_t feature_dim, std::uint64_t seed) {
  auto src = syllables("bdgkml", "aeo");
  auto tgt = syllables("ptsnrv", "iuy");
  if (words == 0 || words > src.size()) throw UsageError("synthetic vocabulary must have 1..18 words");
  if (feature_dim == 0) throw UsageError("feature_dim must be positive");
  std::mt19937_64 rng(mix_seed(seed, 0x5a17));
  std::shuffle(src.begin(), src.end(), rng);
  std::shuffle(tgt.begin(), tgt.end(), rng);
  SynthLanguage lang;
  lang.source_words.assign(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(words));
  lang.target_words.assign(tgt.begin(), tgt.begin() + static_cast<std::ptrdiff_t>(words));
  lang.feature_dim = feature_dim;
  std::uniform_int_distribution<std::size_t> len(4, 8);
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t w = 0; w < words; ++w) {
    Spectrogram t;
    t.frames = len(rng);
    t.dim = feature_dim;
    t.values.resize(t.frames * t.dim);
    // A random walk over frames gives each word a smooth spectral contour.
    std::vector<double> frame(feature_dim);
    for (double& x : frame) x = n(rng);
    for (std::size_t i = 0; i < t.frames; ++i) {
      for (std::size_t f = 0; f < feature_dim; ++f) {
        frame[f] = 0.7 * frame[f] + 0.5 * n(rng);
        t.values[i * feature_dim + f] = static_cast<float>(frame[f]);
      }
    }
    lang.templates.push_back(std::move(t));
  }
  return lang;
}

std::vector<SynthUtterance> synthesize(const SynthLanguage& lang, const SynthOptions& opts) {
  if (opts.min_words == 0 || opts.min_words > opts.max_words) throw UsageError("invalid synthetic sentence lengths");
  std::mt19937_64 rng(mix_seed(opts.seed, 0x0771));
  std::uniform_int_distribution<std::size_t> n_words(opts.min_words, opts.max_words);
  std::uniform_int_distribution<std::size_t> pick(0, lang.source_words.size() - 1);
  std::uniform_int_distribution<int> gap(1, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, opts.noise);
  const std::size_t d = lang.feature_dim;
  std::vector<SynthUtterance> out;
  for (std::size_t u = 0; u < opts.count; ++u) {
    SynthUtterance utt;
    utt.id = opts.id_prefix + std::to_string(u);
    std::vector<std::vector<double>> frames;
    auto silence = [&] {
      for (int g = gap(rng); g > 0; --g) frames.emplace_back(d, -2.0);
    };
    silence();
    const std::size_t count = n_words(rng);
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t w = pick(rng);
      if (k) {
        utt.source += ' ';
        utt.target += ' ';
      }
      utt.source += lang.source_words[w];
      utt.target += lang.target_words[w];
      const Spectrogram& t = lang.templates[w];
      for (std::size_t i = 0; i < t.frames; ++i) {
        // Duration jitter: occasionally hold a frame for two steps.
        const int reps = unit(rng) < 0.2 ? 2 : 1;
        for (int r = 0; r < reps; ++r)
          frames.emplace_back(t.values.begin() + static_cast<std::ptrdiff_t>(i * d),
                              t.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
      }
      silence();
    }
    utt.speech.frames = frames.size();
    utt.speech.dim = d;
    utt.speech.values.reserve(frames.size() * d);
    for (const auto& f : frames)
      for (double x : f) utt.speech.values.push_back(static_cast<float>(x + noise(rng)));
    out.push_back(std::move(utt));
  }
  return out;
}

std::vector<MultimodalExample> synth_examples(const std::vector<SynthUtterance>& utts, const Vocabulary& vocab,
                                              Flavor flavor, std::uint64_t uid_base) {
  std::vector<MultimodalExample> out;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    MultimodalExample ex;
    ex.id = utts[i].id;
    ex.uid = uid_base + i;
    if (flavor_has(flavor, kSpeechBit)) ex.speech = std::make_shared<const Spectrogram>(utts[i].speech);
    if (flavor_has(flavor, kSourceBit))
      ex.transcription = std::make_shared<const TokenSequence>(vocab.encode(utts[i].source, Language::kSource));
    if (flavor_has(flavor, kTargetBit))
      ex.translation = std::make_shared<const TokenSequence>(vocab.encode(utts[i].target, Language::kTarget));
    out.push_back(std::move(ex));
  }
  return out;
}

std::string write_synth_manifest(const std::string& dir, const std::string& name,
                                 const std::vector<SynthUtterance>& utts, Flavor flavor) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  fs::create_directories(root / "feats");
  const fs::path manifest = root / (name + ".jsonl");
  std::ofstream os(manifest);
  if (!os) throw DataError("cannot write " + manifest.string());
  for (const auto& u : utts) {
    nlohmann::ordered_json j;
    j["id"] = u.id;
    if (flavor_has(flavor, kSpeechBit)) {
      const std::string rel = "feats/" + u.id + ".fatf";
      save_features((root / rel).string(), u.speech);
      j["feats"] = rel;
    }
    if (flavor_has(flavor, kSourceBit)) j["text_src"] = u.source;
    if (flavor_has(flavor, kTargetBit)) j["text_tgt"] = u.target;
    os << j.dump() << '\n';
  }
  return manifest.string();
}

}  // namespace fatspeech
