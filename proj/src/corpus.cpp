#include "fatspeech/corpus.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

#include "fatspeech/errors.hpp"
#include "fatspeech/masking.hpp"

namespace fatspeech {

namespace {

using nlohmann::json;

struct RawRecord {
  std::size_t line = 0;
  std::string id;
  std::string audio, feats, text_src, text_tgt;
  bool has_src = false, has_tgt = false;
};

std::string where(const std::string& path, std::size_t line) { return path + ":" + std::to_string(line) + ": "; }

std::vector<RawRecord> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  std::vector<RawRecord> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw DataError(where(path, line) + "invalid JSON: " + e.what());
    }
    if (!j.is_object()) throw DataError(where(path, line) + "record must be a JSON object");
    RawRecord r;
    r.line = line;
    for (const auto& [key, value] : j.items()) {
      if (!value.is_string()) throw DataError(where(path, line) + "field '" + key + "' must be a string");
      const std::string v = value.get<std::string>();
      if (key == "id") {
        r.id = v;
      } else if (key == "audio") {
        r.audio = v;
      } else if (key == "feats") {
        r.feats = v;
      } else if (key == "text_src") {
        r.text_src = v;
        r.has_src = true;
      } else if (key == "text_tgt") {
        r.text_tgt = v;
        r.has_tgt = true;
      } else {
        throw DataError(where(path, line) + "unknown field '" + key + "'");
      }
    }
    if (!r.audio.empty() && !r.feats.empty())
      throw DataError(where(path, line) + "record has both audio and feats");
    if (r.audio.empty() && r.feats.empty() && !r.has_src && !r.has_tgt)
      throw DataError(where(path, line) + "record has no speech and no text");
    if (r.id.empty()) r.id = std::filesystem::path(path).stem().string() + "-" + std::to_string(line);
    out.push_back(std::move(r));
  }
  return out;
}

std::string resolve(const std::string& manifest, const std::string& file) {
  const std::filesystem::path p(file);
  if (p.is_absolute()) return file;
  return (std::filesystem::path(manifest).parent_path() / p).string();
}

Spectrogram read_speech(const std::string& manifest, const RawRecord& r, std::size_t feature_dim) {
  try {
    if (!r.feats.empty()) return load_features(resolve(manifest, r.feats), feature_dim);
    const Waveform w = read_wav(resolve(manifest, r.audio));
    return log_mel(frame_signal(w), feature_dim, w.sample_rate);
  } catch (const std::exception& e) {
    throw DataError(where(manifest, r.line) + e.what());
  }
}

}  // namespace

std::string flavor_name(Flavor f) {
  std::string out;
  auto add = [&](Modality m, const char* n) {
    if (!(f & m)) return;
    if (!out.empty()) out += ",";
    out += n;
  };
  add(kSpeechBit, "s");
  add(kSourceBit, "x");
  add(kTargetBit, "y");
  return out.empty() ? "none" : out;
}

bool flavor_has(Flavor f, Modality m) { return (f & m) != 0; }

Flavor MultimodalExample::flavor() const {
  return (speech ? kSpeechBit : 0u) | (transcription ? kSourceBit : 0u) | (translation ? kTargetBit : 0u);
}

std::size_t MultimodalExample::length() const {
  if (speech) return speech->frames;
  return std::max(transcription ? transcription->size() : 0, translation ? translation->size() : 0);
}

MultimodalExample MultimodalExample::view(Flavor f) const {
  if ((flavor() & f) != f) throw DataError("example " + id + " lacks modalities for view " + flavor_name(f));
  MultimodalExample v = *this;
  if (!(f & kSpeechBit)) v.speech.reset();
  if (!(f & kSourceBit)) v.transcription.reset();
  if (!(f & kTargetBit)) v.translation.reset();
  return v;
}

std::size_t Batch::max_length() const {
  return lengths.empty() ? 0 : *std::max_element(lengths.begin(), lengths.end());
}

Batch Batch::view(Flavor f) const {
  Batch b;
  b.flavor = f;
  for (const auto& e : examples) {
    b.examples.push_back(e.view(f));
    b.lengths.push_back(b.examples.back().length());
  }
  return b;
}

std::vector<MultimodalExample> load_manifest(const std::string& path, const Vocabulary& vocab,
                                             const ManifestOptions& opts) {
  std::vector<MultimodalExample> out;
  for (const RawRecord& r : read_records(path)) {
    MultimodalExample ex;
    ex.id = r.id;
    ex.uid = out.size();
    if (!r.audio.empty() || !r.feats.empty()) {
      Spectrogram s = read_speech(path, r, opts.feature_dim);
      if (opts.normalize) {
        try {
          normalize_features(s, vocab.feature_stats);
        } catch (const std::exception& e) {
          throw DataError(where(path, r.line) + e.what());
        }
      }
      ex.speech = std::make_shared<const Spectrogram>(std::move(s));
    }
    if (r.has_src) ex.transcription = std::make_shared<const TokenSequence>(vocab.encode(r.text_src, Language::kSource));
    if (r.has_tgt) ex.translation = std::make_shared<const TokenSequence>(vocab.encode(r.text_tgt, Language::kTarget));
    if ((ex.transcription && ex.transcription->ids.empty()) || (ex.translation && ex.translation->ids.empty()))
      throw DataError(where(path, r.line) + "empty text field");
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<std::string> manifest_texts(const std::string& path) {
  std::vector<std::string> out;
  for (const RawRecord& r : read_records(path)) {
    if (r.has_src) out.push_back(r.text_src);
    if (r.has_tgt) out.push_back(r.text_tgt);
  }
  return out;
}

std::vector<Spectrogram> manifest_spectrograms(const std::string& path, std::size_t feature_dim) {
  std::vector<Spectrogram> out;
  for (const RawRecord& r : read_records(path))
    if (!r.audio.empty() || !r.feats.empty()) out.push_back(read_speech(path, r, feature_dim));
  return out;
}

std::vector<MultimodalExample> filter_examples(const std::vector<MultimodalExample>& examples,
                                               std::size_t max_frames, FilterReport* report) {
  std::vector<MultimodalExample> out;
  FilterReport local;
  for (const auto& e : examples) {
    if (e.speech && e.speech->frames > max_frames) {
      ++local.dropped;
      local.dropped_ids.push_back(e.id);
    } else {
      out.push_back(e);
    }
  }
  local.kept = out.size();
  if (report) *report = std::move(local);
  return out;
}

std::vector<Batch> filter_and_bucket(const std::vector<MultimodalExample>& examples, const BucketConfig& cfg,
                                     std::uint64_t seed, FilterReport* report) {
  if (cfg.max_frames == 0) throw UsageError("max_frames must be positive");
  const std::vector<MultimodalExample> kept = filter_examples(examples, cfg.max_frames, report);
  std::map<Flavor, std::vector<const MultimodalExample*>> groups;
  for (const auto& e : kept) groups[e.flavor()].push_back(&e);
  std::vector<Batch> batches;
  for (auto& [flavor, group] : groups) {
    std::stable_sort(group.begin(), group.end(), [](const auto* a, const auto* b) {
      return a->length() != b->length() ? a->length() < b->length() : a->uid < b->uid;
    });
    const std::size_t budget = flavor_has(flavor, kSpeechBit) ? cfg.batch_frames : cfg.batch_tokens;
    Batch cur;
    cur.flavor = flavor;
    for (const auto* e : group) {
      const std::size_t len = e->length();
      // Sorted ascending, so the new member is the longest.
      if (!cur.examples.empty() && len * (cur.size() + 1) > budget) {
        batches.push_back(std::move(cur));
        cur = Batch{};
        cur.flavor = flavor;
      }
      cur.examples.push_back(*e);
      cur.lengths.push_back(len);
    }
    if (!cur.examples.empty()) batches.push_back(std::move(cur));
  }
  std::mt19937_64 rng(seed);
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

const char* objective_name(Objective o) {
  switch (o) {
    case Objective::kST: return "st";
    case Objective::kMT: return "mt";
    case Objective::kFatMlm: return "fat-mlm";
  }
  return "?";
}

BatchSchedule::BatchSchedule(std::vector<Stream> streams, std::uint64_t seed, bool proportional)
    : streams_(std::move(streams)), seed_(seed), proportional_(proportional), picker_(mix_seed(seed, 0x5eed)) {
  if (streams_.empty()) throw DataError("no training data for any objective stream");
  for (std::size_t i = 0; i < streams_.size(); ++i) {
    Stream& s = streams_[i];
    s.examples = 0;
    for (const auto& b : s.batches) s.examples += b.size();
    s.order.resize(s.batches.size());
    reshuffle(s);
  }
}

void BatchSchedule::reshuffle(Stream& s) {
  std::iota(s.order.begin(), s.order.end(), std::size_t{0});
  std::uint64_t h = seed_;
  for (char c : s.name) h = mix_seed(h, static_cast<unsigned char>(c));
  std::mt19937_64 rng(mix_seed(h, s.pass));
  std::shuffle(s.order.begin(), s.order.end(), rng);
  s.cursor = 0;
}

BatchSchedule BatchSchedule::pretraining(const std::vector<Batch>& batches, std::uint64_t seed, bool proportional) {
  std::map<Flavor, Stream> by_flavor;
  for (const auto& b : batches) {
    if (b.examples.empty()) continue;
    Stream& s = by_flavor[b.flavor];
    s.name = "fat-mlm:" + flavor_name(b.flavor);
    s.objective = Objective::kFatMlm;
    s.batches.push_back(b);
  }
  std::vector<Stream> streams;
  for (auto& [f, s] : by_flavor) streams.push_back(std::move(s));
  return BatchSchedule(std::move(streams), seed, proportional);
}

BatchSchedule BatchSchedule::finetuning(const std::vector<Batch>& batches, std::uint64_t seed, bool proportional) {
  Stream st{"st", Objective::kST, {}, {}, 0, 0, 0};
  Stream mt{"mt", Objective::kMT, {}, {}, 0, 0, 0};
  Stream mlm{"fat-mlm", Objective::kFatMlm, {}, {}, 0, 0, 0};
  const Flavor st_view = kSpeechBit | kSourceBit | kTargetBit;
  for (const auto& b : batches) {
    if (b.examples.empty()) continue;
    const Flavor f = b.flavor;
    if (flavor_has(f, kSpeechBit) && flavor_has(f, kTargetBit)) {
      // ST keeps the transcription when available; it feeds the CTC term.
      st.batches.push_back(b.view(f & st_view));
    }
    if (flavor_has(f, kSourceBit) && flavor_has(f, kTargetBit)) mt.batches.push_back(b.view(kSourceBit | kTargetBit));
    if (flavor_has(f, kSpeechBit) && flavor_has(f, kSourceBit)) mlm.batches.push_back(b.view(kSpeechBit | kSourceBit));
  }
  if (st.batches.empty()) throw DataError("fine-tuning needs speech translation data (speech with text_tgt)");
  std::vector<Stream> streams;
  for (Stream* s : {&st, &mt, &mlm})
    if (!s->batches.empty()) streams.push_back(std::move(*s));
  return BatchSchedule(std::move(streams), seed, proportional);
}

ScheduledBatch BatchSchedule::next() {
  Stream& s = advance();
  return {s.objective, s.batches[s.order[s.cursor - 1]]};
}

void BatchSchedule::skip(std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) advance();
}

BatchSchedule::Stream& BatchSchedule::advance() {
  std::size_t pick;
  if (proportional_) {
    std::vector<double> weights;
    for (const auto& s : streams_) weights.push_back(static_cast<double>(s.examples));
    pick = std::discrete_distribution<std::size_t>(weights.begin(), weights.end())(picker_);
  } else {
    pick = turn_++ % streams_.size();
  }
  Stream& s = streams_[pick];
  if (s.cursor == s.order.size()) {
    ++s.pass;
    reshuffle(s);
  }
  ++s.cursor;
  return s;
}

std::vector<std::string> BatchSchedule::stream_names() const {
  std::vector<std::string> out;
  for (const auto& s : streams_) out.push_back(s.name);
  return out;
}

}  // namespace fatspeech
