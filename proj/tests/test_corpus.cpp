#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "fatspeech/corpus.hpp"
#include "fatspeech/errors.hpp"

using namespace fatspeech;
namespace fs = std::filesystem;

namespace {

struct Workdir {
  fs::path root;
  Workdir() {
    root = fs::temp_directory_path() / "fatspeech_corpus_test";
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workdir() { fs::remove_all(root); }

  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(root / name) << text;
    return (root / name).string();
  }
  void feats(const std::string& name, std::size_t frames, std::size_t dim) const {
    Spectrogram s;
    s.frames = frames;
    s.dim = dim;
    s.values.assign(frames * dim, 0.5f);
    save_features((root / name).string(), s);
  }
};

Vocabulary small_vocab() { return Vocabulary::train({"hello world", "hallo welt"}, 30); }

MultimodalExample speech_example(std::size_t frames, std::uint64_t uid, bool x = false, bool y = false) {
  MultimodalExample e;
  e.id = "e" + std::to_string(uid);
  e.uid = uid;
  auto s = std::make_shared<Spectrogram>();
  s->frames = frames;
  s->dim = 2;
  s->values.assign(frames * 2, 0.f);
  e.speech = s;
  if (x) e.transcription = std::make_shared<TokenSequence>(TokenSequence{{5, 6}, Language::kSource, ""});
  if (y) e.translation = std::make_shared<TokenSequence>(TokenSequence{{7}, Language::kTarget, ""});
  return e;
}

MultimodalExample text_example(std::size_t tokens, std::uint64_t uid) {
  MultimodalExample e;
  e.id = "t" + std::to_string(uid);
  e.uid = uid;
  e.transcription = std::make_shared<TokenSequence>(TokenSequence{std::vector<int>(tokens, 5), Language::kSource, ""});
  return e;
}

}  // namespace

TEST_CASE("manifest fields determine the flavor") {
  Workdir w;
  w.feats("a.fatf", 12, 4);
  const std::string path = w.write("m.jsonl",
                                   "{\"id\":\"u1\",\"feats\":\"a.fatf\",\"text_src\":\"hello\",\"text_tgt\":\"hallo\"}\n"
                                   "\n"
                                   "{\"text_src\":\"world\"}\n"
                                   "{\"feats\":\"a.fatf\"}\n");
  const Vocabulary v = small_vocab();
  const auto ex = load_manifest(path, v, {4, true});
  REQUIRE(ex.size() == 3);
  CHECK(ex[0].flavor() == kFlavorSXY);
  CHECK(ex[0].id == "u1");
  CHECK(ex[0].speech->frames == 12);
  CHECK(ex[0].transcription->language == Language::kSource);
  CHECK(ex[0].translation->language == Language::kTarget);
  CHECK(v.decode(ex[0].translation->ids) == "hallo");
  CHECK(ex[1].flavor() == kSourceBit);
  CHECK(flavor_name(ex[1].flavor()) == "x");
  CHECK(ex[2].flavor() == kSpeechBit);
  CHECK(ex[2].uid == 2);
  CHECK(manifest_texts(path) == std::vector<std::string>{"hello", "hallo", "world"});
}

TEST_CASE("manifest errors carry the line number") {
  Workdir w;
  const Vocabulary v = small_vocab();
  auto expect_error = [&](const std::string& body, const std::string& fragment) {
    const std::string path = w.write("bad.jsonl", body);
    try {
      load_manifest(path, v, {4, true});
      FAIL("expected DataError");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK_MESSAGE(msg.find(fragment) != std::string::npos, msg);
    }
  };
  expect_error("{\"text_src\":\"hello\"}\n{\"speaker\":\"x\",\"text_src\":\"a\"}\n", ":2: unknown field 'speaker'");
  expect_error("{\"id\":\"only\"}\n", ":1: record has no speech and no text");
  expect_error("{\"text_src\":\"a\"}\n{\"feats\":\"missing.fatf\"}\n", ":2:");
  w.feats("wide.fatf", 5, 3);
  expect_error("{\"feats\":\"wide.fatf\"}\n", ":1:");
  expect_error("not json\n", ":1: invalid JSON");
  CHECK_THROWS_AS(load_manifest((w.root / "absent.jsonl").string(), v), DataError);
}

TEST_CASE("overlong utterances are dropped and counted") {
  std::vector<MultimodalExample> ex{speech_example(3001, 0), speech_example(3000, 1), speech_example(10, 2)};
  FilterReport report;
  const auto batches = filter_and_bucket(ex, {3000, 100000, 1000}, 1, &report);
  CHECK(report.dropped == 1);
  CHECK(report.kept == 2);
  CHECK(report.dropped_ids == std::vector<std::string>{"e0"});
  std::size_t total = 0;
  for (const auto& b : batches) total += b.size();
  CHECK(total == 2);

  const auto once = filter_examples(ex, 3000);
  const auto twice = filter_examples(once, 3000);
  CHECK(once.size() == twice.size());
}

TEST_CASE("equal-length examples pack four to a batch") {
  std::vector<MultimodalExample> ex;
  for (std::uint64_t i = 0; i < 10; ++i) ex.push_back(speech_example(50, i));
  const auto batches = filter_and_bucket(ex, {3000, 200, 1000}, 7);
  REQUIRE(batches.size() == 3);
  std::map<std::size_t, int> sizes;
  for (const auto& b : batches) {
    ++sizes[b.size()];
    CHECK(b.padded_size() <= 200);
  }
  CHECK(sizes[4] == 2);
  CHECK(sizes[2] == 1);
}

TEST_CASE("packing respects the padded budget for any lengths and flavors") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<MultimodalExample> ex;
    for (std::uint64_t i = 0; i < 40; ++i) {
      if (rng() % 2) {
        ex.push_back(speech_example(4 + rng() % 60, i, rng() % 2, rng() % 2));
      } else {
        ex.push_back(text_example(1 + rng() % 20, i));
      }
    }
    const auto batches = filter_and_bucket(ex, {3000, 256, 64}, trial);
    std::size_t total = 0;
    for (const auto& b : batches) {
      total += b.size();
      for (const auto& e : b.examples) CHECK(e.flavor() == b.flavor);
      const std::size_t budget = flavor_has(b.flavor, kSpeechBit) ? 256 : 64;
      CHECK((b.size() == 1 || b.padded_size() <= budget));
    }
    CHECK(total == ex.size());
    const auto again = filter_and_bucket(ex, {3000, 256, 64}, trial);
    REQUIRE(again.size() == batches.size());
    for (std::size_t i = 0; i < again.size(); ++i) CHECK(again[i].examples[0].uid == batches[i].examples[0].uid);
  }
}

TEST_CASE("triplets decouple into three views sharing storage") {
  std::vector<MultimodalExample> ex{speech_example(20, 0, true, true), speech_example(22, 1, true, true)};
  const auto batches = filter_and_bucket(ex, {3000, 1000, 1000}, 1);
  BatchSchedule sched = BatchSchedule::finetuning(batches, 9);
  CHECK(sched.stream_count() == 3);
  std::vector<Objective> seen;
  for (int i = 0; i < 6; ++i) {
    const ScheduledBatch sb = sched.next();
    seen.push_back(sb.objective);
    for (const auto& e : sb.batch.examples) {
      const auto& original = ex[e.uid];
      if (e.speech) CHECK(e.speech.get() == original.speech.get());
      if (e.transcription) CHECK(e.transcription.get() == original.transcription.get());
      if (e.translation) CHECK(e.translation.get() == original.translation.get());
    }
    if (sb.objective == Objective::kMT) CHECK(sb.batch.flavor == (kSourceBit | kTargetBit));
    if (sb.objective == Objective::kFatMlm) CHECK(sb.batch.flavor == (kSpeechBit | kSourceBit));
    if (sb.objective == Objective::kST) CHECK(flavor_has(sb.batch.flavor, kTargetBit));
  }
  CHECK(seen == std::vector<Objective>{Objective::kST, Objective::kMT, Objective::kFatMlm, Objective::kST,
                                       Objective::kMT, Objective::kFatMlm});
}

TEST_CASE("pretraining schedule round-robins flavors regardless of size") {
  std::vector<MultimodalExample> ex{speech_example(30, 0)};
  for (std::uint64_t i = 1; i <= 100; ++i) ex.push_back(text_example(5, i));
  const auto batches = filter_and_bucket(ex, {3000, 1000, 5}, 2);
  BatchSchedule sched = BatchSchedule::pretraining(batches, 4);
  REQUIRE(sched.stream_count() == 2);
  int speech = 0, text = 0;
  Flavor previous = 0;
  for (int i = 0; i < 200; ++i) {
    const ScheduledBatch sb = sched.next();
    CHECK(sb.objective == Objective::kFatMlm);
    CHECK(sb.batch.flavor != previous);
    previous = sb.batch.flavor;
    (sb.batch.flavor == kSpeechBit ? speech : text)++;
  }
  CHECK(speech == 100);
  CHECK(text == 100);

  BatchSchedule prop = BatchSchedule::pretraining(batches, 4, true);
  int prop_speech = 0;
  for (int i = 0; i < 200; ++i) prop_speech += prop.next().batch.flavor == kSpeechBit;
  CHECK(prop_speech < 20);
}

TEST_CASE("single-flavor and empty schedules") {
  std::vector<MultimodalExample> ex;
  for (std::uint64_t i = 0; i < 5; ++i) ex.push_back(text_example(3, i));
  BatchSchedule sched = BatchSchedule::pretraining(filter_and_bucket(ex, {}, 1), 1);
  for (int i = 0; i < 10; ++i) CHECK(sched.next().batch.flavor == kSourceBit);
  CHECK_THROWS_AS(BatchSchedule::pretraining({}, 1), DataError);
  CHECK_THROWS_AS(BatchSchedule::finetuning(filter_and_bucket(ex, {}, 1), 1), DataError);
}

TEST_CASE("skip matches repeated next") {
  std::vector<MultimodalExample> ex;
  for (std::uint64_t i = 0; i < 12; ++i) ex.push_back(speech_example(10 + i, i, true, true));
  const auto batches = filter_and_bucket(ex, {3000, 40, 40}, 3);
  BatchSchedule a = BatchSchedule::finetuning(batches, 5), b = BatchSchedule::finetuning(batches, 5);
  for (int i = 0; i < 37; ++i) a.next();
  b.skip(37);
  for (int i = 0; i < 10; ++i) {
    const auto x = a.next(), y = b.next();
    CHECK(x.objective == y.objective);
    CHECK(x.batch.examples[0].uid == y.batch.examples[0].uid);
  }
}
