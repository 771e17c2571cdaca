#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "fatspeech/attention.hpp"
#include "fatspeech/errors.hpp"
#include "test_util.hpp"

using namespace fatspeech;
using fatspeech::testing::random_tensor;
using fatspeech::testing::tiny_config;
namespace fs = std::filesystem;

namespace {

struct Encoded {
  FusedEncoderStates states;
  nn::AttentionRecorder rec;
};

Encoded encode(const FatModel& m, bool with_speech, bool with_text) {
  std::mt19937_64 rng(9);
  auto ctx = m.context(false, 0);
  Encoded e;
  const num::Tensor speech = m.acoustic_embed(random_tensor({16, 6}, rng), nullptr, ctx);
  const std::vector<int> src{5, 6, 7};
  const num::Tensor x = m.embed_text(src, nullptr);
  e.states = m.fuse_encode(with_speech ? &speech : nullptr, with_text ? &x : nullptr, nullptr, ctx, &e.rec);
  return e;
}

AttentionMap make_map(std::size_t rows, std::size_t cols, std::vector<double> w) {
  AttentionMap m;
  m.rows = rows;
  m.cols = cols;
  m.weights = std::move(w);
  return m;
}

}  // namespace

TEST_CASE("extracted blocks are row-stochastic and named by segment pair") {
  FatModel m(tiny_config(), 1);
  const Encoded e = encode(m, true, true);
  const auto maps = extract_attention(e.states, e.rec, {}, {});
  REQUIRE(maps.size() == 2 * 2 * 3);
  CHECK(maps[0].stem() == "layer0_head0_speech-speech");
  CHECK(maps[1].stem() == "layer0_head0_text-text");
  CHECK(maps[2].stem() == "layer0_head0_speech-text");
  CHECK(maps.back().stem() == "layer1_head1_speech-text");
  for (const auto& a : maps) {
    CHECK(a.weights.size() == a.rows * a.cols);
    for (std::size_t r = 0; r < a.rows; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < a.cols; ++c) {
        CHECK(a.at(r, c) >= 0.0);
        sum += a.at(r, c);
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK(maps[2].rows == 4);
  CHECK(maps[2].cols == 3);
}

TEST_CASE("selection filters layers and heads and rejects bad indices") {
  FatModel m(tiny_config(), 2);
  const Encoded e = encode(m, true, true);
  const auto one = extract_attention(e.states, e.rec, {1}, {0});
  REQUIRE(one.size() == 3);
  for (const auto& a : one) {
    CHECK(a.layer == 1);
    CHECK(a.head == 0);
  }
  CHECK_THROWS_AS(extract_attention(e.states, e.rec, {2}, {}), UsageError);
  CHECK_THROWS_AS(extract_attention(e.states, e.rec, {}, {5}), UsageError);
}

TEST_CASE("single-modality input yields only its own block") {
  FatModel m(tiny_config(), 3);
  const Encoded e = encode(m, false, true);
  const auto maps = extract_attention(e.states, e.rec, {0}, {0});
  REQUIRE(maps.size() == 1);
  CHECK(maps[0].query == Segment::kSource);
  CHECK(maps[0].key == Segment::kSource);
}

TEST_CASE("diagonal score") {
  CHECK(diagonal_score(make_map(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1})) == doctest::Approx(1.0));
  CHECK(diagonal_score(make_map(3, 3, {1.0 / 3, 1.0 / 3, 1.0 / 3, 1.0 / 3, 1.0 / 3, 1.0 / 3, 1.0 / 3, 1.0 / 3,
                                       1.0 / 3})) == doctest::Approx(7.0 / 9.0));
  std::vector<double> anti(25, 0.0);
  for (std::size_t r = 0; r < 5; ++r) anti[r * 5 + (4 - r)] = 1.0;
  CHECK(diagonal_score(make_map(5, 5, anti)) == doctest::Approx(1.0 / 5.0));
  CHECK(diagonal_score(make_map(0, 0, {})) == 0.0);
}

TEST_CASE("csv and pgm writers") {
  const fs::path dir = fs::temp_directory_path() / "fatspeech_attention_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const AttentionMap a = make_map(2, 3, {0.5, 0.25, 0.25, 0.0, 0.0, 1.0});

  write_attention_csv((dir / "a.csv").string(), a);
  std::ifstream csv(dir / "a.csv");
  std::stringstream ss;
  ss << csv.rdbuf();
  CHECK(ss.str() == "0.5,0.25,0.25\n0,0,1\n");

  write_attention_pgm((dir / "a.pgm").string(), a);
  std::ifstream pgm(dir / "a.pgm", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(pgm)), std::istreambuf_iterator<char>());
  const std::string header = "P5\n3 2\n255\n";
  REQUIRE(bytes.size() == header.size() + 6);
  CHECK(bytes.substr(0, header.size()) == header);
  const auto px = [&](std::size_t i) { return static_cast<unsigned char>(bytes[header.size() + i]); };
  CHECK(px(0) == 255);
  CHECK(px(1) == 128);
  CHECK(px(2) == 128);
  CHECK(px(3) == 0);
  CHECK(px(5) == 255);

  CHECK_THROWS_AS(write_attention_csv((dir / "missing" / "x.csv").string(), a), DataError);
  fs::remove_all(dir);
}
