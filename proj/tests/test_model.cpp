#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fatspeech/errors.hpp"
#include "fatspeech/model.hpp"
#include "fatspeech/numerics/ops.hpp"
#include "test_util.hpp"

using namespace fatspeech;
using namespace fatspeech::num;
using fatspeech::testing::bitwise_equal;
using fatspeech::testing::random_tensor;
using fatspeech::testing::tiny_config;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("fatspeech_model_" + name)).string();
}

Tensor encode_fixed(const FatModel& m, const Tensor& speech) {
  auto ctx = m.context(false, 0);
  return m.encode_speech(speech, ctx).hidden;
}

}  // namespace

TEST_CASE("acoustic embedding downsamples time by four") {
  ModelConfig cfg = tiny_config();
  cfg.feature_dim = 80;
  cfg.d_model = 16;
  FatModel m(cfg, 1);
  std::mt19937_64 rng(3);
  auto ctx = m.context(false, 0);
  const Tensor e = m.acoustic_embed(random_tensor({100, 80}, rng), nullptr, ctx);
  CHECK(e.shape() == Shape{25, 16});
  CHECK(m.acoustic_embed(random_tensor({4, 80}, rng), nullptr, ctx).shape() == Shape{1, 16});
  CHECK_THROWS_AS(m.acoustic_embed(random_tensor({3, 80}, rng), nullptr, ctx), DataError);
  CHECK_THROWS_AS(m.acoustic_embed(random_tensor({10, 79}, rng), nullptr, ctx), ShapeError);
}

TEST_CASE("examples are encoded independently of batch order") {
  FatModel m(tiny_config(), 2);
  std::mt19937_64 rng(4);
  const Tensor a = random_tensor({13, 6}, rng), b = random_tensor({21, 6}, rng);
  const Tensor a1 = encode_fixed(m, a), b1 = encode_fixed(m, b);
  const Tensor b2 = encode_fixed(m, b), a2 = encode_fixed(m, a);
  CHECK(bitwise_equal(a1, a2));
  CHECK(bitwise_equal(b1, b2));
}

TEST_CASE("fused states keep segment order and restart positions") {
  FatModel m(tiny_config(), 3);
  std::mt19937_64 rng(5);
  auto ctx = m.context(false, 0);
  const Tensor speech = m.acoustic_embed(random_tensor({12, 6}, rng), nullptr, ctx);
  const std::vector<int> src{5, 6}, tgt{7, 8, 9, 10};
  const Tensor x = m.embed_text(src, nullptr), y = m.embed_text(tgt, nullptr);
  const FusedEncoderStates st = m.fuse_encode(&speech, &x, &y, ctx);
  REQUIRE(st.segments.size() == 3);
  CHECK(st.segments[0].kind == Segment::kSpeech);
  CHECK(st.segments[1].kind == Segment::kSource);
  CHECK(st.segments[2].kind == Segment::kTarget);
  CHECK(st.hidden.dim(0) == 3 + 2 + 4);
  CHECK(st.position_indices() == std::vector<std::size_t>{0, 1, 2, 0, 1, 0, 1, 2, 3});
  CHECK(st.rows(Segment::kSource).shape() == Shape{2, 8});
  CHECK_THROWS_AS(m.fuse_encode(nullptr, nullptr, nullptr, ctx), DataError);
}

TEST_CASE("absent segments leave their parameters out of the graph") {
  FatModel m(tiny_config(), 4);
  std::mt19937_64 rng(6);
  const Tensor speech = random_tensor({9, 6}, rng);
  {
    Tape tape;
    TapeScope scope(tape);
    auto ctx = m.context(false, 0);
    const Tensor e = m.acoustic_embed(speech, nullptr, ctx);
    const FusedEncoderStates st = m.fuse_encode(&e, nullptr, nullptr, ctx);
    tape.backward(sum(st.hidden));
  }
  CHECK_FALSE(m.parameters().at("text.embedding").has_grad());
  CHECK(m.parameters().at("acoustic.conv1.weight").has_grad());
  for (auto& [n, t] : m.parameters()) t.zero_grad();

  const std::vector<int> ids{5, 6, 7};
  {
    Tape tape;
    TapeScope scope(tape);
    auto ctx = m.context(false, 0);
    tape.backward(sum(m.encode_text(ids, ctx).hidden));
  }
  double conv_grad = 0.0;
  for (double g : m.parameters().at("acoustic.conv1.weight").grad()) conv_grad += std::abs(g);
  CHECK(conv_grad == 0.0);
}

TEST_CASE("source and target language tags are not interchangeable") {
  FatModel m(tiny_config(), 5);
  auto ctx = m.context(false, 0);
  const std::vector<int> a{5, 6, 7}, b{8, 9};
  const Tensor ea = m.embed_text(a, nullptr), eb = m.embed_text(b, nullptr);
  const Tensor h1 = m.fuse_encode(nullptr, &ea, &eb, ctx).hidden;
  const Tensor h2 = m.fuse_encode(nullptr, &eb, &ea, ctx).hidden;
  // Same multiset of tokens, swapped tags: row for token 8 moves from 3 to 0.
  const Tensor r1 = slice(h1, 0, 3, 4), r2 = slice(h2, 0, 0, 1);
  CHECK_FALSE(bitwise_equal(r1, r2));
}

TEST_CASE("speech reconstruction matches the input shape") {
  std::mt19937_64 rng(7);
  FatModel m(tiny_config(), 6);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t frames = fatspeech::testing::random_extent(rng, 4, 90);
    auto ctx = m.context(false, 0);
    const Tensor e = m.acoustic_embed(random_tensor({frames, 6}, rng), nullptr, ctx);
    const FusedEncoderStates st = m.fuse_encode(&e, nullptr, nullptr, ctx);
    CHECK(m.reconstruct_speech(st, frames).shape() == Shape{frames, 6});
  }
  ModelConfig cfg = tiny_config();
  cfg.feature_dim = 80;
  FatModel big(cfg, 6);
  auto ctx = big.context(false, 0);
  const Tensor e = big.acoustic_embed(random_tensor({100, 80}, rng), nullptr, ctx);
  CHECK(big.reconstruct_speech(big.fuse_encode(&e, nullptr, nullptr, ctx), 100).shape() == Shape{100, 80});
  const Tensor x = big.embed_text(std::vector<int>{5}, nullptr);
  CHECK_THROWS_AS(big.reconstruct_speech(big.fuse_encode(nullptr, &x, nullptr, ctx), 4), DataError);
}

TEST_CASE("token head is tied to the embedding table") {
  FatModel m(tiny_config(), 8);
  FusedEncoderStates zero;
  zero.hidden = Tensor::zeros({3, 8});
  zero.segments = {{Segment::kSource, 0, 3}};
  const Tensor p = softmax(m.predict_tokens(zero, Segment::kSource));
  for (double v : p.data()) CHECK(v == doctest::Approx(1.0 / 11.0));
  CHECK_THROWS_AS(m.predict_tokens(zero, Segment::kTarget), DataError);

  std::mt19937_64 rng(9);
  FusedEncoderStates st;
  st.hidden = random_tensor({3, 8}, rng);
  st.segments = {{Segment::kSource, 0, 3}};
  const Tensor before = m.predict_tokens(st, Segment::kSource);
  CHECK(before.at(0, 0) != before.at(1, 0));
  m.parameters().at("text.embedding").mutable_data()[7 * 8 + 2] += 0.5;
  const Tensor after = m.predict_tokens(st, Segment::kSource);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 11; ++c) CHECK((before.at(r, c) != after.at(r, c)) == (c == 7));
}

TEST_CASE("ctc head yields normalized rows with a trailing blank") {
  FatModel m(tiny_config(), 9);
  std::mt19937_64 rng(10);
  auto ctx = m.context(false, 0);
  const Tensor e = m.acoustic_embed(random_tensor({17, 6}, rng), nullptr, ctx);
  const Tensor lp = m.ctc_head(e);
  CHECK(lp.shape() == Shape{5, 12});
  CHECK(m.blank_id() == 11);
  for (std::size_t r = 0; r < 5; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 12; ++c) total += std::exp(lp.at(r, c));
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("decoder is causal, deterministic and source-agnostic") {
  FatModel m(tiny_config(), 10);
  std::mt19937_64 rng(11);
  auto ctx = m.context(false, 0);
  const Tensor speech_mem = m.encode_speech(random_tensor({15, 6}, rng), ctx).hidden;
  const Tensor text_mem = m.encode_text(std::vector<int>{5, 6, 7}, ctx).hidden;
  const std::vector<int> a{2, 5, 6}, b{2, 5, 9};
  const Tensor la = m.decoder_logits(speech_mem, a, ctx), lb = m.decoder_logits(speech_mem, b, ctx);
  CHECK(bitwise_equal(slice(la, 0, 0, 2), slice(lb, 0, 0, 2)));
  CHECK_FALSE(bitwise_equal(slice(la, 0, 2, 3), slice(lb, 0, 2, 3)));
  const std::vector<int> prefix{2, 5};
  CHECK(m.decode_step(prefix, speech_mem) == m.decode_step(prefix, speech_mem));
  const auto from_text = m.decode_step(prefix, text_mem);
  CHECK(from_text.size() == 11);
  double total = 0.0;
  for (double v : from_text) total += std::exp(v);
  CHECK(total == doctest::Approx(1.0));
}

TEST_CASE("checkpoint round trip reproduces outputs bitwise") {
  FatModel m(tiny_config(), 11);
  std::mt19937_64 rng(12);
  const Tensor speech = random_tensor({20, 6}, rng);
  const std::string path = temp_path("roundtrip.fatc");
  ModelCheckpoint ck = make_checkpoint(m, 1234, 77);
  ck.extra.set("train.seed", "5");
  save_checkpoint(path, ck);
  const ModelCheckpoint loaded = load_checkpoint(path);
  CHECK(loaded.step == 77);
  CHECK(loaded.vocab_hash == 1234);
  CHECK(loaded.extra.get("train.seed", "") == "5");
  CHECK(loaded.tensors.size() == m.parameters().size());
  const FatModel m2 = model_from_checkpoint(loaded);
  CHECK(bitwise_equal(encode_fixed(m, speech), encode_fixed(m2, speech)));

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 10);
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE";
  }
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  std::remove(path.c_str());
}

TEST_CASE("transfer initialization copies the encoder and seeds the decoder") {
  FatModel pre(tiny_config(), 12);
  const ModelCheckpoint ck = make_checkpoint(pre, 0, 500);
  const FatModel st1 = init_fatst_from_fatmlm(ck, tiny_config(), 100);
  const FatModel st2 = init_fatst_from_fatmlm(ck, tiny_config(), 200);
  std::mt19937_64 rng(13);
  const Tensor speech = random_tensor({18, 6}, rng);
  CHECK(bitwise_equal(encode_fixed(pre, speech), encode_fixed(st1, speech)));

  const auto& p = st1.parameters();
  const auto& src = pre.parameters();
  for (const char* w : {"key.weight", "query.weight", "value.weight", "output.bias"}) {
    CHECK(bitwise_equal(p.at(std::string("decoder.layers.0.self_attn.") + w),
                        src.at(std::string("encoder.layers.0.attn.") + w)));
  }
  CHECK(bitwise_equal(p.at("decoder.layers.1.ffn.inner.weight"), src.at("encoder.layers.1.ffn.inner.weight")));
  CHECK(bitwise_equal(p.at("decoder.layers.1.ffn_norm.gamma"), src.at("encoder.layers.1.ffn_norm.gamma")));
  CHECK_FALSE(bitwise_equal(st1.parameters().at("decoder.layers.0.cross_attn.query.weight"),
                            st2.parameters().at("decoder.layers.0.cross_attn.query.weight")));

  ModelConfig other = tiny_config();
  other.ffn_dim = 32;
  other.heads = 4;
  try {
    (void)init_fatst_from_fatmlm(ck, other, 1);
    FAIL("expected a mismatch error");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("model.ffn_dim") != std::string::npos);
    CHECK(msg.find("model.heads") != std::string::npos);
  }
}

TEST_CASE("checkpoint averaging is an elementwise mean") {
  FatModel m(tiny_config(), 14);
  const ModelCheckpoint base = make_checkpoint(m, 0, 1);
  const ModelCheckpoint same = average_checkpoints({base, base, base});
  for (const auto& [name, t] : base.tensors) CHECK(bitwise_equal(t, same.tensors.at(name)));

  ModelCheckpoint zero = base, two = base;
  for (auto& [name, t] : zero.tensors) t = Tensor::zeros(t.shape());
  for (auto& [name, t] : two.tensors) t = Tensor::full(t.shape(), 2.0);
  const ModelCheckpoint one = average_checkpoints({zero, two});
  for (const auto& [name, t] : one.tensors)
    for (double v : t.data()) CHECK(v == 1.0);

  FatModel m2(tiny_config(), 15), m3(tiny_config(), 16);
  const ModelCheckpoint b = make_checkpoint(m2, 0, 2), c = make_checkpoint(m3, 0, 3);
  const ModelCheckpoint abc = average_checkpoints({base, b, c}), cab = average_checkpoints({c, base, b});
  for (const auto& [name, t] : abc.tensors) CHECK(bitwise_equal(t, cab.tensors.at(name)));
  CHECK(abc.step == 3);

  ModelCheckpoint bad = base;
  bad.tensors.erase(bad.tensors.begin());
  CHECK_THROWS_AS(average_checkpoints({base, bad}), DataError);
}

TEST_CASE("config text round trip and validation") {
  ModelConfig cfg = tiny_config();
  cfg.hierarchical = true;
  cfg.activation = nn::Activation::kGelu;
  const ModelConfig back = ModelConfig::from_config(cfg.to_config());
  CHECK(back.architecture_mismatches(cfg).empty());
  CHECK(back.hierarchical);
  Config bad = cfg.to_config();
  bad.set("model.heads", "3");
  CHECK_THROWS_AS(ModelConfig::from_config(bad), UsageError);

  FatModel h(cfg, 1);
  CHECK(h.parameters().count("text.stack.layers.0.attn.query.weight") == 1);
  FatModel flat(tiny_config(), 1);
  CHECK(flat.parameters().count("text.stack.layers.0.attn.query.weight") == 0);
  CHECK(h.parameter_count() > flat.parameter_count());
}
