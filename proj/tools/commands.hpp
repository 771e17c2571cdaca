#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace fatspeech::cli {

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

struct VocabOptions {
  std::vector<std::string> inputs;
  std::size_t size = 8000;
  std::size_t feature_dim = 80;
  bool stats = true;
  std::string out;
};

struct SynthCliOptions {
  std::string out;
  std::string name = "train";
  std::size_t count = 32;
  std::size_t words = 8;
  std::size_t feature_dim = 16;
  std::size_t min_words = 2;
  std::size_t max_words = 5;
  double noise = 0.1;
  std::uint64_t language_seed = 1;
  std::string flavor = "s,x,y";
};

// Manifests by role: each role keeps only its modalities.
struct DataRoles {
  std::vector<std::string> st, asr, mt, speech, mono_src, mono_tgt;
  bool empty() const;
};

struct TrainCliOptions {
  CommonOptions common;
  std::string vocab;
  DataRoles data;
  std::vector<std::string> dev;
  std::string out;
  std::string resume;
  std::string init;  // fine-tuning only
  bool hierarchical = false;
};

struct DecodeOptions {
  std::string ckpt;
  std::string vocab;
  std::string input;
  std::size_t beam = 5;
  double alpha = 0.0;
  std::size_t max_len = 0;  // 0: derived from the source length
  std::string source = "auto";
  std::size_t jobs = 1;
  std::string output;
  std::string timing;
};

struct EvalOptions {
  DecodeOptions decode;
  std::string hypotheses;  // pre-computed lines instead of decoding
  bool smooth = false;
};

struct AttentionOptions {
  std::string ckpt;
  std::string vocab;
  std::string input;
  std::string example;
  std::vector<std::size_t> layers;
  std::vector<std::size_t> heads;
  std::string out;
};

struct FeatureOptions {
  std::string audio;
  std::string out;
  std::size_t mels = 80;
};

int cmd_vocab(const VocabOptions& o);
int cmd_synth(const SynthCliOptions& o, const CommonOptions& common);
int cmd_pretrain(const TrainCliOptions& o);
int cmd_finetune(const TrainCliOptions& o);
int cmd_translate(const DecodeOptions& o);
int cmd_eval(const EvalOptions& o);
int cmd_attention_dump(const AttentionOptions& o);
int cmd_checkpoint_average(const std::vector<std::string>& inputs, const std::string& out);
int cmd_checkpoint_info(const std::string& path);
int cmd_features(const FeatureOptions& o);

}  // namespace fatspeech::cli
