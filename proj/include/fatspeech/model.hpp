#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fatspeech/config.hpp"
#include "fatspeech/layers.hpp"
#include "fatspeech/masking.hpp"
#include "fatspeech/numerics/tensor.hpp"

namespace fatspeech {

struct ModelConfig {
  std::size_t d_model = 256;
  std::size_t heads = 4;
  std::size_t acoustic_layers = 6;
  std::size_t shared_layers = 6;
  std::size_t decoder_layers = 6;
  std::size_t ffn_dim = 2048;
  std::size_t feature_dim = 80;
  std::size_t vocab_size = 500;
  std::size_t conv_channels = 256;
  double dropout = 0.1;
  // Text gets a private stack of acoustic_layers depth before the shared one.
  bool hierarchical = false;
  // Language embeddings are used only in translation mode.
  bool translation = true;
  bool tie_embeddings = true;
  // Used by the convolutions and feed-forward blocks.
  nn::Activation activation = nn::Activation::kRelu;
  MaskConfig mask;

  void validate() const;
  // Keys model.* and mask.*.
  Config to_config() const;
  static ModelConfig from_config(const Config& c);
  // Architecture fields that differ (dropout and masking are not architecture).
  std::vector<std::string> architecture_mismatches(const ModelConfig& other) const;
};

enum class Segment { kSpeech, kSource, kTarget };
const char* segment_name(Segment s);

struct SegmentSpan {
  Segment kind;
  std::size_t begin;
  std::size_t length;
};

struct FusedEncoderStates {
  num::Tensor hidden;                 // [N, d_model]
  std::vector<SegmentSpan> segments;  // contiguous, ordered speech, source, target

  const SegmentSpan* find(Segment s) const;
  // Rows of one segment; throws if absent.
  num::Tensor rows(Segment s) const;
  // Per-position index within its own segment.
  std::vector<std::size_t> position_indices() const;
};

using ParameterMap = std::map<std::string, num::Tensor>;

// Fused acoustic and text encoder with reconstruction, token, CTC heads and a
// translation decoder. One parameter set serves pretraining and fine-tuning.
class FatModel {
 public:
  FatModel(const ModelConfig& config, std::uint64_t seed);
  FatModel(const FatModel&) = delete;
  FatModel& operator=(const FatModel&) = delete;
  FatModel(FatModel&&) = default;
  FatModel& operator=(FatModel&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterMap& parameters() { return params_; }
  const ParameterMap& parameters() const { return params_; }
  std::size_t parameter_count() const;
  // Copies values by name; throws DataError on missing, extra or misshapen tensors.
  void load_parameters(const ParameterMap& values);
  void round_parameters_to_float();

  nn::ForwardContext context(bool training, std::uint64_t seed) const;

  // speech: [T, feature_dim], T >= 4. Masked frames are replaced by the
  // learned speech mask vector before convolution. Returns [T', d_model].
  num::Tensor acoustic_embed(const num::Tensor& speech, const MaskPlan* mask, nn::ForwardContext& ctx,
                             nn::AttentionRecorder* rec = nullptr) const;
  // Scaled token embeddings with the learned token mask vector at masked positions.
  num::Tensor embed_text(std::span<const int> ids, const MaskPlan* mask) const;
  // Concatenates present segments (positions restart per segment, language
  // embeddings in translation mode) and runs the shared encoder.
  FusedEncoderStates fuse_encode(const num::Tensor* speech, const num::Tensor* source,
                                 const num::Tensor* target, nn::ForwardContext& ctx,
                                 nn::AttentionRecorder* rec = nullptr) const;
  // Predicted spectrogram cropped to [frames, feature_dim].
  num::Tensor reconstruct_speech(const FusedEncoderStates& states, std::size_t frames) const;
  // [segment length, vocab_size]
  num::Tensor predict_tokens(const FusedEncoderStates& states, Segment segment) const;
  // Row-wise log-probabilities [T', vocab_size + 1]; blank is the last class.
  num::Tensor ctc_head(const num::Tensor& acoustic) const;
  std::size_t blank_id() const { return config_.vocab_size; }

  // Unmasked source encodings for translation.
  FusedEncoderStates encode_speech(const num::Tensor& speech, nn::ForwardContext& ctx) const;
  FusedEncoderStates encode_text(std::span<const int> ids, nn::ForwardContext& ctx) const;

  // Teacher-forced decoder logits [inputs.size(), vocab_size].
  num::Tensor decoder_logits(const num::Tensor& memory, std::span<const int> inputs,
                             nn::ForwardContext& ctx) const;
  // Log-distribution over the next token given a bos-initial prefix.
  std::vector<double> decode_step(std::span<const int> prefix, const num::Tensor& memory) const;

 private:
  void register_parameters();
  num::Tensor activate(const num::Tensor& x) const;
  num::Tensor output_projection(const num::Tensor& h, const num::Tensor& weight, const num::Tensor& bias) const;

  ModelConfig config_;
  // Acoustic branch
  num::Tensor speech_mask_;
  num::Tensor conv1_w_, conv1_b_, conv2_w_, conv2_b_;
  nn::Linear acoustic_proj_;
  nn::EncoderStack acoustic_stack_;
  // Text branch
  num::Tensor token_embedding_;
  num::Tensor token_mask_;
  nn::EncoderStack text_stack_;
  num::Tensor language_embedding_;  // [2, d]: source, target
  // Shared encoder and heads
  nn::EncoderStack encoder_;
  num::Tensor token_head_w_, token_head_b_;
  nn::Linear recon_proj_;
  num::Tensor deconv1_w_, deconv1_b_, deconv2_w_, deconv2_b_;
  nn::Linear ctc_proj_;
  // Decoder
  std::vector<nn::DecoderLayer> decoder_layers_;
  nn::LayerNorm decoder_norm_;
  num::Tensor output_w_, output_b_;

  ParameterMap params_;
};

struct ModelCheckpoint {
  ModelConfig config;
  ParameterMap tensors;
  ParameterMap optimizer;  // stored under the "optim." prefix
  std::uint64_t vocab_hash = 0;
  std::uint64_t step = 0;
  Config extra;  // free-form training metadata

  // Canonical key=value block written into the file header.
  std::string header_text() const;
};

ModelCheckpoint make_checkpoint(const FatModel& model, std::uint64_t vocab_hash, std::uint64_t step);
FatModel model_from_checkpoint(const ModelCheckpoint& ck);

// FATC: magic, u32 version, u32 header bytes, header text, u32 tensor count,
// then per tensor (name-sorted): u32 name bytes, name, u32 rank, u32 dims,
// little-endian f32 payload.
void save_checkpoint(const std::string& path, const ModelCheckpoint& ck);
ModelCheckpoint load_checkpoint(const std::string& path);

// Encoder copied verbatim; decoder layer i takes self-attention, FFN and their
// norms from shared encoder layer i; cross-attention, final decoder norm and
// output bias come from a fresh initialization with `seed`.
FatModel init_fatst_from_fatmlm(const ModelCheckpoint& pretrained, const ModelConfig& target,
                                std::uint64_t seed);

ModelCheckpoint average_checkpoints(const std::vector<ModelCheckpoint>& cks);

}  // namespace fatspeech
