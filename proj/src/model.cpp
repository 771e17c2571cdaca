#include "fatspeech/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "fatspeech/errors.hpp"
#include "fatspeech/numerics/ops.hpp"

namespace fatspeech {

using namespace fatspeech::num;

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

const char* activation_name(nn::Activation a) { return a == nn::Activation::kGelu ? "gelu" : "relu"; }

nn::Activation parse_activation(const std::string& s) {
  if (s == "relu") return nn::Activation::kRelu;
  if (s == "gelu") return nn::Activation::kGelu;
  throw UsageError("model.activation must be relu or gelu, got " + s);
}

std::size_t get_size(const Config& c, const std::string& key, std::size_t fallback) {
  const long long v = c.get_int(key, static_cast<long long>(fallback));
  if (v < 0) throw UsageError(key + " must be non-negative");
  return static_cast<std::size_t>(v);
}

Tensor conv_weight(std::size_t a, std::size_t b, std::size_t k, std::mt19937_64& rng) {
  return nn::xavier_uniform(b * k * k, a * k * k, {a, b, k, k}, rng);
}

void copy_values(Tensor& dst, const Tensor& src, const std::string& name) {
  if (dst.shape() != src.shape()) {
    throw DataError("parameter " + name + " has shape " + shape_str(src.shape()) + ", expected " +
                    shape_str(dst.shape()));
  }
  std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
}

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T take(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw DataError(path + ": truncated checkpoint");
  return v;
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model == 0 || heads == 0 || d_model % heads != 0)
    throw UsageError("model.d_model must be a positive multiple of model.heads");
  if (ffn_dim < d_model) throw UsageError("model.ffn_dim must be >= model.d_model");
  if (feature_dim == 0) throw UsageError("model.feature_dim must be positive");
  if (vocab_size <= 5) throw UsageError("model.vocab_size must exceed the reserved ids");
  if (conv_channels == 0) throw UsageError("model.conv_channels must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw UsageError("model.dropout must be in [0, 1)");
  if (!(mask.lambda >= 0.0 && mask.lambda <= 1.0)) throw UsageError("mask.lambda must be in [0, 1]");
  if (mask.span_len == 0) throw UsageError("mask.span_len must be >= 1");
}

Config ModelConfig::to_config() const {
  Config c;
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  c.set("mask.lambda", num(mask.lambda));
  c.set("mask.span_len", std::to_string(mask.span_len));
  c.set("model.acoustic_layers", std::to_string(acoustic_layers));
  c.set("model.activation", activation_name(activation));
  c.set("model.conv_channels", std::to_string(conv_channels));
  c.set("model.d_model", std::to_string(d_model));
  c.set("model.decoder_layers", std::to_string(decoder_layers));
  c.set("model.dropout", num(dropout));
  c.set("model.feature_dim", std::to_string(feature_dim));
  c.set("model.ffn_dim", std::to_string(ffn_dim));
  c.set("model.heads", std::to_string(heads));
  c.set("model.hierarchical", hierarchical ? "true" : "false");
  c.set("model.shared_layers", std::to_string(shared_layers));
  c.set("model.tie_embeddings", tie_embeddings ? "true" : "false");
  c.set("model.translation", translation ? "true" : "false");
  c.set("model.vocab_size", std::to_string(vocab_size));
  return c;
}

ModelConfig ModelConfig::from_config(const Config& c) {
  ModelConfig m;
  m.d_model = get_size(c, "model.d_model", m.d_model);
  m.heads = get_size(c, "model.heads", m.heads);
  m.acoustic_layers = get_size(c, "model.acoustic_layers", m.acoustic_layers);
  m.shared_layers = get_size(c, "model.shared_layers", m.shared_layers);
  m.decoder_layers = get_size(c, "model.decoder_layers", m.decoder_layers);
  m.ffn_dim = get_size(c, "model.ffn_dim", m.ffn_dim);
  m.feature_dim = get_size(c, "model.feature_dim", m.feature_dim);
  m.vocab_size = get_size(c, "model.vocab_size", m.vocab_size);
  m.conv_channels = get_size(c, "model.conv_channels", m.conv_channels);
  m.dropout = c.get_double("model.dropout", m.dropout);
  m.hierarchical = c.get_bool("model.hierarchical", m.hierarchical);
  m.translation = c.get_bool("model.translation", m.translation);
  m.tie_embeddings = c.get_bool("model.tie_embeddings", m.tie_embeddings);
  m.activation = parse_activation(c.get("model.activation", activation_name(m.activation)));
  m.mask.lambda = c.get_double("mask.lambda", m.mask.lambda);
  m.mask.span_len = get_size(c, "mask.span_len", m.mask.span_len);
  m.validate();
  return m;
}

std::vector<std::string> ModelConfig::architecture_mismatches(const ModelConfig& other) const {
  const Config a = to_config(), b = other.to_config();
  std::vector<std::string> out;
  for (const auto& [k, v] : a.entries()) {
    if (k == "model.dropout" || k.rfind("mask.", 0) == 0) continue;
    const std::string w = b.get(k, "");
    if (v != w) out.push_back(k + " (" + v + " vs " + w + ")");
  }
  return out;
}

const char* segment_name(Segment s) {
  switch (s) {
    case Segment::kSpeech: return "speech";
    case Segment::kSource: return "source";
    case Segment::kTarget: return "target";
  }
  return "?";
}

const SegmentSpan* FusedEncoderStates::find(Segment s) const {
  for (const auto& seg : segments)
    if (seg.kind == s) return &seg;
  return nullptr;
}

Tensor FusedEncoderStates::rows(Segment s) const {
  const SegmentSpan* seg = find(s);
  if (!seg) throw DataError(std::string("encoder states have no ") + segment_name(s) + " segment");
  if (seg->begin == 0 && seg->length == hidden.dim(0)) return hidden;
  return slice(hidden, 0, seg->begin, seg->begin + seg->length);
}

std::vector<std::size_t> FusedEncoderStates::position_indices() const {
  std::vector<std::size_t> out;
  for (const auto& seg : segments)
    for (std::size_t i = 0; i < seg.length; ++i) out.push_back(i);
  return out;
}

FatModel::FatModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model, c = config_.conv_channels, v = config_.vocab_size;
  const auto f = config_.feature_dim;
  const auto sub = conv2d_output_shape(1, f, 3, 2, 1).freq;
  const auto sub2 = conv2d_output_shape(1, sub, 3, 2, 1).freq;
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));

  speech_mask_ = nn::normal_init({f}, emb_std, rng);
  conv1_w_ = conv_weight(c, 1, 3, rng);
  conv1_b_ = Tensor::zeros({c});
  conv2_w_ = conv_weight(c, c, 3, rng);
  conv2_b_ = Tensor::zeros({c});
  acoustic_proj_ = nn::Linear(c * sub2, d, rng);
  acoustic_stack_ = nn::EncoderStack(config_.acoustic_layers, d, config_.heads, config_.ffn_dim,
                                     config_.activation, rng);

  token_embedding_ = nn::normal_init({v, d}, emb_std, rng);
  token_mask_ = nn::normal_init({d}, emb_std, rng);
  if (config_.hierarchical) {
    text_stack_ = nn::EncoderStack(config_.acoustic_layers, d, config_.heads, config_.ffn_dim,
                                   config_.activation, rng);
  }
  if (config_.translation) language_embedding_ = nn::normal_init({2, d}, emb_std, rng);

  encoder_ = nn::EncoderStack(config_.shared_layers, d, config_.heads, config_.ffn_dim, config_.activation, rng);
  if (!config_.tie_embeddings) token_head_w_ = nn::normal_init({v, d}, emb_std, rng);
  token_head_b_ = Tensor::zeros({v});
  recon_proj_ = nn::Linear(d, c * sub2, rng);
  deconv1_w_ = conv_weight(c, c, 3, rng);
  deconv1_b_ = Tensor::zeros({c});
  deconv2_w_ = conv_weight(c, 1, 3, rng);
  deconv2_b_ = Tensor::zeros({1});
  ctc_proj_ = nn::Linear(d, v + 1, rng);

  decoder_layers_.reserve(config_.decoder_layers);
  for (std::size_t i = 0; i < config_.decoder_layers; ++i)
    decoder_layers_.emplace_back(d, config_.heads, config_.ffn_dim, config_.activation, rng);
  decoder_norm_ = nn::LayerNorm(d);
  if (!config_.tie_embeddings) output_w_ = nn::normal_init({v, d}, emb_std, rng);
  output_b_ = Tensor::zeros({v});

  register_parameters();
  round_parameters_to_float();
}

void FatModel::register_parameters() {
  params_.clear();
  const nn::ParamVisitor add = [this](const std::string& name, Tensor& t) {
    if (!t.defined()) return;
    if (!params_.emplace(name, t).second) throw std::logic_error("duplicate parameter " + name);
  };
  add("acoustic.conv1.bias", conv1_b_);
  add("acoustic.conv1.weight", conv1_w_);
  add("acoustic.conv2.bias", conv2_b_);
  add("acoustic.conv2.weight", conv2_w_);
  add("acoustic.mask_vector", speech_mask_);
  acoustic_proj_.visit("acoustic.proj", add);
  acoustic_stack_.visit("acoustic.stack", add);
  add("text.embedding", token_embedding_);
  add("text.mask_vector", token_mask_);
  if (config_.hierarchical) text_stack_.visit("text.stack", add);
  add("language.embedding", language_embedding_);
  encoder_.visit("encoder", add);
  add("token_head.bias", token_head_b_);
  add("token_head.weight", token_head_w_);
  recon_proj_.visit("recon.proj", add);
  add("recon.deconv1.bias", deconv1_b_);
  add("recon.deconv1.weight", deconv1_w_);
  add("recon.deconv2.bias", deconv2_b_);
  add("recon.deconv2.weight", deconv2_w_);
  ctc_proj_.visit("ctc.proj", add);
  for (std::size_t i = 0; i < decoder_layers_.size(); ++i)
    decoder_layers_[i].visit("decoder.layers." + std::to_string(i), add);
  decoder_norm_.visit("decoder.norm", add);
  add("decoder.output.bias", output_b_);
  add("decoder.output.weight", output_w_);
  for (auto& [name, t] : params_) t.set_requires_grad(true);
}

std::size_t FatModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void FatModel::load_parameters(const ParameterMap& values) {
  std::string missing, extra;
  for (const auto& [name, t] : params_)
    if (!values.count(name)) missing += " " + name;
  for (const auto& [name, t] : values)
    if (!params_.count(name)) extra += " " + name;
  if (!missing.empty() || !extra.empty()) {
    throw DataError("parameter set mismatch;" + (missing.empty() ? "" : " missing:" + missing) +
                    (extra.empty() ? "" : " unexpected:" + extra));
  }
  for (auto& [name, t] : params_) copy_values(t, values.at(name), name);
}

void FatModel::round_parameters_to_float() {
  for (auto& [name, t] : params_)
    for (double& x : t.mutable_data()) x = static_cast<double>(static_cast<float>(x));
}

nn::ForwardContext FatModel::context(bool training, std::uint64_t seed) const {
  nn::ForwardContext ctx;
  ctx.training = training;
  ctx.dropout = training ? config_.dropout : 0.0;
  ctx.seed = seed;
  return ctx;
}

Tensor FatModel::acoustic_embed(const Tensor& speech, const MaskPlan* mask, nn::ForwardContext& ctx,
                                nn::AttentionRecorder* rec) const {
  if (speech.rank() != 2 || speech.dim(1) != config_.feature_dim) {
    throw ShapeError("acoustic_embed", speech.shape(), Shape{0, config_.feature_dim});
  }
  const std::size_t frames = speech.dim(0);
  if (frames < 4) {
    throw DataError("acoustic_embed: need at least 4 frames, got " + std::to_string(frames));
  }
  Tensor x = speech;
  if (mask) {
    if (mask->size() != frames) throw ShapeError("acoustic_embed", "mask length differs from frame count");
    x = substitute_rows(x, speech_mask_, mask->indicator);
  }
  x = reshape(x, {1, frames, config_.feature_dim});
  x = activate(conv2d(x, conv1_w_, conv1_b_, 2, 1));
  x = activate(conv2d(x, conv2_w_, conv2_b_, 2, 1));
  const std::size_t c = x.dim(0), t = x.dim(1), f = x.dim(2);
  x = reshape(swap_leading_axes(x), {t, c * f});
  x = add(acoustic_proj_(x), nn::sinusoidal_positions(t, config_.d_model));
  return acoustic_stack_(ctx.maybe_dropout(x), ctx, rec);
}

Tensor FatModel::embed_text(std::span<const int> ids, const MaskPlan* mask) const {
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(config_.vocab_size));
  }
  Tensor x = scale(embedding(token_embedding_, ids), std::sqrt(static_cast<double>(config_.d_model)));
  if (mask) {
    if (mask->size() != ids.size()) throw ShapeError("embed_text", "mask length differs from token count");
    x = substitute_rows(x, token_mask_, mask->indicator);
  }
  return x;
}

FusedEncoderStates FatModel::fuse_encode(const Tensor* speech, const Tensor* source, const Tensor* target,
                                         nn::ForwardContext& ctx, nn::AttentionRecorder* rec) const {
  FusedEncoderStates out;
  std::vector<Tensor> parts;
  std::size_t offset = 0;
  auto language_row = [&](std::size_t row) {
    return reshape(slice(language_embedding_, 0, row, row + 1), {config_.d_model});
  };
  auto push = [&](const Tensor* seg, Segment kind) {
    if (!seg) return;
    if (seg->rank() != 2 || seg->dim(1) != config_.d_model || seg->dim(0) == 0) {
      throw ShapeError("fuse_encode", seg->shape(), Shape{0, config_.d_model});
    }
    const std::size_t n = seg->dim(0);
    Tensor h = *seg;
    if (kind != Segment::kSpeech) {
      h = add(h, nn::sinusoidal_positions(n, config_.d_model));
      if (config_.hierarchical) h = text_stack_(ctx.maybe_dropout(h), ctx);
    }
    if (config_.translation) h = add_row(h, language_row(kind == Segment::kTarget ? 1 : 0));
    parts.push_back(h);
    out.segments.push_back({kind, offset, n});
    offset += n;
  };
  push(speech, Segment::kSpeech);
  push(source, Segment::kSource);
  push(target, Segment::kTarget);
  if (parts.empty()) throw DataError("fuse_encode: no segment present");
  const Tensor joined = parts.size() == 1 ? parts.front() : concat(parts, 0);
  out.hidden = encoder_(ctx.maybe_dropout(joined), ctx, rec);
  return out;
}

Tensor FatModel::reconstruct_speech(const FusedEncoderStates& states, std::size_t frames) const {
  const Tensor h = states.rows(Segment::kSpeech);
  const std::size_t t = h.dim(0);
  const std::size_t c = config_.conv_channels;
  const std::size_t f = recon_proj_.weight.dim(1) / c;
  if (4 * t < frames) throw ShapeError("reconstruct_speech", "speech segment too short for requested frames");
  Tensor x = reshape(recon_proj_(h), {t, c, f});
  x = swap_leading_axes(x);
  x = activate(conv_transpose2d(x, deconv1_w_, deconv1_b_, 2, 1, 1));
  x = conv_transpose2d(x, deconv2_w_, deconv2_b_, 2, 1, 1);
  x = slice(slice(x, 1, 0, frames), 2, 0, config_.feature_dim);
  return reshape(x, {frames, config_.feature_dim});
}

Tensor FatModel::activate(const Tensor& x) const {
  return config_.activation == nn::Activation::kGelu ? gelu(x) : relu(x);
}

Tensor FatModel::output_projection(const Tensor& h, const Tensor& weight, const Tensor& bias) const {
  return add_row(matmul_nt(h, config_.tie_embeddings ? token_embedding_ : weight), bias);
}

Tensor FatModel::predict_tokens(const FusedEncoderStates& states, Segment segment) const {
  if (segment == Segment::kSpeech) throw DataError("predict_tokens needs a text segment");
  return output_projection(states.rows(segment), token_head_w_, token_head_b_);
}

Tensor FatModel::ctc_head(const Tensor& acoustic) const { return log_softmax(ctc_proj_(acoustic)); }

FusedEncoderStates FatModel::encode_speech(const Tensor& speech, nn::ForwardContext& ctx) const {
  const Tensor e = acoustic_embed(speech, nullptr, ctx);
  return fuse_encode(&e, nullptr, nullptr, ctx);
}

FusedEncoderStates FatModel::encode_text(std::span<const int> ids, nn::ForwardContext& ctx) const {
  const Tensor e = embed_text(ids, nullptr);
  return fuse_encode(nullptr, &e, nullptr, ctx);
}

Tensor FatModel::decoder_logits(const Tensor& memory, std::span<const int> inputs,
                                nn::ForwardContext& ctx) const {
  if (inputs.empty()) throw DataError("decoder needs at least the bos token");
  Tensor x = embed_text(inputs, nullptr);
  x = add(x, nn::sinusoidal_positions(inputs.size(), config_.d_model));
  if (config_.translation) x = add_row(x, reshape(slice(language_embedding_, 0, 1, 2), {config_.d_model}));
  x = ctx.maybe_dropout(x);
  for (const auto& layer : decoder_layers_) x = layer(x, memory, ctx);
  return output_projection(decoder_norm_(x), output_w_, output_b_);
}

std::vector<double> FatModel::decode_step(std::span<const int> prefix, const Tensor& memory) const {
  NoGradScope no_grad;
  nn::ForwardContext ctx = context(false, 0);
  const Tensor logp = log_softmax(decoder_logits(memory, prefix, ctx));
  const std::size_t v = logp.dim(1), last = logp.dim(0) - 1;
  return {logp.data().begin() + static_cast<std::ptrdiff_t>(last * v),
          logp.data().begin() + static_cast<std::ptrdiff_t>((last + 1) * v)};
}

std::string ModelCheckpoint::header_text() const {
  Config c = config.to_config();
  c.merge(extra);
  c.set("meta.step", std::to_string(step));
  c.set("meta.vocab_hash", std::to_string(vocab_hash));
  return c.to_text();
}

ModelCheckpoint make_checkpoint(const FatModel& model, std::uint64_t vocab_hash, std::uint64_t step) {
  ModelCheckpoint ck;
  ck.config = model.config();
  for (const auto& [name, t] : model.parameters()) ck.tensors.emplace(name, t.detach());
  ck.vocab_hash = vocab_hash;
  ck.step = step;
  return ck;
}

FatModel model_from_checkpoint(const ModelCheckpoint& ck) {
  FatModel m(ck.config, 0);
  m.load_parameters(ck.tensors);
  return m;
}

void save_checkpoint(const std::string& path, const ModelCheckpoint& ck) {
  std::map<std::string, const Tensor*> all;
  for (const auto& [name, t] : ck.tensors) all.emplace(name, &t);
  for (const auto& [name, t] : ck.optimizer) all.emplace("optim." + name, &t);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint " + path);
    os.write("FATC", 4);
    put<std::uint32_t>(os, kCheckpointVersion);
    const std::string header = ck.header_text();
    put<std::uint32_t>(os, static_cast<std::uint32_t>(header.size()));
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(all.size()));
    for (const auto& [name, t] : all) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(t->rank()));
      for (std::size_t d : t->shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
      std::vector<float> payload(t->data().begin(), t->data().end());
      os.write(reinterpret_cast<const char*>(payload.data()),
               static_cast<std::streamsize>(payload.size() * sizeof(float)));
    }
    if (!os) throw DataError("failed writing checkpoint " + path);
  }
  std::rename(tmp.c_str(), path.c_str());
}

ModelCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FATC", 4) != 0) throw DataError(path + ": bad checkpoint magic");
  const auto version = take<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) throw DataError(path + ": unsupported checkpoint version");
  const auto header_len = take<std::uint32_t>(is, path);
  std::string header(header_len, '\0');
  if (!is.read(header.data(), header_len)) throw DataError(path + ": truncated checkpoint");
  Config header_cfg = Config::parse(header);
  ModelCheckpoint ck;
  ck.config = ModelConfig::from_config(header_cfg);
  ck.step = static_cast<std::uint64_t>(std::stoull(header_cfg.get("meta.step", "0")));
  ck.vocab_hash = static_cast<std::uint64_t>(std::stoull(header_cfg.get("meta.vocab_hash", "0")));
  for (const auto& [k, v] : header_cfg.entries())
    if (k.rfind("model.", 0) != 0 && k.rfind("mask.", 0) != 0 && k.rfind("meta.", 0) != 0) ck.extra.set(k, v);
  const auto count = take<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = take<std::uint32_t>(is, path);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw DataError(path + ": truncated checkpoint");
    const auto rank = take<std::uint32_t>(is, path);
    if (rank > 8) throw DataError(path + ": implausible tensor rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = take<std::uint32_t>(is, path);
    std::vector<float> payload(shape_numel(shape));
    if (!is.read(reinterpret_cast<char*>(payload.data()),
                 static_cast<std::streamsize>(payload.size() * sizeof(float)))) {
      throw DataError(path + ": truncated checkpoint");
    }
    Tensor t(shape, std::vector<double>(payload.begin(), payload.end()));
    if (name.rfind("optim.", 0) == 0) {
      ck.optimizer.emplace(name.substr(6), t);
    } else {
      ck.tensors.emplace(name, t);
    }
  }
  return ck;
}

FatModel init_fatst_from_fatmlm(const ModelCheckpoint& pretrained, const ModelConfig& target,
                                std::uint64_t seed) {
  const auto mismatches = pretrained.config.architecture_mismatches(target);
  if (!mismatches.empty()) {
    std::string msg = "pretrained checkpoint config mismatch:";
    for (const auto& m : mismatches) msg += " " + m;
    throw DataError(msg);
  }
  if (!pretrained.config.translation) {
    throw DataError("decoder initialization needs a translation-mode pretrained checkpoint");
  }
  if (target.decoder_layers > target.shared_layers) {
    throw DataError("decoder has more layers than the shared encoder it is initialized from");
  }
  FatModel model(target, seed);
  ParameterMap& params = model.parameters();
  for (auto& [name, t] : params) {
    if (name.rfind("decoder.", 0) == 0) continue;
    const auto it = pretrained.tensors.find(name);
    if (it == pretrained.tensors.end()) throw DataError("pretrained checkpoint lacks " + name);
    copy_values(t, it->second, name);
  }
  const std::pair<const char*, const char*> transfer[] = {
      {"self_attn", "attn"}, {"self_norm", "attn_norm"}, {"ffn", "ffn"}, {"ffn_norm", "ffn_norm"}};
  for (auto& [name, t] : params) {
    if (name.rfind("decoder.layers.", 0) != 0) continue;
    const std::string rest = name.substr(std::strlen("decoder.layers."));
    const std::size_t dot = rest.find('.');
    const std::string index = rest.substr(0, dot);
    const std::string tail = rest.substr(dot + 1);
    for (const auto& [dec, enc] : transfer) {
      const std::string prefix = std::string(dec) + ".";
      if (tail.rfind(prefix, 0) != 0) continue;
      const std::string source = "encoder.layers." + index + "." + enc + "." + tail.substr(prefix.size());
      const auto it = pretrained.tensors.find(source);
      if (it == pretrained.tensors.end()) throw DataError("pretrained checkpoint lacks " + source);
      copy_values(t, it->second, name);
    }
  }
  return model;
}

ModelCheckpoint average_checkpoints(const std::vector<ModelCheckpoint>& cks) {
  if (cks.empty()) throw DataError("average_checkpoints: empty list");
  const ModelCheckpoint& first = cks.front();
  for (const auto& ck : cks) {
    const auto mismatches = first.config.architecture_mismatches(ck.config);
    if (!mismatches.empty()) throw DataError("average_checkpoints: config mismatch " + mismatches.front());
    if (ck.tensors.size() != first.tensors.size()) throw DataError("average_checkpoints: parameter sets differ");
    for (const auto& [name, t] : first.tensors) {
      const auto it = ck.tensors.find(name);
      if (it == ck.tensors.end()) throw DataError("average_checkpoints: missing " + name);
      if (it->second.shape() != t.shape()) throw DataError("average_checkpoints: shape mismatch for " + name);
    }
  }
  ModelCheckpoint out;
  out.config = first.config;
  out.vocab_hash = first.vocab_hash;
  out.extra = first.extra;
  for (const auto& ck : cks) out.step = std::max(out.step, ck.step);
  const double n = static_cast<double>(cks.size());
  for (const auto& [name, t] : first.tensors) {
    std::vector<double> acc(t.numel(), 0.0);
    std::vector<double> column(cks.size());
    for (std::size_t i = 0; i < acc.size(); ++i) {
      // Summing in sorted order makes the mean independent of list order.
      for (std::size_t k = 0; k < cks.size(); ++k) column[k] = cks[k].tensors.at(name).at(i);
      std::sort(column.begin(), column.end());
      double total = 0.0;
      for (double x : column) total += x;
      acc[i] = static_cast<double>(static_cast<float>(total / n));
    }
    out.tensors.emplace(name, Tensor(t.shape(), std::move(acc)));
  }
  return out;
}

}  // namespace fatspeech
