#include "commands.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "fatspeech/attention.hpp"
#include "fatspeech/config.hpp"
#include "fatspeech/corpus.hpp"
#include "fatspeech/errors.hpp"
#include "fatspeech/features.hpp"
#include "fatspeech/inference.hpp"
#include "fatspeech/model.hpp"
#include "fatspeech/synth.hpp"
#include "fatspeech/trainer.hpp"

namespace fatspeech::cli {

namespace fs = std::filesystem;

namespace {

Config resolve_config(const CommonOptions& o) {
  Config c;
  if (!o.config_path.empty()) c = Config::load(o.config_path);
  c.apply_overrides(o.overrides);
  if (o.seed) {
    c.set("train.seed", std::to_string(*o.seed));
  } else if (const char* env = std::getenv("FATSPEECH_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0') throw UsageError(std::string("FATSPEECH_SEED is not an integer: ") + env);
    c.set("train.seed", std::to_string(v));
  }
  return c;
}

std::uint64_t seed_of(const CommonOptions& o) {
  return static_cast<std::uint64_t>(resolve_config(o).get_int("train.seed", 1));
}

Flavor parse_flavor(const std::string& text) {
  Flavor f = 0;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part == "s") {
      f |= kSpeechBit;
    } else if (part == "x") {
      f |= kSourceBit;
    } else if (part == "y") {
      f |= kTargetBit;
    } else {
      throw UsageError("flavor must be a comma list of s, x, y; got '" + text + "'");
    }
  }
  if (f == 0) throw UsageError("empty flavor");
  return f;
}

void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) throw DataError(std::string(what) + " not found: " + path);
}

std::vector<MultimodalExample> load_roles(const DataRoles& roles, const Vocabulary& vocab,
                                          const ManifestOptions& opts) {
  struct Role {
    const std::vector<std::string>* paths;
    Flavor keep;
    Flavor need;
    const char* name;
  };
  const Role table[] = {
      {&roles.st, kSpeechBit | kSourceBit | kTargetBit, kSpeechBit | kTargetBit, "--st"},
      {&roles.asr, kSpeechBit | kSourceBit, kSpeechBit | kSourceBit, "--asr"},
      {&roles.mt, kSourceBit | kTargetBit, kSourceBit | kTargetBit, "--mt"},
      {&roles.speech, kSpeechBit, kSpeechBit, "--speech"},
      {&roles.mono_src, kSourceBit, kSourceBit, "--mono-src"},
      {&roles.mono_tgt, kTargetBit, kTargetBit, "--mono-tgt"},
  };
  std::vector<MultimodalExample> out;
  for (const Role& role : table) {
    for (const auto& path : *role.paths) {
      require_file(path, "manifest");
      for (auto& ex : load_manifest(path, vocab, opts)) {
        if ((ex.flavor() & role.need) != role.need) {
          throw DataError(path + ": example '" + ex.id + "' lacks fields required by " + role.name + " (" +
                          flavor_name(role.need) + ")");
        }
        MultimodalExample v = ex.view(ex.flavor() & role.keep);
        v.uid = out.size();
        out.push_back(std::move(v));
      }
    }
  }
  return out;
}

std::vector<Batch> dev_batches(const std::vector<std::string>& paths, const Vocabulary& vocab,
                               const ManifestOptions& mo, const TrainConfig& tc) {
  if (paths.empty()) return {};
  for (const auto& p : paths) require_file(p, "dev manifest");
  return filter_and_bucket(load_manifests(paths, vocab, mo), tc.bucket, tc.seed);
}

void check_vocab(const ModelCheckpoint& ck, const Vocabulary& vocab) {
  if (ck.vocab_hash != 0 && ck.vocab_hash != vocab.hash())
    throw DataError("checkpoint was trained with a different vocabulary");
  if (ck.config.vocab_size != vocab.size())
    throw DataError("checkpoint vocabulary size " + std::to_string(ck.config.vocab_size) + " differs from " +
                    std::to_string(vocab.size()));
}

ModelConfig model_config_for(const Config& cfg, const Vocabulary& vocab) {
  ModelConfig mc = ModelConfig::from_config(cfg);
  if (cfg.has("model.vocab_size") && mc.vocab_size != vocab.size())
    throw UsageError("model.vocab_size disagrees with the vocabulary (" + std::to_string(vocab.size()) + ")");
  mc.vocab_size = vocab.size();
  mc.validate();
  return mc;
}

int run_training(const TrainCliOptions& o, TrainMode mode) {
  if (o.vocab.empty()) throw UsageError("--vocab is required");
  if (o.out.empty()) throw UsageError("--out is required");
  if (o.data.empty()) throw UsageError("no training manifests given");
  Config cfg = resolve_config(o.common);
  if (o.hierarchical) cfg.set("model.hierarchical", "true");
  require_file(o.vocab, "vocabulary");
  const Vocabulary vocab = Vocabulary::load(o.vocab);
  const TrainConfig tc = TrainConfig::from_config(cfg);

  std::optional<ModelCheckpoint> resume, init;
  ModelConfig mc;
  if (!o.resume.empty()) {
    require_file(o.resume, "checkpoint");
    resume = load_checkpoint(o.resume);
    check_vocab(*resume, vocab);
    mc = resume->config;
  } else if (!o.init.empty()) {
    require_file(o.init, "checkpoint");
    init = load_checkpoint(o.init);
    check_vocab(*init, vocab);
    Config merged = init->config.to_config();
    merged.merge(cfg);
    mc = model_config_for(merged, vocab);
  } else {
    mc = model_config_for(cfg, vocab);
  }

  const ManifestOptions mo{mc.feature_dim, true};
  const auto examples = load_roles(o.data, vocab, mo);
  FilterReport report;
  const auto batches = filter_and_bucket(examples, tc.bucket, tc.seed, &report);
  if (report.dropped)
    std::fprintf(stderr, "dropped %zu examples longer than %zu frames\n", report.dropped, tc.bucket.max_frames);
  if (batches.empty()) throw DataError("no training examples left after filtering");
  BatchSchedule schedule = mode == TrainMode::kPretrain ? BatchSchedule::pretraining(batches, tc.seed, tc.proportional)
                                                        : BatchSchedule::finetuning(batches, tc.seed, tc.proportional);
  const auto dev = dev_batches(o.dev, vocab, mo, tc);
  std::string streams;
  for (const auto& n : schedule.stream_names()) streams += " " + n;

  FatModel model = init ? init_fatst_from_fatmlm(*init, mc, tc.seed) : FatModel(mc, tc.seed);
  Trainer trainer(model, tc, mode, std::move(schedule), vocab.hash());
  if (resume) trainer.resume(*resume);
  std::fprintf(stderr, "%s: %zu parameters, %zu examples in %zu batches, streams:%s\n", train_mode_name(mode),
               model.parameter_count(), examples.size() - report.dropped, batches.size(), streams.c_str());

  fs::create_directories(o.out);
  std::optional<std::ofstream> dev_log;
  if (!dev.empty()) {
    const fs::path p = fs::path(o.out) / "dev_log.csv";
    const bool fresh = !resume || !fs::exists(p);
    dev_log.emplace(p, fresh ? std::ios::trunc : std::ios::app);
    if (fresh) *dev_log << "step,dev_loss\n";
  }
  auto on_step = [&](const StepReport& r) {
    if (r.step % tc.checkpoint_interval != 0 && r.step != tc.steps) return;
    std::fprintf(stderr, "step %llu loss %.6f lr %.3g grad-norm %.3f", static_cast<unsigned long long>(r.step),
                 r.loss.total, r.lr, r.grad_norm);
    if (dev_log) {
      const double d = trainer.dev_loss(dev);
      std::fprintf(stderr, " dev %.6f", d);
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", d);
      *dev_log << r.step << ',' << buf << '\n' << std::flush;
    }
    std::fprintf(stderr, "\n");
  };
  const TrainResult result = trainer.run(o.out, on_step);
  std::printf("%s\n", result.final_checkpoint.c_str());
  return 0;
}

struct DecodeJob {
  const MultimodalExample* example;
  bool speech;
};

std::vector<DecodeJob> decode_jobs(const std::vector<MultimodalExample>& examples, const std::string& source) {
  if (source != "auto" && source != "speech" && source != "text")
    throw UsageError("--source must be auto, speech or text");
  std::vector<DecodeJob> jobs;
  for (const auto& ex : examples) {
    bool speech = source == "speech" || (source == "auto" && ex.speech);
    if (speech && !ex.speech) throw DataError("example '" + ex.id + "' has no speech");
    if (!speech && !ex.transcription) throw DataError("example '" + ex.id + "' has no source text or speech");
    jobs.push_back({&ex, speech});
  }
  return jobs;
}

struct Decoded {
  std::vector<Hypothesis> hypotheses;
  std::vector<double> seconds;
};

Decoded decode_all(const FatModel& model, const std::vector<DecodeJob>& jobs, const DecodeOptions& o) {
  if (o.beam == 0) throw UsageError("--beam must be >= 1");
  Decoded out;
  out.hypotheses.resize(jobs.size());
  out.seconds.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        const DecodeJob& job = jobs[i];
        const auto t0 = std::chrono::steady_clock::now();
        BeamOptions bo{o.beam, o.alpha, o.max_len};
        if (job.speech) {
          if (!o.max_len) bo.max_len = default_max_len(job.example->speech->frames, true);
          out.hypotheses[i] = translate_speech(model, job.example->speech->to_tensor(), bo);
        } else {
          if (!o.max_len) bo.max_len = default_max_len(job.example->transcription->size(), false);
          out.hypotheses[i] = translate_text(model, job.example->transcription->ids, bo);
        }
        out.seconds[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = jobs.size();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(o.jobs, jobs.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

struct LoadedModel {
  ModelCheckpoint ck;
  Vocabulary vocab;
  FatModel model;
};

LoadedModel load_model(const std::string& ckpt, const std::string& vocab_path) {
  if (ckpt.empty()) throw UsageError("--ckpt is required");
  if (vocab_path.empty()) throw UsageError("--vocab is required");
  require_file(ckpt, "checkpoint");
  require_file(vocab_path, "vocabulary");
  ModelCheckpoint ck = load_checkpoint(ckpt);
  Vocabulary vocab = Vocabulary::load(vocab_path);
  check_vocab(ck, vocab);
  FatModel model = model_from_checkpoint(ck);
  return {std::move(ck), std::move(vocab), std::move(model)};
}

std::vector<std::string> render(const Vocabulary& vocab, const std::vector<Hypothesis>& hyps) {
  std::vector<std::string> out;
  for (const auto& h : hyps) out.push_back(vocab.decode(h.output()));
  return out;
}

void write_timing(const std::string& path, const std::vector<DecodeJob>& jobs, const Decoded& d) {
  double total = 0.0;
  for (double s : d.seconds) total += s;
  std::fprintf(stderr, "decoded %zu utterances in %.3f s (%.2f ms each)\n", jobs.size(), total,
               jobs.empty() ? 0.0 : 1000.0 * total / static_cast<double>(jobs.size()));
  if (path.empty()) return;
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  os << "id,source,source_length,output_tokens,seconds\n";
  char buf[64];
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const auto& ex = *jobs[i].example;
    const std::size_t len = jobs[i].speech ? ex.speech->frames : ex.transcription->size();
    std::snprintf(buf, sizeof buf, "%.6f", d.seconds[i]);
    os << ex.id << ',' << (jobs[i].speech ? "speech" : "text") << ',' << len << ','
       << d.hypotheses[i].output().size() << ',' << buf << '\n';
  }
}

}  // namespace

bool DataRoles::empty() const {
  return st.empty() && asr.empty() && mt.empty() && speech.empty() && mono_src.empty() && mono_tgt.empty();
}

int cmd_vocab(const VocabOptions& o) {
  if (o.inputs.empty()) throw UsageError("--input is required");
  if (o.out.empty()) throw UsageError("--out is required");
  std::vector<std::string> lines;
  std::vector<Spectrogram> speech;
  for (const auto& path : o.inputs) {
    require_file(path, "manifest");
    for (auto& t : manifest_texts(path)) lines.push_back(std::move(t));
    if (o.stats)
      for (auto& s : manifest_spectrograms(path, o.feature_dim)) speech.push_back(std::move(s));
  }
  Vocabulary vocab = Vocabulary::train(lines, o.size);
  if (!speech.empty()) vocab.feature_stats = compute_feature_stats(speech);
  vocab.save(o.out);
  std::fprintf(stderr, "vocabulary: %zu pieces from %zu lines, feature stats over %zu utterances\n", vocab.size(),
               lines.size(), speech.size());
  return 0;
}

int cmd_synth(const SynthCliOptions& o, const CommonOptions& common) {
  if (o.out.empty()) throw UsageError("--out is required");
  const SynthLanguage lang = make_synth_language(o.words, o.feature_dim, o.language_seed);
  SynthOptions so;
  so.count = o.count;
  so.min_words = o.min_words;
  so.max_words = o.max_words;
  so.noise = o.noise;
  so.seed = seed_of(common);
  so.id_prefix = o.name + "-";
  const auto utts = synthesize(lang, so);
  std::printf("%s\n", write_synth_manifest(o.out, o.name, utts, parse_flavor(o.flavor)).c_str());
  return 0;
}

int cmd_pretrain(const TrainCliOptions& o) {
  if (!o.init.empty()) throw UsageError("--init applies to finetune only");
  return run_training(o, TrainMode::kPretrain);
}

int cmd_finetune(const TrainCliOptions& o) {
  if (!o.init.empty() && !o.resume.empty()) throw UsageError("--init and --resume are exclusive");
  return run_training(o, TrainMode::kFinetune);
}

int cmd_translate(const DecodeOptions& o) {
  if (o.input.empty()) throw UsageError("--input is required");
  const LoadedModel lm = load_model(o.ckpt, o.vocab);
  require_file(o.input, "manifest");
  const auto examples = load_manifest(o.input, lm.vocab, {lm.model.config().feature_dim, true});
  const auto jobs = decode_jobs(examples, o.source);
  const Decoded d = decode_all(lm.model, jobs, o);
  const auto lines = render(lm.vocab, d.hypotheses);
  std::ofstream file;
  if (!o.output.empty()) {
    file.open(o.output);
    if (!file) throw DataError("cannot write " + o.output);
  }
  std::ostream& os = o.output.empty() ? std::cout : file;
  for (const auto& l : lines) os << l << '\n';
  write_timing(o.timing, jobs, d);
  return 0;
}

int cmd_eval(const EvalOptions& o) {
  const DecodeOptions& dopt = o.decode;
  if (dopt.input.empty()) throw UsageError("--test is required");
  require_file(dopt.input, "manifest");
  std::vector<std::string> hyps, refs, ids;
  if (!o.hypotheses.empty()) {
    require_file(o.hypotheses, "hypothesis file");
    std::ifstream ms(dopt.input);
    std::size_t lineno = 0;
    for (std::string line; std::getline(ms, line);) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw DataError(dopt.input + ":" + std::to_string(lineno) + ": " + e.what());
      }
      if (!j.contains("text_tgt") || !j["text_tgt"].is_string())
        throw DataError(dopt.input + ":" + std::to_string(lineno) + ": no reference translation");
      refs.push_back(j["text_tgt"].get<std::string>());
      ids.push_back(j.value("id", std::to_string(lineno)));
    }
    std::ifstream is(o.hypotheses);
    std::string line;
    while (std::getline(is, line)) hyps.push_back(line);
  } else {
    const LoadedModel lm = load_model(dopt.ckpt, dopt.vocab);
    const auto examples = load_manifest(dopt.input, lm.vocab, {lm.model.config().feature_dim, true});
    for (const auto& ex : examples) {
      if (!ex.translation) throw DataError("example '" + ex.id + "' has no reference translation");
      refs.push_back(ex.translation->text);
      ids.push_back(ex.id);
    }
    const auto jobs = decode_jobs(examples, dopt.source);
    const Decoded d = decode_all(lm.model, jobs, dopt);
    hyps = render(lm.vocab, d.hypotheses);
    write_timing(dopt.timing, jobs, d);
  }
  if (hyps.size() != refs.size())
    throw DataError(std::to_string(hyps.size()) + " hypotheses for " + std::to_string(refs.size()) + " references");
  const BleuResult r = corpus_bleu(hyps, refs, o.smooth);
  nlohmann::ordered_json j;
  j["bleu"] = r.bleu;
  j["precisions"] = r.precisions;
  j["matches"] = r.matches;
  j["totals"] = r.totals;
  j["brevity_penalty"] = r.brevity_penalty;
  j["hyp_length"] = r.hyp_length;
  j["ref_length"] = r.ref_length;
  j["smooth"] = o.smooth;
  auto& sentences = j["sentences"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    std::istringstream hs(hyps[i]), rs(refs[i]);
    std::size_t hl = 0, rl = 0;
    for (std::string w; hs >> w;) ++hl;
    for (std::string w; rs >> w;) ++rl;
    sentences.push_back({{"id", ids[i]}, {"hyp_length", hl}, {"ref_length", rl}, {"hypothesis", hyps[i]}});
  }
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_attention_dump(const AttentionOptions& o) {
  if (o.input.empty() || o.example.empty()) throw UsageError("--input and --example are required");
  if (o.out.empty()) throw UsageError("--out is required");
  const LoadedModel lm = load_model(o.ckpt, o.vocab);
  require_file(o.input, "manifest");
  const auto examples = load_manifest(o.input, lm.vocab, {lm.model.config().feature_dim, true});
  const auto it = std::find_if(examples.begin(), examples.end(), [&](const auto& ex) { return ex.id == o.example; });
  if (it == examples.end()) throw DataError("example '" + o.example + "' not in " + o.input);

  num::NoGradScope no_grad;
  auto ctx = lm.model.context(false, 0);
  std::optional<num::Tensor> speech, source;
  if (it->speech) speech = lm.model.acoustic_embed(it->speech->to_tensor(), nullptr, ctx);
  if (it->transcription && it->transcription->size()) source = lm.model.embed_text(it->transcription->ids, nullptr);
  nn::AttentionRecorder rec;
  const FusedEncoderStates states =
      lm.model.fuse_encode(speech ? &*speech : nullptr, source ? &*source : nullptr, nullptr, ctx, &rec);
  const auto maps = extract_attention(states, rec, o.layers, o.heads);
  fs::create_directories(o.out);
  for (const auto& m : maps) {
    const fs::path base = fs::path(o.out) / m.stem();
    write_attention_csv(base.string() + ".csv", m);
    write_attention_pgm(base.string() + ".pgm", m);
    std::printf("%s %zux%zu diagonal=%.4f\n", m.stem().c_str(), m.rows, m.cols, diagonal_score(m));
  }
  return 0;
}

int cmd_checkpoint_average(const std::vector<std::string>& inputs, const std::string& out) {
  if (inputs.empty()) throw UsageError("no checkpoints to average");
  if (out.empty()) throw UsageError("--out is required");
  std::vector<ModelCheckpoint> cks;
  for (const auto& p : inputs) {
    require_file(p, "checkpoint");
    cks.push_back(load_checkpoint(p));
    cks.back().optimizer.clear();
  }
  ModelCheckpoint avg = average_checkpoints(cks);
  avg.extra.set("train.averaged", std::to_string(cks.size()));
  save_checkpoint(out, avg);
  return 0;
}

int cmd_checkpoint_info(const std::string& path) {
  require_file(path, "checkpoint");
  const ModelCheckpoint ck = load_checkpoint(path);
  std::size_t params = 0;
  for (const auto& [name, t] : ck.tensors) params += t.numel();
  std::cout << ck.header_text();
  std::cout << "tensors=" << ck.tensors.size() << "\nparameters=" << params
            << "\noptimizer_tensors=" << ck.optimizer.size() << '\n';
  return 0;
}

int cmd_features(const FeatureOptions& o) {
  if (o.audio.empty() || o.out.empty()) throw UsageError("--audio and --out are required");
  require_file(o.audio, "audio file");
  const Waveform w = read_wav(o.audio);
  const Spectrogram s = log_mel(frame_signal(w), o.mels, w.sample_rate);
  save_features(o.out, s);
  std::fprintf(stderr, "%zu frames x %zu\n", s.frames, s.dim);
  return 0;
}

}  // namespace fatspeech::cli
