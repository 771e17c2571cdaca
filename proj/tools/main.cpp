#include <cstdio>
#include <exception>

#include <CLI11.hpp>

#include "commands.hpp"
#include "fatspeech/errors.hpp"
#include "fatspeech/numerics/tensor.hpp"

using namespace fatspeech;
using namespace fatspeech::cli;

namespace {

void add_common(CLI::App* cmd, CommonOptions& common) {
  cmd->add_option("--config", common.config_path, "key=value config file");
  cmd->add_option("--set", common.overrides, "override a config entry, e.g. --set train.steps=100");
  cmd->add_option("--seed", common.seed, "random seed (falls back to FATSPEECH_SEED, then train.seed)");
}

void add_roles(CLI::App* cmd, DataRoles& roles) {
  cmd->add_option("--st", roles.st, "speech translation manifest (speech + translation, transcription optional)");
  cmd->add_option("--asr", roles.asr, "speech recognition manifest (speech + transcription)");
  cmd->add_option("--mt", roles.mt, "text translation manifest (transcription + translation)");
  cmd->add_option("--speech", roles.speech, "speech-only manifest");
  cmd->add_option("--mono-src", roles.mono_src, "source-language text manifest");
  cmd->add_option("--mono-tgt", roles.mono_tgt, "target-language text manifest");
}

void add_training(CLI::App* cmd, TrainCliOptions& o) {
  add_common(cmd, o.common);
  add_roles(cmd, o.data);
  cmd->add_option("--vocab", o.vocab, "vocabulary file")->required();
  cmd->add_option("--out", o.out, "output directory for checkpoints and logs")->required();
  cmd->add_option("--dev", o.dev, "held-out manifest for dev loss at each checkpoint");
  cmd->add_option("--resume", o.resume, "continue from a checkpoint of this run");
  cmd->add_flag("--hierarchical", o.hierarchical, "give text its own encoder stack before the shared one");
}

void add_decoding(CLI::App* cmd, DecodeOptions& o, const char* input_flag) {
  cmd->add_option("--ckpt", o.ckpt, "model checkpoint");
  cmd->add_option("--vocab", o.vocab, "vocabulary file");
  cmd->add_option(input_flag, o.input, "manifest to decode")->required();
  cmd->add_option("--beam", o.beam, "beam size")->capture_default_str();
  cmd->add_option("--alpha", o.alpha, "length penalty exponent")->capture_default_str();
  cmd->add_option("--max-len", o.max_len, "cap on output tokens (default: from source length)");
  cmd->add_option("--source", o.source, "auto, speech or text")->capture_default_str();
  cmd->add_option("--jobs", o.jobs, "utterances decoded in parallel")->capture_default_str();
  cmd->add_option("--timing", o.timing, "per-utterance decode time CSV");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fused acoustic and text masked LM pretraining and speech translation"};
  app.require_subcommand(1);

  VocabOptions vocab;
  auto* vocab_cmd = app.add_subcommand("vocab", "train a joint subword vocabulary and feature statistics");
  vocab_cmd->add_option("--input", vocab.inputs, "manifest(s) to read text and speech from")->required();
  vocab_cmd->add_option("--size", vocab.size, "vocabulary size including reserved ids")->capture_default_str();
  vocab_cmd->add_option("--feature-dim", vocab.feature_dim, "mel bins for audio inputs")->capture_default_str();
  vocab_cmd->add_flag("!--no-stats", vocab.stats, "skip feature normalization statistics");
  vocab_cmd->add_option("--out", vocab.out, "vocabulary file")->required();

  SynthCliOptions synth;
  CommonOptions synth_common;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic word-template corpus");
  add_common(synth_cmd, synth_common);
  synth_cmd->add_option("--out", synth.out, "output directory")->required();
  synth_cmd->add_option("--name", synth.name, "manifest name")->capture_default_str();
  synth_cmd->add_option("--count", synth.count, "utterances")->capture_default_str();
  synth_cmd->add_option("--words", synth.words, "words per language (at most 18)")->capture_default_str();
  synth_cmd->add_option("--feature-dim", synth.feature_dim, "feature dimension")->capture_default_str();
  synth_cmd->add_option("--min-words", synth.min_words, "shortest sentence")->capture_default_str();
  synth_cmd->add_option("--max-words", synth.max_words, "longest sentence")->capture_default_str();
  synth_cmd->add_option("--noise", synth.noise, "feature noise stddev")->capture_default_str();
  synth_cmd->add_option("--language-seed", synth.language_seed, "seed of the word inventory")->capture_default_str();
  synth_cmd->add_option("--flavor", synth.flavor, "fields to write: comma list of s, x, y")->capture_default_str();

  TrainCliOptions pretrain;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "masked fused-modality pretraining");
  add_training(pretrain_cmd, pretrain);

  TrainCliOptions finetune;
  auto* finetune_cmd = app.add_subcommand("finetune", "speech translation training with auxiliary losses");
  add_training(finetune_cmd, finetune);
  finetune_cmd->add_option("--init", finetune.init, "pretrained checkpoint to initialize from");

  DecodeOptions translate;
  auto* translate_cmd = app.add_subcommand("translate", "decode a manifest, one hypothesis per line");
  add_decoding(translate_cmd, translate, "--input");
  translate_cmd->add_option("--output", translate.output, "write hypotheses here instead of stdout");

  EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "corpus BLEU report as JSON");
  add_decoding(eval_cmd, eval.decode, "--test");
  eval_cmd->add_option("--hyp", eval.hypotheses, "score these lines instead of decoding");
  eval_cmd->add_flag("--smooth", eval.smooth, "smooth zero n-gram matches");

  AttentionOptions attn;
  auto* attn_cmd = app.add_subcommand("attention-dump", "export shared-encoder attention maps as CSV and PGM");
  attn_cmd->add_option("--ckpt", attn.ckpt, "model checkpoint")->required();
  attn_cmd->add_option("--vocab", attn.vocab, "vocabulary file")->required();
  attn_cmd->add_option("--input", attn.input, "manifest holding the example")->required();
  attn_cmd->add_option("--example", attn.example, "example id")->required();
  attn_cmd->add_option("--layer", attn.layers, "layer index (repeatable; default all)");
  attn_cmd->add_option("--head", attn.heads, "head index (repeatable; default all)");
  attn_cmd->add_option("--out", attn.out, "output directory")->required();

  auto* ckpt_cmd = app.add_subcommand("checkpoint", "checkpoint utilities");
  ckpt_cmd->require_subcommand(1);
  std::vector<std::string> avg_inputs;
  std::string avg_out, info_path;
  auto* avg_cmd = ckpt_cmd->add_subcommand("average", "element-wise mean of checkpoints");
  avg_cmd->add_option("inputs", avg_inputs, "checkpoints")->required();
  avg_cmd->add_option("--out", avg_out, "output checkpoint")->required();
  auto* info_cmd = ckpt_cmd->add_subcommand("info", "print checkpoint header and sizes");
  info_cmd->add_option("path", info_path, "checkpoint")->required();

  FeatureOptions feats;
  auto* feats_cmd = app.add_subcommand("features", "log-mel features of a WAV file");
  feats_cmd->add_option("--audio", feats.audio, "16-bit PCM WAV")->required();
  feats_cmd->add_option("--out", feats.out, "feature file")->required();
  feats_cmd->add_option("--mels", feats.mels, "mel bins")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*vocab_cmd) return cmd_vocab(vocab);
    if (*synth_cmd) return cmd_synth(synth, synth_common);
    if (*pretrain_cmd) return cmd_pretrain(pretrain);
    if (*finetune_cmd) return cmd_finetune(finetune);
    if (*translate_cmd) return cmd_translate(translate);
    if (*eval_cmd) return cmd_eval(eval);
    if (*attn_cmd) return cmd_attention_dump(attn);
    if (*avg_cmd) return cmd_checkpoint_average(avg_inputs, avg_out);
    if (*info_cmd) return cmd_checkpoint_info(info_path);
    if (*feats_cmd) return cmd_features(feats);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    if (!e.last_checkpoint().empty()) std::fprintf(stderr, "last finite checkpoint: %s\n", e.last_checkpoint().c_str());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
