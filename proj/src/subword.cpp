#include "fatspeech/subword.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "fatspeech/errors.hpp"

namespace fatspeech {

namespace {

const char* const kReservedPieces[] = {"<pad>", "<unk>", "<bos>", "<eos>", "<mask>"};

std::string merge_key(const std::string& a, const std::string& b) { return a + '\x01' + b; }

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

}  // namespace

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0) len = 4;
    if (i + len > text.size()) len = 1;
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(text[i + k]) & 0xC0) != 0x80) {
        len = 1;
        break;
      }
    }
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) words.emplace_back(text.substr(start, i - start));
  }
  return words;
}

Vocabulary::Vocabulary(std::vector<std::string> alphabet, std::vector<Merge> merges)
    : alphabet_(std::move(alphabet)), merges_(std::move(merges)) {
  for (const char* r : kReservedPieces) pieces_.emplace_back(r);
  for (const auto& a : alphabet_) pieces_.push_back(a);
  for (std::size_t i = 0; i < merges_.size(); ++i) {
    pieces_.push_back(merges_[i].first + merges_[i].second);
    merge_rank_.emplace(merge_key(merges_[i].first, merges_[i].second), i);
  }
  // First occurrence wins if two merges spell the same piece.
  for (std::size_t i = 0; i < pieces_.size(); ++i) piece_ids_.emplace(pieces_[i], static_cast<int>(i));
}

Vocabulary Vocabulary::train(const std::vector<std::string>& lines, std::size_t vocab_size) {
  std::map<std::string, std::size_t> word_counts;
  for (const auto& line : lines)
    for (const auto& w : split_words(line)) ++word_counts[w];
  if (word_counts.empty()) throw DataError("train_bpe: empty corpus");

  std::set<std::string> chars{std::string(kWordMarker)};
  std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
  for (const auto& [w, n] : word_counts) {
    std::vector<std::string> sym{std::string(kWordMarker)};
    for (auto& c : utf8_chars(w)) {
      chars.insert(c);
      sym.push_back(std::move(c));
    }
    words.emplace_back(std::move(sym), n);
  }
  std::vector<std::string> alphabet(chars.begin(), chars.end());
  const std::size_t base = kNumReserved + alphabet.size();
  if (vocab_size < base) {
    throw UsageError("vocab size " + std::to_string(vocab_size) + " is below reserved + alphabet (" +
                     std::to_string(base) + ")");
  }

  std::vector<Merge> merges;
  while (base + merges.size() < vocab_size) {
    std::map<Merge, std::size_t> pair_counts;
    for (const auto& [sym, n] : words)
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) pair_counts[{sym[i], sym[i + 1]}] += n;
    if (pair_counts.empty()) break;
    const Merge* best = nullptr;
    std::size_t best_count = 0;
    std::string best_piece;
    for (const auto& [pair, n] : pair_counts) {
      const std::string piece = pair.first + pair.second;
      if (best == nullptr || n > best_count || (n == best_count && piece < best_piece)) {
        best = &pair;
        best_count = n;
        best_piece = piece;
      }
    }
    const Merge chosen = *best;
    merges.push_back(chosen);
    for (auto& [sym, n] : words) {
      std::vector<std::string> next;
      next.reserve(sym.size());
      for (std::size_t i = 0; i < sym.size(); ++i) {
        if (i + 1 < sym.size() && sym[i] == chosen.first && sym[i + 1] == chosen.second) {
          next.push_back(best_piece);
          ++i;
        } else {
          next.push_back(sym[i]);
        }
      }
      sym = std::move(next);
    }
  }
  return Vocabulary(std::move(alphabet), std::move(merges));
}

std::vector<int> Vocabulary::encode_word(const std::vector<std::string>& chars) const {
  // Unknown characters split the word; each known run merges independently.
  std::vector<int> out;
  std::vector<std::string> run;
  auto flush = [&]() {
    while (run.size() > 1) {
      std::size_t best_rank = std::numeric_limits<std::size_t>::max();
      std::size_t best_at = 0;
      for (std::size_t i = 0; i + 1 < run.size(); ++i) {
        const auto it = merge_rank_.find(merge_key(run[i], run[i + 1]));
        if (it != merge_rank_.end() && it->second < best_rank) {
          best_rank = it->second;
          best_at = i;
        }
      }
      if (best_rank == std::numeric_limits<std::size_t>::max()) break;
      const auto& [left, right] = merges_[best_rank];
      std::vector<std::string> next;
      next.reserve(run.size());
      for (std::size_t i = 0; i < run.size(); ++i) {
        if (i >= best_at && i + 1 < run.size() && run[i] == left && run[i + 1] == right) {
          next.push_back(left + right);
          ++i;
        } else {
          next.push_back(run[i]);
        }
      }
      run = std::move(next);
    }
    for (const auto& p : run) out.push_back(piece_ids_.at(p));
    run.clear();
  };
  for (const auto& c : chars) {
    if (piece_ids_.count(c)) {
      run.push_back(c);
    } else {
      flush();
      out.push_back(kUnk);
    }
  }
  flush();
  return out;
}

TokenSequence Vocabulary::encode(std::string_view text, Language language) const {
  TokenSequence seq;
  seq.language = language;
  seq.text = std::string(text);
  for (const auto& w : split_words(text)) {
    std::vector<std::string> chars{std::string(kWordMarker)};
    for (auto& c : utf8_chars(w)) chars.push_back(std::move(c));
    const auto ids = encode_word(chars);
    seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
  }
  return seq;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string joined;
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
      throw DataError("decode: id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(pieces_.size()));
    }
    if (id == kPad || id == kBos || id == kEos) continue;
    joined += pieces_[static_cast<std::size_t>(id)];
  }
  std::string out;
  std::size_t i = 0;
  while (i < joined.size()) {
    if (joined.compare(i, kWordMarker.size(), kWordMarker) == 0) {
      if (!out.empty()) out += ' ';
      i += kWordMarker.size();
    } else {
      out += joined[i++];
    }
  }
  return out;
}

const std::string& Vocabulary::piece(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
    throw DataError("piece: id " + std::to_string(id) + " outside vocabulary");
  }
  return pieces_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocabulary::id_of(const std::string& piece) const {
  const auto it = piece_ids_.find(piece);
  if (it == piece_ids_.end()) return std::nullopt;
  return it->second;
}

std::string Vocabulary::serialize() const {
  std::ostringstream os;
  os << "fatspeech-vocab 1\n";
  os << "reserved " << kNumReserved;
  for (const char* r : kReservedPieces) os << ' ' << r;
  os << '\n';
  os << "alphabet " << alphabet_.size() << '\n';
  for (const auto& a : alphabet_) os << a << '\n';
  os << "merges " << merges_.size() << '\n';
  for (const auto& [l, r] : merges_) os << l << ' ' << r << '\n';
  os << "stats " << feature_stats.mean.size() << '\n';
  char buf[64];
  for (std::size_t i = 0; i < feature_stats.mean.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.9g %.9g\n", static_cast<double>(feature_stats.mean[i]),
                  static_cast<double>(feature_stats.stddev[i]));
    os << buf;
  }
  return os.str();
}

Vocabulary Vocabulary::parse(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  auto next_line = [&](const char* what) {
    if (!std::getline(is, line)) throw DataError(std::string("vocab: missing ") + what);
    return line;
  };
  auto expect_count = [&](const std::string& l, const std::string& key) -> std::size_t {
    if (l.rfind(key + " ", 0) != 0) throw DataError("vocab: expected '" + key + "' line, got '" + l + "'");
    return std::stoul(l.substr(key.size() + 1));
  };
  if (next_line("header") != "fatspeech-vocab 1") throw DataError("vocab: bad header");
  {
    std::istringstream rs(next_line("reserved"));
    std::string key;
    std::size_t n = 0;
    rs >> key >> n;
    if (key != "reserved" || n != kNumReserved) throw DataError("vocab: reserved token list mismatch");
    for (const char* r : kReservedPieces) {
      std::string p;
      rs >> p;
      if (p != r) throw DataError("vocab: reserved token '" + p + "' != '" + r + "'");
    }
  }
  const std::size_t n_alpha = expect_count(next_line("alphabet"), "alphabet");
  std::vector<std::string> alphabet;
  for (std::size_t i = 0; i < n_alpha; ++i) alphabet.push_back(next_line("alphabet entry"));
  const std::size_t n_merges = expect_count(next_line("merges"), "merges");
  std::vector<Merge> merges;
  for (std::size_t i = 0; i < n_merges; ++i) {
    const std::string l = next_line("merge");
    const auto sp = l.find(' ');
    if (sp == std::string::npos) throw DataError("vocab: malformed merge '" + l + "'");
    merges.emplace_back(l.substr(0, sp), l.substr(sp + 1));
  }
  Vocabulary v(std::move(alphabet), std::move(merges));
  if (std::getline(is, line)) {
    const std::size_t d = expect_count(line, "stats");
    for (std::size_t i = 0; i < d; ++i) {
      std::istringstream ls(next_line("stats entry"));
      float m = 0, s = 0;
      if (!(ls >> m >> s)) throw DataError("vocab: malformed stats entry");
      v.feature_stats.mean.push_back(m);
      v.feature_stats.stddev.push_back(s);
    }
  }
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path);
  os << serialize();
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open vocabulary " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : serialize()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace fatspeech
