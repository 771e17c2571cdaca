#include "fatspeech/attention.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "fatspeech/errors.hpp"

namespace fatspeech {

namespace {

const char* side_name(Segment s) { return s == Segment::kSpeech ? "speech" : "text"; }

bool selected(const std::vector<std::size_t>& pick, std::size_t i) {
  return pick.empty() || std::find(pick.begin(), pick.end(), i) != pick.end();
}

}  // namespace

std::string AttentionMap::stem() const {
  return "layer" + std::to_string(layer) + "_head" + std::to_string(head) + "_" + side_name(query) + "-" +
         side_name(key);
}

std::vector<AttentionMap> extract_attention(const FusedEncoderStates& states, const nn::AttentionRecorder& rec,
                                            const std::vector<std::size_t>& layers,
                                            const std::vector<std::size_t>& heads) {
  for (std::size_t l : layers)
    if (l >= rec.layers.size())
      throw UsageError("layer " + std::to_string(l) + " out of range (" + std::to_string(rec.layers.size()) + ")");
  const std::pair<Segment, Segment> pairs[] = {
      {Segment::kSpeech, Segment::kSpeech}, {Segment::kSource, Segment::kSource}, {Segment::kSpeech, Segment::kSource}};
  std::vector<AttentionMap> out;
  for (std::size_t l = 0; l < rec.layers.size(); ++l) {
    if (!selected(layers, l)) continue;
    const auto& probs = rec.layers[l];
    for (std::size_t h : heads)
      if (h >= probs.size())
        throw UsageError("head " + std::to_string(h) + " out of range (" + std::to_string(probs.size()) + ")");
    for (std::size_t h = 0; h < probs.size(); ++h) {
      if (!selected(heads, h)) continue;
      const num::Tensor& p = probs[h];
      for (const auto& [qs, ks] : pairs) {
        const SegmentSpan* q = states.find(qs);
        const SegmentSpan* k = states.find(ks);
        if (!q || !k) continue;
        AttentionMap m{l, h, qs, ks, q->length, k->length, {}};
        m.weights.resize(m.rows * m.cols);
        for (std::size_t r = 0; r < m.rows; ++r) {
          double sum = 0.0;
          for (std::size_t c = 0; c < m.cols; ++c) sum += p.at(q->begin + r, k->begin + c);
          for (std::size_t c = 0; c < m.cols; ++c)
            m.weights[r * m.cols + c] = sum > 0.0 ? p.at(q->begin + r, k->begin + c) / sum : 1.0 / m.cols;
        }
        out.push_back(std::move(m));
      }
    }
  }
  return out;
}

double diagonal_score(const AttentionMap& map) {
  if (map.rows == 0 || map.cols == 0) return 0.0;
  const double band = std::max(1.0, static_cast<double>(map.cols) / 10.0);
  double total = 0.0;
  for (std::size_t r = 0; r < map.rows; ++r) {
    const double centre = map.rows == 1 ? 0.0
                                        : static_cast<double>(r) * static_cast<double>(map.cols - 1) /
                                              static_cast<double>(map.rows - 1);
    for (std::size_t c = 0; c < map.cols; ++c)
      if (std::abs(static_cast<double>(c) - centre) <= band) total += map.at(r, c);
  }
  return total / static_cast<double>(map.rows);
}

void write_attention_csv(const std::string& path, const AttentionMap& map) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  char buf[32];
  for (std::size_t r = 0; r < map.rows; ++r) {
    for (std::size_t c = 0; c < map.cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.9g", map.at(r, c));
      os << (c ? "," : "") << buf;
    }
    os << '\n';
  }
}

void write_attention_pgm(const std::string& path, const AttentionMap& map) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path);
  os << "P5\n" << map.cols << ' ' << map.rows << "\n255\n";
  std::vector<unsigned char> row(map.cols);
  for (std::size_t r = 0; r < map.rows; ++r) {
    double mx = 0.0;
    for (std::size_t c = 0; c < map.cols; ++c) mx = std::max(mx, map.at(r, c));
    for (std::size_t c = 0; c < map.cols; ++c)
      row[c] = static_cast<unsigned char>(mx > 0.0 ? std::lround(255.0 * map.at(r, c) / mx) : 0);
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

}  // namespace fatspeech
