#include "fatspeech/features.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>

#include "fatspeech/errors.hpp"

namespace fatspeech {

namespace {

void fft_inplace(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double angle = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(angle), std::sin(angle));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const auto u = a[i + j];
        const auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::vector<unsigned char> read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

num::Tensor Spectrogram::to_tensor() const {
  return num::Tensor({frames, dim}, std::vector<double>(values.begin(), values.end()));
}

std::size_t frame_count(std::size_t num_samples, std::size_t window, std::size_t hop) {
  if (window == 0 || hop == 0) throw std::invalid_argument("frame_count: window and hop must be > 0");
  if (num_samples < window) return 0;
  return 1 + (num_samples - window) / hop;
}

FrameMatrix frame_signal(const Waveform& w, double window_ms, double hop_ms) {
  if (w.sample_rate <= 0) throw DataError("frame_signal: sample rate must be positive");
  const auto window = static_cast<std::size_t>(std::lround(window_ms * w.sample_rate / 1000.0));
  const auto hop = static_cast<std::size_t>(std::lround(hop_ms * w.sample_rate / 1000.0));
  if (window == 0 || hop == 0) throw DataError("frame_signal: window and hop must span >= 1 sample");
  if (w.samples.size() < window) {
    throw DataError("frame_signal: waveform of " + std::to_string(w.samples.size()) +
                    " samples is shorter than one " + std::to_string(window) + "-sample window");
  }
  FrameMatrix fm;
  fm.count = frame_count(w.samples.size(), window, hop);
  fm.length = window;
  fm.hop_ms = hop_ms;
  fm.samples.resize(fm.count * window);
  std::vector<double> hann(window, 1.0);
  if (window > 1) {
    for (std::size_t n = 0; n < window; ++n)
      hann[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                                     static_cast<double>(window - 1));
  }
  for (std::size_t f = 0; f < fm.count; ++f)
    for (std::size_t n = 0; n < window; ++n)
      fm.samples[f * window + n] = w.samples[f * hop + n] * hann[n];
  return fm;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

MelFilterbank make_mel_filterbank(std::size_t n_mels, std::size_t fft_size, int sample_rate) {
  if (n_mels < 1) throw std::invalid_argument("mel filterbank needs n_mels >= 1");
  MelFilterbank fb;
  fb.n_mels = n_mels;
  fb.fft_size = fft_size;
  fb.sample_rate = sample_rate;
  const std::size_t bins = fft_size / 2 + 1;
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  fb.weights.assign(n_mels * bins, 0.0);
  fb.center_hz.resize(n_mels);
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = edges[m], c = edges[m + 1], hi = edges[m + 2];
    fb.center_hz[m] = c;
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(fft_size);
      double wgt = 0.0;
      if (f > lo && f <= c) wgt = (f - lo) / (c - lo);
      else if (f > c && f < hi) wgt = (hi - f) / (hi - c);
      fb.weights[m * bins + k] = wgt;
    }
  }
  return fb;
}

Spectrogram log_mel(const FrameMatrix& frames, std::size_t n_mels, int sample_rate) {
  if (n_mels < 1) throw std::invalid_argument("log_mel: n_mels must be >= 1");
  const std::size_t fft_size = next_pow2(frames.length);
  const MelFilterbank fb = make_mel_filterbank(n_mels, fft_size, sample_rate);
  const std::size_t bins = fft_size / 2 + 1;
  Spectrogram out;
  out.frames = frames.count;
  out.dim = n_mels;
  out.frame_shift_ms = frames.hop_ms;
  out.values.resize(frames.count * n_mels);
  std::vector<std::complex<double>> buf(fft_size);
  std::vector<double> power(bins);
  for (std::size_t f = 0; f < frames.count; ++f) {
    std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
    for (std::size_t n = 0; n < frames.length; ++n) buf[n] = frames.samples[f * frames.length + n];
    fft_inplace(buf);
    for (std::size_t k = 0; k < bins; ++k) power[k] = std::norm(buf[k]);
    for (std::size_t m = 0; m < n_mels; ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += fb.weights[m * bins + k] * power[k];
      out.values[f * n_mels + m] = static_cast<float>(std::log(std::max(e, kLogFloor)));
    }
  }
  return out;
}

void save_features(const std::string& path, const Spectrogram& s) {
  if (s.values.size() != s.frames * s.dim) throw DataError("save_features: inconsistent spectrogram");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path);
  os.write("FATF", 4);
  put_u32(os, 1);
  put_u32(os, static_cast<std::uint32_t>(s.frames));
  put_u32(os, static_cast<std::uint32_t>(s.dim));
  for (float v : s.values) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
  }
  if (!os) throw DataError("write failed for " + path);
}

Spectrogram load_features(const std::string& path) {
  const auto bytes = read_all(path);
  if (bytes.size() < 16) throw DataError(path + ": truncated FATF header");
  if (std::memcmp(bytes.data(), "FATF", 4) != 0) throw DataError(path + ": bad magic, expected FATF");
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != 1) throw DataError(path + ": unsupported FATF version " + std::to_string(version));
  Spectrogram s;
  s.frames = get_u32(bytes.data() + 8);
  s.dim = get_u32(bytes.data() + 12);
  const std::size_t expected = 16 + 4 * s.frames * s.dim;
  if (bytes.size() != expected) {
    throw DataError(path + ": payload size " + std::to_string(bytes.size()) + " does not match " +
                    std::to_string(s.frames) + "x" + std::to_string(s.dim) + " header");
  }
  if (s.frames == 0 || s.dim == 0) throw DataError(path + ": empty feature matrix");
  s.values.resize(s.frames * s.dim);
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    const std::uint32_t bits = get_u32(bytes.data() + 16 + 4 * i);
    std::memcpy(&s.values[i], &bits, 4);
  }
  return s;
}

Spectrogram load_features(const std::string& path, std::size_t expected_dim) {
  Spectrogram s = load_features(path);
  if (s.dim != expected_dim) {
    throw DataError(path + ": feature dim " + std::to_string(s.dim) + " != configured " +
                    std::to_string(expected_dim));
  }
  return s;
}

Waveform read_wav(const std::string& path) {
  const auto bytes = read_all(path);
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw DataError(path + ": not a RIFF/WAVE file");
  }
  Waveform w;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t size = get_u32(bytes.data() + pos + 4);
    const unsigned char* body = bytes.data() + pos + 8;
    if (pos + 8 + size > bytes.size()) throw DataError(path + ": truncated chunk");
    if (std::memcmp(bytes.data() + pos, "fmt ", 4) == 0) {
      if (size < 16) throw DataError(path + ": short fmt chunk");
      const std::uint16_t format = get_u16(body);
      const std::uint16_t channels = get_u16(body + 2);
      w.sample_rate = static_cast<int>(get_u32(body + 4));
      const std::uint16_t bits = get_u16(body + 14);
      if (format != 1 || channels != 1 || bits != 16) {
        throw DataError(path + ": only 16-bit PCM mono WAV is supported");
      }
      have_fmt = true;
    } else if (std::memcmp(bytes.data() + pos, "data", 4) == 0) {
      if (!have_fmt) throw DataError(path + ": data chunk before fmt chunk");
      w.samples.resize(size / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        const auto v = static_cast<std::int16_t>(get_u16(body + 2 * i));
        w.samples[i] = static_cast<double>(v) / 32768.0;
      }
      if (w.samples.empty()) throw DataError(path + ": no samples");
      return w;
    }
    pos += 8 + size + (size & 1);
  }
  throw DataError(path + ": missing data chunk");
}

void write_wav(const std::string& path, const Waveform& w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path);
  const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  os.write("RIFF", 4);
  put_u32(os, 36 + data_bytes);
  os.write("WAVEfmt ", 8);
  put_u32(os, 16);
  const unsigned char fmt[4] = {1, 0, 1, 0};  // PCM, mono
  os.write(reinterpret_cast<const char*>(fmt), 4);
  put_u32(os, static_cast<std::uint32_t>(w.sample_rate));
  put_u32(os, static_cast<std::uint32_t>(w.sample_rate * 2));
  const unsigned char align[4] = {2, 0, 16, 0};
  os.write(reinterpret_cast<const char*>(align), 4);
  os.write("data", 4);
  put_u32(os, data_bytes);
  for (double s : w.samples) {
    const auto v = static_cast<std::int16_t>(std::lround(std::clamp(s, -1.0, 32767.0 / 32768.0) * 32768.0));
    const auto u = static_cast<std::uint16_t>(v);
    const unsigned char b[2] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
  }
}

FeatureStats compute_feature_stats(const std::vector<Spectrogram>& corpus) {
  FeatureStats stats;
  if (corpus.empty()) return stats;
  const std::size_t d = corpus.front().dim;
  std::vector<double> sum(d, 0.0), sq(d, 0.0);
  std::size_t n = 0;
  for (const auto& s : corpus) {
    if (s.dim != d) throw DataError("feature stats: mixed feature dimensions in corpus");
    for (std::size_t t = 0; t < s.frames; ++t)
      for (std::size_t f = 0; f < d; ++f) {
        const double v = s.at(t, f);
        sum[f] += v;
        sq[f] += v * v;
      }
    n += s.frames;
  }
  stats.mean.resize(d);
  stats.stddev.resize(d);
  for (std::size_t f = 0; f < d; ++f) {
    const double mu = sum[f] / static_cast<double>(n);
    const double var = std::max(sq[f] / static_cast<double>(n) - mu * mu, 0.0);
    stats.mean[f] = static_cast<float>(mu);
    stats.stddev[f] = static_cast<float>(std::max(std::sqrt(var), 1e-5));
  }
  return stats;
}

void normalize_features(Spectrogram& s, const FeatureStats& stats) {
  if (stats.empty()) return;
  if (stats.mean.size() != s.dim) {
    throw DataError("feature stats dim " + std::to_string(stats.mean.size()) +
                    " does not match spectrogram dim " + std::to_string(s.dim));
  }
  for (std::size_t t = 0; t < s.frames; ++t)
    for (std::size_t f = 0; f < s.dim; ++f)
      s.values[t * s.dim + f] = (s.values[t * s.dim + f] - stats.mean[f]) / stats.stddev[f];
}

}  // namespace fatspeech
