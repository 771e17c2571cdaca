#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fatspeech/numerics/tensor.hpp"

namespace fatspeech {

struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = 16000;
};

// Frame-level acoustic features, frames x dim, row-major.
struct Spectrogram {
  std::size_t frames = 0;
  std::size_t dim = 0;
  std::vector<float> values;
  double frame_shift_ms = 10.0;

  float at(std::size_t t, std::size_t f) const { return values[t * dim + f]; }
  num::Tensor to_tensor() const;
};

struct FrameMatrix {
  std::size_t count = 0;
  std::size_t length = 0;  // samples per frame
  std::vector<double> samples;
  double hop_ms = 10.0;
};

std::size_t frame_count(std::size_t num_samples, std::size_t window, std::size_t hop);

// Splits into Hann-windowed frames; count = 1 + floor((len - window) / hop).
FrameMatrix frame_signal(const Waveform& w, double window_ms = 25.0, double hop_ms = 10.0);

// Triangular filters on the mel scale 2595 * log10(1 + f / 700), spanning
// 0 Hz to Nyquist; weights[m * bins + k] for FFT bin k.
struct MelFilterbank {
  std::size_t n_mels = 0;
  std::size_t fft_size = 0;
  int sample_rate = 0;
  std::vector<double> weights;
  std::vector<double> center_hz;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);
MelFilterbank make_mel_filterbank(std::size_t n_mels, std::size_t fft_size, int sample_rate);
std::size_t next_pow2(std::size_t n);

inline constexpr double kLogFloor = 1e-10;

// Power spectrum -> mel filterbank -> natural log with floor kLogFloor.
Spectrogram log_mel(const FrameMatrix& frames, std::size_t n_mels, int sample_rate);

// FATF container: "FATF", u32 version=1, u32 T, u32 d, T*d little-endian f32.
void save_features(const std::string& path, const Spectrogram& s);
Spectrogram load_features(const std::string& path);
// Throws DataError if the stored dimension differs from `expected_dim`.
Spectrogram load_features(const std::string& path, std::size_t expected_dim);

// 16-bit PCM mono WAV.
Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);

// Per-dimension mean/std over a corpus, applied as (x - mean) / std.
struct FeatureStats {
  std::vector<float> mean;
  std::vector<float> stddev;
  bool empty() const { return mean.empty(); }
};

FeatureStats compute_feature_stats(const std::vector<Spectrogram>& corpus);
void normalize_features(Spectrogram& s, const FeatureStats& stats);

}  // namespace fatspeech
