#pragma once

#include <string>
#include <vector>

#include "fedser/audio.hpp"
#include "fedser/tensor.hpp"

namespace fedser {

/// A log-Mel segment: [frames x mel_bins] grid of log filterbank energies.
using FeatureTensor = Tensor<float>;

struct FeatureConfig {
  double window_ms = 25.0;
  double hop_ms = 10.0;
  int mel_bins = 64;
  double segment_seconds = 2.0;
  double log_offset = 1e-6;
  double fmin_hz = 0.0;
  double fmax_hz = 0.0;       // 0 = Nyquist of the incoming clip
  bool normalize = false;     // standardize each utterance's grid at load time

  void validate(int sample_rate) const;

  int window_samples(int sample_rate) const;
  int hop_samples(int sample_rate) const;
  /// floor((n - window) / hop) + 1; clips shorter than one window count as 1.
  int frame_count(long long num_samples, int sample_rate) const;
  /// Fixed per-segment frame count for this config at the given rate.
  int frames_per_segment(int sample_rate) const;
};

/// Triangular mel filterbank on the HTK scale m = 2595*log10(1 + f/700),
/// each row normalized to sum to 1 over the FFT power bins.
struct MelFilterbank {
  int nfft = 0;
  int sample_rate = 0;
  Tensor<double> weights;           // [mel_bins x (nfft/2 + 1)]
  std::vector<double> centers_hz;   // filter center frequencies

  static MelFilterbank build(int sample_rate, int nfft, int mel_bins, double fmin_hz,
                             double fmax_hz);
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Hann-windowed STFT power -> mel filterbank -> log(. + log_offset).
/// Returns [frames x mel_bins]. Clips shorter than one window are zero-padded
/// to a single frame.
Tensor<float> compute_logmel(const AudioClip& clip, const FeatureConfig& cfg);

/// Splits a frame grid into consecutive non-overlapping fixed-size segments.
/// Shorter-than-one-segment inputs are zero-padded to exactly one segment;
/// otherwise the trailing remainder is dropped.
std::vector<FeatureTensor> segment(const Tensor<float>& frames, const FeatureConfig& cfg,
                                   int sample_rate);

/// Mean and variance over a set of equally shaped tensors (per-cell scalar
/// moments over all cells of all tensors).
struct FeatureMoments {
  double mean = 0.0;
  double stddev = 1.0;
};
FeatureMoments compute_moments(const std::vector<FeatureTensor>& tensors);
FeatureTensor standardize(const FeatureTensor& t, const FeatureMoments& m);

// Flat binary feature record: header = frames, mel_bins as 32-bit
// little-endian integers; payload = row-major 32-bit little-endian floats.
void write_feature_record(const std::string& path, const FeatureTensor& t);
FeatureTensor read_feature_record(const std::string& path);
void write_feature_csv(const std::string& path, const FeatureTensor& t);

}  // namespace fedser
