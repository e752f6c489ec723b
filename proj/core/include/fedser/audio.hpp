#pragma once

#include <optional>
#include <string>
#include <vector>

namespace fedser {

/// A raw mono utterance. Samples are dimensionless amplitudes in [-1, 1].
struct AudioClip {
  std::vector<float> samples;
  int sample_rate = 16000;
  std::string speaker_id;
  std::optional<int> label;

  void validate(int num_classes = -1) const;
};

/// Reads a 16-bit PCM mono WAV file. Multi-channel, non-PCM and non-16-bit
/// inputs are rejected; no resampling is performed.
AudioClip read_wav(const std::string& path);

/// Writes a 16-bit PCM mono WAV file (samples clipped to [-1, 1]).
void write_wav(const std::string& path, const std::vector<float>& samples, int sample_rate);

}  // namespace fedser
