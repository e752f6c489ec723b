#include "fedser/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace fedser {

void AudioClip::validate(int num_classes) const {
  if (sample_rate <= 0) throw std::invalid_argument("AudioClip: sample_rate must be positive");
  if (samples.empty()) throw std::invalid_argument("AudioClip: samples must be non-empty");
  for (float s : samples)
    if (!std::isfinite(s)) throw std::invalid_argument("AudioClip: non-finite sample value");
  if (label && num_classes >= 0 && (*label < 0 || *label >= num_classes))
    throw std::invalid_argument("AudioClip: label out of range");
}

namespace {

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint16_t read_u16(std::istream& in) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<char*>(b), 4);
}

void write_u16(std::ostream& out, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff)};
  out.write(reinterpret_cast<char*>(b), 2);
}

}  // namespace

AudioClip read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_wav: cannot open " + path);

  char tag[4];
  in.read(tag, 4);
  if (std::memcmp(tag, "RIFF", 4) != 0) throw std::runtime_error("read_wav: not a RIFF file: " + path);
  read_u32(in);  // chunk size
  in.read(tag, 4);
  if (std::memcmp(tag, "WAVE", 4) != 0) throw std::runtime_error("read_wav: not a WAVE file: " + path);

  AudioClip clip;
  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0, format = 0;

  while (in.read(tag, 4)) {
    std::uint32_t size = read_u32(in);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      format = read_u16(in);
      channels = read_u16(in);
      clip.sample_rate = static_cast<int>(read_u32(in));
      read_u32(in);  // byte rate
      read_u16(in);  // block align
      bits = read_u16(in);
      if (size > 16) in.seekg(size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw std::runtime_error("read_wav: data chunk before fmt in " + path);
      if (format != 1) throw std::runtime_error("read_wav: only PCM supported: " + path);
      if (channels != 1) throw std::runtime_error("read_wav: only mono supported: " + path);
      if (bits != 16) throw std::runtime_error("read_wav: only 16-bit supported: " + path);
      std::uint32_t n = size / 2;
      clip.samples.resize(n);
      std::vector<char> raw(size);
      in.read(raw.data(), size);
      if (!in) throw std::runtime_error("read_wav: truncated data chunk in " + path);
      for (std::uint32_t i = 0; i < n; ++i) {
        std::int16_t s;
        std::memcpy(&s, raw.data() + 2 * i, 2);
        clip.samples[i] = static_cast<float>(s) / 32768.0f;
      }
      return clip;
    } else {
      in.seekg(size + (size & 1), std::ios::cur);  // chunks are word-aligned
    }
  }
  throw std::runtime_error("read_wav: no data chunk in " + path);
}

void write_wav(const std::string& path, const std::vector<float>& samples, int sample_rate) {
  if (sample_rate <= 0) throw std::invalid_argument("write_wav: sample_rate must be positive");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_wav: cannot open " + path);

  const std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  out.write("RIFF", 4);
  write_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_u32(out, 16);
  write_u16(out, 1);  // PCM
  write_u16(out, 1);  // mono
  write_u32(out, static_cast<std::uint32_t>(sample_rate));
  write_u32(out, static_cast<std::uint32_t>(sample_rate * 2));
  write_u16(out, 2);
  write_u16(out, 16);
  out.write("data", 4);
  write_u32(out, data_bytes);
  for (float v : samples) {
    float c = std::clamp(v, -1.0f, 1.0f);
    auto s = static_cast<std::int16_t>(std::lround(c * 32767.0f));
    write_u16(out, static_cast<std::uint16_t>(s));
  }
}

}  // namespace fedser
