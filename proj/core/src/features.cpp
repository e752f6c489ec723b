#include "fedser/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <mutex>
#include <stdexcept>

namespace fedser {

namespace {

constexpr double kPi = 3.14159265358979323846;

int next_pow2(int n) {
  int p = 1;
  while (p < n) p <<= 1;
  return p;
}

// FFTW plan creation is not thread-safe; execution of a plan on its own
// buffers is. Each Stft owns its buffers, plans are created under a lock.
std::mutex& fftw_plan_mutex() {
  static std::mutex m;
  return m;
}

class Stft {
public:
  explicit Stft(int nfft) : nfft_(nfft) {
    in_ = fftw_alloc_real(static_cast<std::size_t>(nfft));
    out_ = fftw_alloc_complex(static_cast<std::size_t>(nfft / 2 + 1));
    std::lock_guard<std::mutex> lock(fftw_plan_mutex());
    plan_ = fftw_plan_dft_r2c_1d(nfft, in_, out_, FFTW_ESTIMATE);
  }

  ~Stft() {
    std::lock_guard<std::mutex> lock(fftw_plan_mutex());
    fftw_destroy_plan(plan_);
    fftw_free(in_);
    fftw_free(out_);
  }

  Stft(const Stft&) = delete;
  Stft& operator=(const Stft&) = delete;

  /// Power spectrum |FFT|^2 of a zero-padded windowed frame.
  void power(const double* frame, int frame_len, std::vector<double>& out_power) {
    for (int i = 0; i < frame_len; ++i) in_[i] = frame[i];
    for (int i = frame_len; i < nfft_; ++i) in_[i] = 0.0;
    fftw_execute(plan_);
    out_power.resize(static_cast<std::size_t>(nfft_ / 2 + 1));
    for (int b = 0; b <= nfft_ / 2; ++b)
      out_power[static_cast<std::size_t>(b)] = out_[b][0] * out_[b][0] + out_[b][1] * out_[b][1];
  }

private:
  int nfft_;
  double* in_;
  fftw_complex* out_;
  fftw_plan plan_;
};

}  // namespace

void FeatureConfig::validate(int sample_rate) const {
  if (hop_ms <= 0 || window_ms < hop_ms)
    throw std::invalid_argument("FeatureConfig: require window_ms >= hop_ms > 0");
  if (mel_bins < 1) throw std::invalid_argument("FeatureConfig: mel_bins must be >= 1");
  if (segment_seconds <= 0) throw std::invalid_argument("FeatureConfig: segment_seconds must be > 0");
  if (log_offset <= 0) throw std::invalid_argument("FeatureConfig: log_offset must be > 0");
  const double fmax = fmax_hz > 0 ? fmax_hz : sample_rate / 2.0;
  if (fmin_hz < 0 || fmin_hz >= fmax || fmax > sample_rate / 2.0)
    throw std::invalid_argument("FeatureConfig: require 0 <= fmin < fmax <= sample_rate/2");
}

int FeatureConfig::window_samples(int sample_rate) const {
  return static_cast<int>(std::lround(window_ms * sample_rate / 1000.0));
}

int FeatureConfig::hop_samples(int sample_rate) const {
  return static_cast<int>(std::lround(hop_ms * sample_rate / 1000.0));
}

int FeatureConfig::frame_count(long long num_samples, int sample_rate) const {
  const int win = window_samples(sample_rate);
  const int hop = hop_samples(sample_rate);
  if (num_samples < win) return 1;  // zero-padded to one window
  return static_cast<int>((num_samples - win) / hop) + 1;
}

int FeatureConfig::frames_per_segment(int sample_rate) const {
  const auto seg_samples = static_cast<long long>(std::llround(segment_seconds * sample_rate));
  return frame_count(seg_samples, sample_rate);
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank MelFilterbank::build(int sample_rate, int nfft, int mel_bins, double fmin_hz,
                                   double fmax_hz) {
  if (fmax_hz <= 0) fmax_hz = sample_rate / 2.0;
  if (mel_bins < 1) throw std::invalid_argument("MelFilterbank: mel_bins must be >= 1");
  if (fmin_hz < 0 || fmin_hz >= fmax_hz || fmax_hz > sample_rate / 2.0)
    throw std::invalid_argument("MelFilterbank: require 0 <= fmin < fmax <= sample_rate/2");

  MelFilterbank fb;
  fb.nfft = nfft;
  fb.sample_rate = sample_rate;
  const int nbins = nfft / 2 + 1;
  fb.weights = Tensor<double>({mel_bins, nbins});

  const double mel_lo = hz_to_mel(fmin_hz);
  const double mel_hi = hz_to_mel(fmax_hz);
  std::vector<double> edges(static_cast<std::size_t>(mel_bins) + 2);
  for (int i = 0; i < mel_bins + 2; ++i)
    edges[static_cast<std::size_t>(i)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (mel_bins + 1));

  fb.centers_hz.resize(static_cast<std::size_t>(mel_bins));
  for (int m = 0; m < mel_bins; ++m) {
    const double left = edges[static_cast<std::size_t>(m)];
    const double center = edges[static_cast<std::size_t>(m) + 1];
    const double right = edges[static_cast<std::size_t>(m) + 2];
    fb.centers_hz[static_cast<std::size_t>(m)] = center;
    double row_sum = 0.0;
    for (int b = 0; b < nbins; ++b) {
      const double f = static_cast<double>(b) * sample_rate / nfft;
      double w = 0.0;
      if (f > left && f < right)
        w = f <= center ? (f - left) / (center - left) : (right - f) / (right - center);
      fb.weights(m, b) = w;
      row_sum += w;
    }
    if (row_sum <= 0)
      throw std::invalid_argument("MelFilterbank: filter " + std::to_string(m) +
                                  " covers no FFT bins (too many mel_bins for this nfft)");
    for (int b = 0; b < nbins; ++b) fb.weights(m, b) /= row_sum;
  }
  return fb;
}

Tensor<float> compute_logmel(const AudioClip& clip, const FeatureConfig& cfg) {
  clip.validate();
  cfg.validate(clip.sample_rate);

  const int sr = clip.sample_rate;
  const int win = cfg.window_samples(sr);
  const int hop = cfg.hop_samples(sr);
  const int nfft = next_pow2(win);
  const int frames = cfg.frame_count(static_cast<long long>(clip.samples.size()), sr);

  std::vector<double> padded(clip.samples.begin(), clip.samples.end());
  if (static_cast<int>(padded.size()) < win) padded.resize(static_cast<std::size_t>(win), 0.0);

  std::vector<double> hann(static_cast<std::size_t>(win));
  for (int n = 0; n < win; ++n) hann[static_cast<std::size_t>(n)] = 0.5 - 0.5 * std::cos(2.0 * kPi * n / win);

  const MelFilterbank fb = MelFilterbank::build(sr, nfft, cfg.mel_bins, cfg.fmin_hz, cfg.fmax_hz);
  const int nbins = nfft / 2 + 1;

  Stft stft(nfft);
  Tensor<float> out({frames, cfg.mel_bins});
  std::vector<double> frame(static_cast<std::size_t>(win));
  std::vector<double> power;
  for (int t = 0; t < frames; ++t) {
    const std::size_t start = static_cast<std::size_t>(t) * static_cast<std::size_t>(hop);
    for (int n = 0; n < win; ++n)
      frame[static_cast<std::size_t>(n)] = padded[start + static_cast<std::size_t>(n)] * hann[static_cast<std::size_t>(n)];
    stft.power(frame.data(), win, power);
    for (int m = 0; m < cfg.mel_bins; ++m) {
      double acc = 0.0;
      const double* w = fb.weights.data() + static_cast<std::size_t>(m) * nbins;
      for (int b = 0; b < nbins; ++b) acc += w[b] * power[static_cast<std::size_t>(b)];
      out(t, m) = static_cast<float>(std::log(acc + cfg.log_offset));
    }
  }
  return out;
}

std::vector<FeatureTensor> segment(const Tensor<float>& frames, const FeatureConfig& cfg,
                                   int sample_rate) {
  if (frames.rank() != 2 || frames.dim(0) < 1)
    throw std::invalid_argument("segment: expected non-empty [frames x mel_bins] input");
  const int per_seg = cfg.frames_per_segment(sample_rate);
  const int total = frames.dim(0);
  const int mels = frames.dim(1);

  std::vector<FeatureTensor> out;
  if (total < per_seg) {
    FeatureTensor seg({per_seg, mels});
    for (int t = 0; t < total; ++t)
      for (int m = 0; m < mels; ++m) seg(t, m) = frames(t, m);
    out.push_back(std::move(seg));
    return out;
  }
  const int count = total / per_seg;
  out.reserve(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) {
    FeatureTensor seg({per_seg, mels});
    for (int t = 0; t < per_seg; ++t)
      for (int m = 0; m < mels; ++m) seg(t, m) = frames(s * per_seg + t, m);
    out.push_back(std::move(seg));
  }
  return out;
}

FeatureMoments compute_moments(const std::vector<FeatureTensor>& tensors) {
  double sum = 0.0, sum_sq = 0.0;
  long long n = 0;
  for (const auto& t : tensors) {
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const double v = t[i];
      sum += v;
      sum_sq += v * v;
    }
    n += t.numel();
  }
  FeatureMoments m;
  if (n == 0) return m;
  m.mean = sum / static_cast<double>(n);
  const double var = std::max(0.0, sum_sq / static_cast<double>(n) - m.mean * m.mean);
  m.stddev = var > 1e-12 ? std::sqrt(var) : 1.0;
  return m;
}

FeatureTensor standardize(const FeatureTensor& t, const FeatureMoments& m) {
  FeatureTensor out = t;
  const auto mean = static_cast<float>(m.mean);
  const auto inv = static_cast<float>(1.0 / m.stddev);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = (out[i] - mean) * inv;
  return out;
}

namespace {

void write_i32(std::ostream& out, std::int32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<char*>(b), 4);
}

std::int32_t read_i32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::int32_t>(static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                                   (static_cast<std::uint32_t>(b[2]) << 16) |
                                   (static_cast<std::uint32_t>(b[3]) << 24));
}

}  // namespace

void write_feature_record(const std::string& path, const FeatureTensor& t) {
  if (t.rank() != 2) throw std::invalid_argument("write_feature_record: expected rank-2 tensor");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_feature_record: cannot open " + path);
  write_i32(out, t.dim(0));
  write_i32(out, t.dim(1));
  static_assert(sizeof(float) == 4);
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * 4));
  if (!out) throw std::runtime_error("write_feature_record: write failed: " + path);
}

FeatureTensor read_feature_record(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_feature_record: cannot open " + path);
  const std::int32_t frames = read_i32(in);
  const std::int32_t mels = read_i32(in);
  if (!in || frames <= 0 || mels <= 0)
    throw std::runtime_error("read_feature_record: bad header in " + path);
  FeatureTensor t({frames, mels});
  in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * 4));
  if (!in) throw std::runtime_error("read_feature_record: truncated payload in " + path);
  return t;
}

void write_feature_csv(const std::string& path, const FeatureTensor& t) {
  if (t.rank() != 2) throw std::invalid_argument("write_feature_csv: expected rank-2 tensor");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_feature_csv: cannot open " + path);
  for (int i = 0; i < t.dim(0); ++i) {
    for (int j = 0; j < t.dim(1); ++j) {
      if (j) out << ',';
      out << t(i, j);
    }
    out << '\n';
  }
}

}  // namespace fedser
