#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "fedser/audio.hpp"
#include "fedser/features.hpp"

using namespace fedser;

namespace {

AudioClip make_clip(std::vector<float> samples, int rate = 16000) {
  AudioClip clip;
  clip.samples = std::move(samples);
  clip.sample_rate = rate;
  clip.speaker_id = "test";
  return clip;
}

AudioClip sine_clip(double hz, double seconds, int rate = 16000, double amp = 0.5) {
  std::vector<float> s(static_cast<std::size_t>(seconds * rate));
  for (std::size_t i = 0; i < s.size(); ++i)
    s[i] = static_cast<float>(amp * std::sin(2.0 * M_PI * hz * static_cast<double>(i) / rate));
  return make_clip(std::move(s), rate);
}

// Filterbank built from scratch, sharing no code with the library: HTK mel
// points, triangular weights over FFT bin frequencies, rows normalized.
struct OracleBank {
  std::vector<std::vector<double>> weights;
  std::vector<double> centers_hz;
};

OracleBank oracle_filterbank(int rate, int nfft, int bins, double fmin, double fmax) {
  auto to_mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  auto to_hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  const int half = nfft / 2 + 1;
  std::vector<double> edges(static_cast<std::size_t>(bins) + 2);
  for (int i = 0; i < bins + 2; ++i)
    edges[static_cast<std::size_t>(i)] =
        to_hz(to_mel(fmin) + (to_mel(fmax) - to_mel(fmin)) * i / (bins + 1));

  OracleBank bank;
  bank.weights.assign(static_cast<std::size_t>(bins), std::vector<double>(static_cast<std::size_t>(half), 0.0));
  for (int b = 0; b < bins; ++b) {
    const double lo = edges[static_cast<std::size_t>(b)], mid = edges[static_cast<std::size_t>(b) + 1],
                 hi = edges[static_cast<std::size_t>(b) + 2];
    bank.centers_hz.push_back(mid);
    double sum = 0.0;
    for (int k = 0; k < half; ++k) {
      const double f = static_cast<double>(k) * rate / nfft;
      double w = 0.0;
      if (f > lo && f < mid)
        w = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi)
        w = (hi - f) / (hi - mid);
      bank.weights[static_cast<std::size_t>(b)][static_cast<std::size_t>(k)] = w;
      sum += w;
    }
    for (double& w : bank.weights[static_cast<std::size_t>(b)]) w /= sum;
  }
  return bank;
}

}  // namespace

TEST_SUITE("features") {

TEST_CASE("default config gives 400-sample window and 160-sample hop at 16 kHz") {
  FeatureConfig cfg;
  CHECK(cfg.window_samples(16000) == 400);
  CHECK(cfg.hop_samples(16000) == 160);
  CHECK(cfg.frames_per_segment(16000) == 198);
}

TEST_CASE("silence maps every cell to log(offset)") {
  FeatureConfig cfg;
  const AudioClip clip = make_clip(std::vector<float>(32000, 0.0f));
  const Tensor<float> lm = compute_logmel(clip, cfg);
  CHECK(lm.dim(0) == 198);
  CHECK(lm.dim(1) == 64);
  const float expected = std::log(static_cast<float>(cfg.log_offset));
  for (std::int64_t i = 0; i < lm.numel(); ++i) CHECK(lm[i] == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("frame count matches the closed form for 100 random lengths") {
  FeatureConfig cfg;
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> len(1, 60000);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = len(rng);
    std::vector<float> s(static_cast<std::size_t>(n));
    std::uniform_real_distribution<float> amp(-0.5f, 0.5f);
    for (auto& v : s) v = amp(rng);
    const Tensor<float> lm = compute_logmel(make_clip(std::move(s)), cfg);
    const int expected = n < 400 ? 1 : (n - 400) / 160 + 1;
    CHECK(lm.dim(0) == expected);
    CHECK(lm.dim(0) == cfg.frame_count(n, 16000));
  }
}

TEST_CASE("mel filterbank rows sum to 1 and match an independent construction") {
  const int nfft = 512, bins = 64, rate = 16000;
  const MelFilterbank bank = MelFilterbank::build(rate, nfft, bins, 0.0, rate / 2.0);
  const OracleBank oracle = oracle_filterbank(rate, nfft, bins, 0.0, rate / 2.0);

  for (int b = 0; b < bins; ++b) {
    double sum = 0.0;
    for (int k = 0; k < nfft / 2 + 1; ++k) {
      sum += bank.weights(b, k);
      CHECK(bank.weights(b, k) ==
            doctest::Approx(oracle.weights[static_cast<std::size_t>(b)][static_cast<std::size_t>(k)])
                .epsilon(1e-9));
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(bank.centers_hz[static_cast<std::size_t>(b)] ==
          doctest::Approx(oracle.centers_hz[static_cast<std::size_t>(b)]).epsilon(1e-9));
  }

  // No dead column between the first and last filter centers.
  const double c0 = oracle.centers_hz.front(), c1 = oracle.centers_hz.back();
  for (int k = 0; k < nfft / 2 + 1; ++k) {
    const double f = static_cast<double>(k) * rate / nfft;
    if (f <= c0 || f >= c1) continue;
    double col = 0.0;
    for (int b = 0; b < bins; ++b) col += bank.weights(b, k);
    CHECK(col > 0.0);
  }
}

TEST_CASE("440 Hz tone localizes to the filter covering 440 Hz") {
  FeatureConfig cfg;
  const Tensor<float> lm = compute_logmel(sine_clip(440.0, 1.0), cfg);
  const OracleBank oracle = oracle_filterbank(16000, 512, 64, 0.0, 8000.0);

  int expected = 0;
  for (int b = 1; b < 64; ++b)
    if (std::abs(oracle.centers_hz[static_cast<std::size_t>(b)] - 440.0) <
        std::abs(oracle.centers_hz[static_cast<std::size_t>(expected)] - 440.0))
      expected = b;

  for (int t = 0; t < lm.dim(0); ++t) {
    int arg = 0;
    for (int m = 1; m < lm.dim(1); ++m)
      if (lm(t, m) > lm(t, arg)) arg = m;
    CHECK(arg == expected);
  }
}

TEST_CASE("appending trailing zeros shorter than one hop changes nothing") {
  FeatureConfig cfg;
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> amp(-0.5f, 0.5f);
  std::vector<float> base(400 + 37 * 160);  // (len - window) divisible by hop
  for (auto& v : base) v = amp(rng);

  const Tensor<float> ref = compute_logmel(make_clip(base), cfg);
  for (int extra : {1, 80, 159}) {
    std::vector<float> padded = base;
    padded.resize(base.size() + static_cast<std::size_t>(extra), 0.0f);
    const Tensor<float> lm = compute_logmel(make_clip(padded), cfg);
    REQUIRE(lm.dim(0) == ref.dim(0));
    for (std::int64_t i = 0; i < lm.numel(); ++i) CHECK(lm[i] == ref[i]);
  }
}

TEST_CASE("non-finite samples are rejected") {
  FeatureConfig cfg;
  std::vector<float> s(1000, 0.1f);
  s[500] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS(compute_logmel(make_clip(std::move(s)), cfg));
}

TEST_CASE("segmentation: drop remainder, pad short, exact fit") {
  FeatureConfig cfg;
  auto segments_of = [&](double seconds) {
    const auto n = static_cast<std::size_t>(seconds * 16000);
    std::vector<float> s(n, 0.25f);
    return segment(compute_logmel(make_clip(std::move(s)), cfg), cfg, 16000);
  };

  CHECK(segments_of(5.0).size() == 2);   // trailing second dropped
  CHECK(segments_of(4.0).size() == 2);
  const auto padded = segments_of(1.2);  // zero-padded to one segment
  REQUIRE(padded.size() == 1);
  CHECK(padded[0].dim(0) == 198);
  CHECK(padded[0].dim(1) == 64);
  // Frames past the real data are zero rows.
  bool has_zero_tail = true;
  for (int m = 0; m < 64; ++m) has_zero_tail &= padded[0](197, m) == 0.0f;
  CHECK(has_zero_tail);
}

TEST_CASE("feature records round-trip bit-exactly") {
  const std::string path = "/tmp/fedser_test_record.fr";
  Tensor<float> t({7, 5});
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> amp(-4.0f, 4.0f);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = amp(rng);

  write_feature_record(path, t);
  const Tensor<float> back = read_feature_record(path);
  REQUIRE(back.dim(0) == 7);
  REQUIRE(back.dim(1) == 5);
  for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(back[i] == t[i]);

  // Truncated payload is rejected.
  std::filesystem::resize_file(path, 8 + 3);
  CHECK_THROWS(read_feature_record(path));
  std::remove(path.c_str());
}

TEST_CASE("feature CSV dump writes one row per frame") {
  const std::string path = "/tmp/fedser_test_features.csv";
  Tensor<float> t({3, 4});
  t.fill(1.5f);
  write_feature_csv(path, t);
  std::ifstream in(path);
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 3);
  std::remove(path.c_str());
}

TEST_CASE("wav files round-trip within 16-bit quantization") {
  const std::string path = "/tmp/fedser_test_audio.wav";
  const AudioClip clip = sine_clip(523.0, 0.25);
  write_wav(path, clip.samples, clip.sample_rate);
  const AudioClip back = read_wav(path);
  CHECK(back.sample_rate == 16000);
  REQUIRE(back.samples.size() == clip.samples.size());
  for (std::size_t i = 0; i < back.samples.size(); ++i)
    CHECK(std::abs(back.samples[i] - clip.samples[i]) <= 1.0f / 32767.0f);
  std::remove(path.c_str());
}

TEST_CASE("standardize against computed moments centers the data") {
  std::vector<FeatureTensor> tensors;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> dist(3.0, 2.0);
  for (int i = 0; i < 4; ++i) {
    FeatureTensor t({6, 6});
    for (std::int64_t j = 0; j < t.numel(); ++j) t[j] = static_cast<float>(dist(rng));
    tensors.push_back(std::move(t));
  }
  const FeatureMoments m = compute_moments(tensors);
  CHECK(m.mean == doctest::Approx(3.0).epsilon(0.5));

  double sum = 0.0, sum_sq = 0.0;
  std::int64_t count = 0;
  for (const auto& t : tensors) {
    const FeatureTensor z = standardize(t, m);
    for (std::int64_t j = 0; j < z.numel(); ++j) {
      sum += z[j];
      sum_sq += static_cast<double>(z[j]) * z[j];
      ++count;
    }
  }
  CHECK(sum / count == doctest::Approx(0.0).epsilon(1e-4));
  CHECK(sum_sq / count == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("config validation rejects bad geometry") {
  FeatureConfig cfg;
  cfg.hop_ms = 30.0;  // hop > window
  CHECK_THROWS(cfg.validate(16000));
  cfg = FeatureConfig{};
  cfg.mel_bins = 0;
  CHECK_THROWS(cfg.validate(16000));
  cfg = FeatureConfig{};
  cfg.fmin_hz = 9000.0;  // beyond Nyquist
  CHECK_THROWS(cfg.validate(16000));
}

}  // TEST_SUITE
