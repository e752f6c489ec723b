// Acceptance gate: one self-contained check per release criterion, each
// printing a single PASS/FAIL line. Exit status is 0 only if every
// criterion holds. Optionally pass a substring to run a subset:
//   fedser_acceptance scheduler
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedser/harness.hpp"
#include "helpers.hpp"

using namespace fedser;
namespace fs = std::filesystem;

namespace {

// Regression bound for the end-to-end synthetic experiment, established
// by calibration with the finite-difference-verified model and pinned.
constexpr double kSemiSupervisedGainMargin = 0.02;  // UA points, absolute

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

void info(const std::string& line) { std::printf("  info: %s\n", line.c_str()); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& leaf) {
  const fs::path dir = fs::temp_directory_path() / "fedser_acceptance" / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

double max_param_rel_diff(const ParamSet<float>& a, const ParamSet<float>& b) {
  double worst = 0.0;
  for (std::size_t e = 0; e < a.size(); ++e) {
    const auto& x = a.entries()[e].value;
    const auto& y = b.entries()[e].value;
    for (std::int64_t i = 0; i < x.numel(); ++i)
      worst = std::max(worst, testutil::rel_err(x[i], y[i]));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// 1. Gradient fidelity: analytic backward vs central finite differences,
//    for the full model and for the attention stage in isolation.

bool check_gradient_fidelity() {
  const double t0 = now_seconds();
  bool ok = true;

  ArchConfig arch = testutil::mini_arch();
  arch.dropout_rate = 0.0;
  const int classes = 3;
  double worst_model = 0.0;
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    auto params = init_params<double>(arch, classes, 100 + trial);
    const Tensor<double> batch = testutil::random_tensor<double>({2, 5, 5}, 200 + trial, 0.6);
    const std::vector<int> labels = {static_cast<int>(trial % classes),
                                     static_cast<int>((trial + 1) % classes)};

    auto loss = [&]() {
      const auto r = forward(arch, params, batch, Mode::kTrain, 7);
      return testutil::ce_l2_objective(r.logits, labels, params, arch.l2_rate);
    };

    auto result = forward(arch, params, batch, Mode::kTrain, 7);
    const int nc = result.logits.dim(1);
    Tensor<double> dlogits({2, nc});
    for (int i = 0; i < 2; ++i) {
      const auto p = softmax_temperature(&result.logits(i, 0), nc, 1.0);
      for (int j = 0; j < nc; ++j)
        dlogits(i, j) =
            (p[static_cast<std::size_t>(j)] - (labels[static_cast<std::size_t>(i)] == j ? 1.0 : 0.0)) / 2.0;
    }
    const ParamSet<double> grads = backward(arch, params, result.cache, dlogits);
    worst_model = std::max(worst_model, testutil::fd_check_params(params, grads, loss));
  }
  ok = ok && worst_model < 1e-4;

  // Attention gate checked on its own against a random linear readout.
  double worst_attn = 0.0;
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    const int c = 2;
    ParamSet<double> params;
    params.add("attn.channel.w1", testutil::random_tensor<double>({c, 1}, 300 + trial, 0.5), true);
    params.add("attn.channel.b1", testutil::random_tensor<double>({1}, 310 + trial, 0.1), false);
    params.add("attn.channel.w2", testutil::random_tensor<double>({1, c}, 320 + trial, 0.5), true);
    params.add("attn.channel.b2", testutil::random_tensor<double>({c}, 330 + trial, 0.1), false);
    params.add("attn.temporal.weight", testutil::random_tensor<double>({3, 2, 1}, 340 + trial, 0.4), true);
    params.add("attn.temporal.bias", testutil::random_tensor<double>({1}, 350 + trial, 0.1), false);
    params.add("attn.spectral.weight", testutil::random_tensor<double>({3, 2, 1}, 360 + trial, 0.4), true);
    params.add("attn.spectral.bias", testutil::random_tensor<double>({1}, 370 + trial, 0.1), false);

    Tensor<double> x = testutil::random_tensor<double>({1, 4, 4, c}, 400 + trial, 0.8);
    const Tensor<double> readout = testutil::random_tensor<double>({1, 4, 4, c}, 410 + trial, 1.0);

    auto loss = [&]() {
      AttentionCache<double> cache;
      const Tensor<double> y = detail::attention_forward(x, params, cache);
      double acc = 0.0;
      for (std::int64_t i = 0; i < y.numel(); ++i) acc += readout[i] * y[i];
      return acc;
    };

    AttentionCache<double> cache;
    detail::attention_forward(x, params, cache);
    ParamSet<double> grads = params.zeros_like();
    detail::attention_backward(params, cache, readout, grads);
    worst_attn = std::max(worst_attn, testutil::fd_check_params(params, grads, loss));
  }
  ok = ok && worst_attn < 1e-4;

  const double elapsed = now_seconds() - t0;
  ok = ok && elapsed < 60.0;
  info("max rel error: model " + fmt(worst_model) + ", attention " + fmt(worst_attn) + " (" +
       fmt(elapsed) + " s)");
  return ok;
}

// ---------------------------------------------------------------------------
// 2. Confidence threshold scheduler: anchor values and monotonicity.

bool check_scheduler() {
  bool ok = true;
  SelfTrainConfig cfg;  // tau 0.5..0.9, delta 0.5, corrected

  const int R = 100;
  ok = ok && std::abs(confidence_threshold(R, 0, 0, cfg) - 0.5) < 1e-9;
  ok = ok && std::abs(confidence_threshold(R, R, R, cfg) - 0.9) < 1e-9;
  ok = ok && std::abs(confidence_threshold(R, R, 0, cfg) - 0.7) < 1e-9;

  double prev = -1.0;
  for (int c = 0; c <= R; ++c) {
    const double tau = confidence_threshold(R, c, 0, cfg);
    ok = ok && tau >= prev - 1e-12;
    prev = tau;
  }

  SelfTrainConfig literal = cfg;
  literal.scheduler_mode = SchedulerMode::kPaperLiteral;
  ok = ok && std::abs(confidence_threshold(R, 0, 0, literal) - 0.4) < 1e-9;
  ok = ok && std::abs(confidence_threshold(R, R, R, literal) - 0.0) < 1e-9;
  return ok;
}

// ---------------------------------------------------------------------------
// 3. Pseudo-labeling: argmax invariant to temperature and logit shifts;
//    higher temperature never raises confidence.

bool check_pseudo_labeling() {
  bool ok = true;
  std::mt19937_64 rng(4242);
  std::normal_distribution<double> dist(0.0, 2.0);
  const int c = 6;
  const double temps[] = {0.5, 1.0, 2.0, 4.0};

  for (int i = 0; i < 1000 && ok; ++i) {
    std::vector<float> z(c);
    for (float& v : z) v = static_cast<float>(dist(rng));

    const PseudoLabel base = pseudo_label(z, 1.0);
    for (double t : temps) {
      ok = ok && pseudo_label(z, t).class_index == base.class_index;
      std::vector<float> shifted = z;
      for (float& v : shifted) v += 3.25f;
      ok = ok && pseudo_label(shifted, t).class_index == base.class_index;
    }

    const auto [lo, hi] = std::minmax_element(z.begin(), z.end());
    if (*lo != *hi)
      ok = ok && pseudo_label(z, 2.0).confidence <= base.confidence + 1e-12;
  }
  return ok;
}

// ---------------------------------------------------------------------------
// 4. Aggregation: K identical shards collapse to the one-device update,
//    and the two-device weighted mean matches the closed form exactly.

bool check_aggregation() {
  bool ok = true;

  // Identical shards: same two samples on every device, full batch, one
  // local epoch, dropout off. Per-device updates then differ only in
  // floating-point summation order, so K=1/2/5 agree to 1e-6.
  ArchConfig arch = testutil::mini_arch();
  arch.dropout_rate = 0.0;

  const Tensor<float> seg_a = testutil::random_tensor<float>({8, 8}, 501, 0.6);
  const Tensor<float> seg_b = testutil::random_tensor<float>({8, 8}, 502, 0.6);
  const Tensor<float> test_a = testutil::random_tensor<float>({8, 8}, 503, 0.6);
  const Tensor<float> test_b = testutil::random_tensor<float>({8, 8}, 504, 0.6);

  auto run_k = [&](int k) {
    Dataset ds;
    ds.num_classes = 2;
    ds.class_names = {"c0", "c1"};
    PartitionPlan plan;
    plan.devices.resize(static_cast<std::size_t>(k));
    for (int d = 0; d < k; ++d) {
      Sample s0, s1;
      s0.segments.push_back(seg_a);
      s0.label = 0;
      s0.speaker_id = s0.session_id = "spk" + std::to_string(d);
      s1.segments.push_back(seg_b);
      s1.label = 1;
      s1.speaker_id = s1.session_id = s0.speaker_id;
      ds.samples.push_back(std::move(s0));
      ds.samples.push_back(std::move(s1));
      plan.devices[static_cast<std::size_t>(d)].labeled = {2 * d, 2 * d + 1};
    }
    Sample t0, t1;
    t0.segments.push_back(test_a);
    t0.label = 0;
    t0.speaker_id = t0.session_id = "test";
    t1.segments.push_back(test_b);
    t1.label = 1;
    t1.speaker_id = t1.session_id = "test";
    ds.samples.push_back(std::move(t0));
    ds.samples.push_back(std::move(t1));
    plan.test_ids = {2 * k, 2 * k + 1};

    FederationConfig cfg;
    cfg.num_devices = k;
    cfg.total_rounds = 2;
    cfg.participation = 1.0;
    cfg.local_epochs = 1;
    cfg.seed = 777;

    SelfTrainConfig st;
    st.beta = 0.0;
    st.batch_size = 8;  // full batch for a two-sample shard
    return run_federation(arch, cfg, plan, st, ds).params;
  };

  const ParamSet<float> p1 = run_k(1);
  const double d2 = max_param_rel_diff(p1, run_k(2));
  const double d5 = max_param_rel_diff(p1, run_k(5));
  ok = ok && d2 < 1e-6 && d5 < 1e-6;
  info("identical-shard divergence: K=2 " + fmt(d2) + ", K=5 " + fmt(d5));

  // Weighted mean, sample counts 3:1. Expect float(0.75*a + 0.25*b) in
  // every slot, bit for bit.
  const auto a = init_params<float>(testutil::mini_arch(), 4, 21);
  const auto b = init_params<float>(testutil::mini_arch(), 4, 22);
  const ParamSet<float> merged =
      aggregate<float>({{0, &a, 3}, {1, &b, 1}});
  for (std::size_t e = 0; e < merged.size() && ok; ++e) {
    const auto& va = a.entries()[e].value;
    const auto& vb = b.entries()[e].value;
    const auto& vm = merged.entries()[e].value;
    for (std::int64_t i = 0; i < vm.numel(); ++i) {
      const float want = static_cast<float>(0.75 * static_cast<double>(va[i]) +
                                            0.25 * static_cast<double>(vb[i]));
      if (vm[i] != want) {
        ok = false;
        break;
      }
    }
  }
  return ok;
}

// ---------------------------------------------------------------------------
// 5. Partitioning: disjoint/exhaustive shards, leave-one-session-out
//    speaker separation, labeled split class balance, per-speaker
//    device disjointness — all across 20 seeds.

bool check_partitioning() {
  bool ok = true;

  SynthSpec spec;
  spec.num_classes = 3;
  spec.samples_per_class = 20;
  spec.num_speakers = 5;
  spec.frames = 8;
  spec.mel_bins = 8;
  spec.seed = 11;
  const Dataset ds = synth_dataset(spec);
  const int total = static_cast<int>(ds.samples.size());

  for (std::uint64_t seed = 0; seed < 20 && ok; ++seed) {
    PartitionConfig pc;
    pc.seed = seed;
    pc.k_folds = 5;

    // Random-mode shards partition the fold exactly.
    const std::vector<Fold> folds = make_folds(ds, pc);
    const Fold& fold = folds.front();
    pc.sigma = 25.0;
    pc.labeled_fraction = 0.5;
    const PartitionPlan plan = assign_devices(fold.train_ids, fold.test_ids, ds, pc, 4);
    try {
      plan.validate(total);
    } catch (const std::exception&) {
      ok = false;
    }
    std::set<int> seen(plan.test_ids.begin(), plan.test_ids.end());
    for (const DeviceShardIds& dev : plan.devices) {
      for (int id : dev.labeled) ok = ok && seen.insert(id).second;
      for (int id : dev.unlabeled) ok = ok && seen.insert(id).second;
    }
    ok = ok && static_cast<int>(seen.size()) == total;

    // Held-out sessions never leak speakers into training.
    PartitionConfig loso = pc;
    loso.fold_strategy = FoldStrategy::kLoso;
    for (const Fold& f : make_folds(ds, loso)) {
      std::set<std::string> train_spk, test_spk;
      for (int id : f.train_ids) train_spk.insert(ds.samples[static_cast<std::size_t>(id)].speaker_id);
      for (int id : f.test_ids) test_spk.insert(ds.samples[static_cast<std::size_t>(id)].speaker_id);
      for (const std::string& s : test_spk) ok = ok && train_spk.count(s) == 0;
    }

    // A 10% labeled split keeps every class within +-1 of its share.
    std::vector<int> all_ids(ds.samples.size());
    for (int i = 0; i < total; ++i) all_ids[static_cast<std::size_t>(i)] = i;
    const LabeledSplit split = split_labeled(all_ids, ds, 0.1, seed);
    for (int c = 0; c < spec.num_classes; ++c) {
      const long long share = std::llround(0.1 * spec.samples_per_class);
      ok = ok && std::abs(split.per_class_labeled[static_cast<std::size_t>(c)] - share) <= 1;
    }

    // Per-speaker devices own disjoint speaker sets.
    PartitionConfig ps = pc;
    ps.mode = PartitionMode::kPerSpeaker;
    const PartitionPlan speaker_plan = assign_devices(fold.train_ids, fold.test_ids, ds, ps, 4);
    std::set<std::string> claimed;
    for (const DeviceShardIds& dev : speaker_plan.devices) {
      std::set<std::string> mine;
      for (int id : dev.labeled) mine.insert(ds.samples[static_cast<std::size_t>(id)].speaker_id);
      for (int id : dev.unlabeled) mine.insert(ds.samples[static_cast<std::size_t>(id)].speaker_id);
      for (const std::string& s : mine) ok = ok && claimed.insert(s).second;
    }
  }
  return ok;
}

// ---------------------------------------------------------------------------
// 6. Determinism: identical config + seed => byte-identical metrics,
//    with the parallel device pool turned on.

bool check_determinism() {
  SynthSpec spec;
  spec.num_classes = 3;
  spec.samples_per_class = 12;
  spec.num_speakers = 4;
  spec.frames = 8;
  spec.mel_bins = 8;
  spec.seed = 5;
  const Dataset ds = synth_dataset(spec);

  PartitionConfig pc;
  pc.k_folds = 4;
  pc.labeled_fraction = 0.5;
  pc.seed = 3;
  const std::vector<Fold> folds = make_folds(ds, pc);
  const PartitionPlan plan =
      assign_devices(folds[0].train_ids, folds[0].test_ids, ds, pc, 4);

  const fs::path dir = fresh_dir("determinism");
  FederationConfig cfg;
  cfg.num_devices = 4;
  cfg.total_rounds = 3;
  cfg.participation = 0.75;
  cfg.eval_every = 1;
  cfg.workers = 4;
  cfg.seed = 99;

  SelfTrainConfig st;
  st.beta = 0.5;
  st.batch_size = 8;

  cfg.metrics_path = (dir / "a.jsonl").string();
  run_federation(testutil::mini_arch(), cfg, plan, st, ds);
  cfg.metrics_path = (dir / "b.jsonl").string();
  run_federation(testutil::mini_arch(), cfg, plan, st, ds);

  const std::string a = slurp((dir / "a.jsonl").string());
  return !a.empty() && a == slurp((dir / "b.jsonl").string());
}

// ---------------------------------------------------------------------------
// 7. End-to-end semi-supervised gain on the synthetic corpus: with 10%
//    labels, self-training must beat the supervised-only baseline by the
//    pinned margin, and full supervision must do at least as well as
//    self-training.

ExperimentConfig gain_config(const std::string& dir, double labeled_fraction, double beta) {
  ExperimentConfig cfg;
  cfg.seed = 1234;
  cfg.trials = 5;
  cfg.fold_limit = 1;
  cfg.output_dir = dir;
  cfg.save_final_params = false;

  cfg.synth.num_classes = 4;
  cfg.synth.samples_per_class = 100;
  cfg.synth.num_speakers = 8;
  cfg.synth.frames = 16;
  cfg.synth.mel_bins = 12;
  cfg.synth.max_segments = 1;
  cfg.synth.noise_level = 0.6;
  cfg.synth.seed = 2024;

  cfg.arch = testutil::mini_arch();
  cfg.arch.channels = {8, 16};
  cfg.arch.dropout_rate = 0.0;

  cfg.partition.mode = PartitionMode::kPerSpeaker;
  cfg.partition.labeled_fraction = labeled_fraction;
  cfg.partition.fold_strategy = FoldStrategy::kKFold;
  cfg.partition.k_folds = 5;
  cfg.partition.seed = 7;

  cfg.federation.num_devices = 8;
  cfg.federation.total_rounds = 30;
  cfg.federation.participation = 1.0;
  cfg.federation.local_epochs = 1;
  cfg.federation.eval_every = 0;  // final evaluation only
  cfg.federation.workers = 1;

  cfg.selftrain.beta = beta;
  cfg.selftrain.temperature = 2.0;
  cfg.selftrain.batch_size = 8;
  cfg.selftrain.learning_rate = 0.01;
  return cfg;
}

bool check_semi_supervised_gain() {
  const double t0 = now_seconds();
  const fs::path root = fresh_dir("gain");

  const ExperimentSummary semi =
      run_experiment(gain_config((root / "semi").string(), 0.1, 1.0));
  const ExperimentSummary supervised =
      run_experiment(gain_config((root / "supervised").string(), 0.1, 0.0));
  const ExperimentSummary full =
      run_experiment(gain_config((root / "full").string(), 1.0, 0.0));

  const double elapsed = now_seconds() - t0;
  info("UA means over 5 trials: 10% labels + self-training " + fmt(semi.mean_ua) +
       " (std " + fmt(semi.std_ua) + "), 10% labels supervised-only " + fmt(supervised.mean_ua) +
       " (std " + fmt(supervised.std_ua) + "), 100% labels " + fmt(full.mean_ua) + " (std " +
       fmt(full.std_ua) + ")");
  info("runtime " + fmt(elapsed) + " s");

  bool ok = semi.complete && supervised.complete && full.complete;
  ok = ok && semi.mean_ua >= supervised.mean_ua + kSemiSupervisedGainMargin;
  ok = ok && full.mean_ua >= semi.mean_ua;
  ok = ok && elapsed < 600.0;
  return ok;
}

// ---------------------------------------------------------------------------
// 8. Metrics: confusion row sums track per-class test counts, and UA is
//    the mean per-class recall on a hand-checkable matrix.

bool check_metrics() {
  bool ok = true;

  const MetricsReport hand = report_from_confusion({{5, 0}, {2, 3}});
  ok = ok && std::abs(hand.unweighted_accuracy - 0.8) < 1e-12;
  ok = ok && std::abs(hand.per_class_recall[0] - 1.0) < 1e-12;
  ok = ok && std::abs(hand.per_class_recall[1] - 0.6) < 1e-12;

  SynthSpec spec;
  spec.num_classes = 3;
  spec.samples_per_class = 10;
  spec.num_speakers = 3;
  spec.frames = 8;
  spec.mel_bins = 8;
  spec.seed = 31;
  const Dataset ds = synth_dataset(spec);
  std::vector<int> all_ids(ds.samples.size());
  for (std::size_t i = 0; i < all_ids.size(); ++i) all_ids[i] = static_cast<int>(i);

  auto zero = init_params<float>(testutil::mini_arch(), 3, 1);
  for (auto& entry : zero.entries()) entry.value.fill(0.0f);
  const MetricsReport report = evaluate(testutil::mini_arch(), zero, ds, all_ids);
  for (int c = 0; c < 3; ++c) {
    long long row = 0;
    for (long long v : report.confusion[static_cast<std::size_t>(c)]) row += v;
    ok = ok && row == spec.samples_per_class;
  }
  ok = ok && report.utterances == 30;
  return ok;
}

// ---------------------------------------------------------------------------
// 9. Features: silence maps to the log floor, the frame-count formula
//    holds, and a pure tone lands in the right mel filter.

bool check_features() {
  bool ok = true;
  FeatureConfig cfg;  // 25 ms / 10 ms @ 16 kHz -> window 400, hop 160
  const int rate = 16000;

  AudioClip silence;
  silence.samples.assign(rate, 0.0f);
  silence.sample_rate = rate;
  const Tensor<float> quiet = compute_logmel(silence, cfg);
  const float floor_value = static_cast<float>(std::log(cfg.log_offset));
  for (std::int64_t i = 0; i < quiet.numel(); ++i)
    ok = ok && std::abs(quiet[i] - floor_value) < 1e-5f;

  std::mt19937_64 rng(606);
  std::uniform_int_distribution<long long> length(1, 3 * rate);
  for (int i = 0; i < 100; ++i) {
    const long long n = length(rng);
    const int expect = n < 400 ? 1 : static_cast<int>((n - 400) / 160 + 1);
    ok = ok && cfg.frame_count(n, rate) == expect;
  }

  AudioClip tone;
  tone.sample_rate = rate;
  tone.samples.resize(rate);
  for (int i = 0; i < rate; ++i)
    tone.samples[static_cast<std::size_t>(i)] =
        0.5f * std::sin(2.0f * static_cast<float>(M_PI) * 440.0f * i / rate);
  const Tensor<float> mel = compute_logmel(tone, cfg);

  std::vector<double> energy(static_cast<std::size_t>(cfg.mel_bins), 0.0);
  for (int t = 0; t < mel.dim(0); ++t)
    for (int f = 0; f < mel.dim(1); ++f) energy[static_cast<std::size_t>(f)] += mel(t, f);
  const int hottest =
      static_cast<int>(std::max_element(energy.begin(), energy.end()) - energy.begin());

  const MelFilterbank bank = MelFilterbank::build(rate, 512, cfg.mel_bins, 0.0, rate / 2.0);
  int nearest = 0;
  for (int m = 1; m < cfg.mel_bins; ++m)
    if (std::abs(bank.centers_hz[static_cast<std::size_t>(m)] - 440.0) <
        std::abs(bank.centers_hz[static_cast<std::size_t>(nearest)] - 440.0))
      nearest = m;
  ok = ok && hottest == nearest;
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  const std::string filter = argc > 1 ? argv[1] : "";
  const std::vector<std::pair<std::string, std::function<bool()>>> criteria = {
      {"gradient fidelity vs finite differences", check_gradient_fidelity},
      {"confidence threshold scheduler", check_scheduler},
      {"temperature and shift invariance of pseudo-labels", check_pseudo_labeling},
      {"federated aggregation oracle", check_aggregation},
      {"partition integrity across seeds", check_partitioning},
      {"byte-identical reruns with parallel workers", check_determinism},
      {"semi-supervised gain on synthetic corpus", check_semi_supervised_gain},
      {"unweighted accuracy and confusion bookkeeping", check_metrics},
      {"log-mel feature pipeline", check_features},
  };

  bool all_ok = true;
  for (const auto& [name, fn] : criteria) {
    if (!filter.empty() && name.find(filter) == std::string::npos) continue;
    bool ok = false;
    try {
      ok = fn();
    } catch (const std::exception& e) {
      info(std::string("unexpected exception: ") + e.what());
    }
    std::printf("%s: %s\n", ok ? "PASS" : "FAIL", name.c_str());
    all_ok = all_ok && ok;
  }
  return all_ok ? 0 : 1;
}
