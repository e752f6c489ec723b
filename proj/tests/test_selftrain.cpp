#include <doctest.h>

#include <cmath>
#include <vector>

#include "fedser/model.hpp"
#include "fedser/selftrain.hpp"
#include "fedser/tensor.hpp"
#include "helpers.hpp"

using namespace fedser;
using testutil::mini_arch;
using testutil::random_tensor;

namespace {

DeviceShard<float> random_shard(int nl, int nu, int t, int f, std::uint64_t seed,
                                int num_classes = 4) {
  DeviceShard<float> shard;
  for (int i = 0; i < nl; ++i) {
    shard.labeled.push_back(random_tensor<float>({t, f}, seed + static_cast<std::uint64_t>(i), 0.8));
    shard.labels.push_back(i % num_classes);
  }
  for (int i = 0; i < nu; ++i)
    shard.unlabeled.push_back(
        random_tensor<float>({t, f}, seed + 1000 + static_cast<std::uint64_t>(i), 0.8));
  return shard;
}

bool params_equal(const ParamSet<float>& a, const ParamSet<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t e = 0; e < a.size(); ++e)
    for (std::int64_t i = 0; i < a.entries()[e].value.numel(); ++i)
      if (a.entries()[e].value[i] != b.entries()[e].value[i]) return false;
  return true;
}

}  // namespace

TEST_SUITE("selftrain") {

TEST_CASE("threshold schedule hits its anchor points") {
  SelfTrainConfig cfg;  // tau 0.5..0.9, delta 0.5, corrected
  const int R = 100;

  CHECK(confidence_threshold(R, 0, 0, cfg) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(confidence_threshold(R, 50, 50, cfg) == doctest::Approx(0.7).epsilon(1e-9));
  CHECK(confidence_threshold(R, 100, 100, cfg) == doctest::Approx(0.9).epsilon(1e-12));

  // A straggler (device behind the global round count) sees a softer
  // threshold: x = 50 - 0.5*(50-0) = 25, cos(pi/4) = sqrt(2)/2.
  const double straggler = confidence_threshold(R, 50, 0, cfg);
  CHECK(straggler == doctest::Approx(0.5 + 0.2 * (1.0 - std::sqrt(0.5))).epsilon(1e-12));
  CHECK(straggler < confidence_threshold(R, 50, 50, cfg));

  SelfTrainConfig lit = cfg;
  lit.scheduler_mode = SchedulerMode::kPaperLiteral;
  CHECK(confidence_threshold(R, 0, 0, lit) == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(confidence_threshold(R, 50, 50, lit) == doctest::Approx(0.2).epsilon(1e-9));
  CHECK(confidence_threshold(R, 100, 100, lit) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("threshold schedule is monotone and bounded") {
  SelfTrainConfig cfg;
  const int R = 37;
  double prev = -1.0;
  for (int c = 0; c <= R; ++c) {
    const double tau = confidence_threshold(R, c, c, cfg);
    CHECK(tau >= cfg.tau_min - 1e-12);
    CHECK(tau <= cfg.tau_max + 1e-12);
    CHECK(tau >= prev - 1e-12);
    prev = tau;

    // More completed device rounds never lowers the threshold.
    double prev_dev = -1.0;
    for (int cs = 0; cs <= c; ++cs) {
      const double t = confidence_threshold(R, c, cs, cfg);
      CHECK(t >= prev_dev - 1e-12);
      prev_dev = t;
    }
  }

  // delta = 1 pins the threshold to the device's own progress.
  SelfTrainConfig own = cfg;
  own.delta = 1.0;
  CHECK(confidence_threshold(R, 30, 10, own) ==
        doctest::Approx(confidence_threshold(R, 10, 10, own)).epsilon(1e-12));

  // delta = 0 ignores device progress entirely.
  SelfTrainConfig global = cfg;
  global.delta = 0.0;
  CHECK(confidence_threshold(R, 30, 10, global) ==
        doctest::Approx(confidence_threshold(R, 30, 30, global)).epsilon(1e-12));
}

TEST_CASE("threshold schedule rejects out-of-range progress") {
  SelfTrainConfig cfg;
  CHECK_THROWS(confidence_threshold(0, 0, 0, cfg));
  CHECK_THROWS(confidence_threshold(10, 11, 0, cfg));
  CHECK_THROWS(confidence_threshold(10, 5, 6, cfg));
  CHECK_THROWS(confidence_threshold(10, 5, -1, cfg));
}

TEST_CASE("scheduler mode names round-trip") {
  CHECK(scheduler_mode_from_string("corrected") == SchedulerMode::kCorrected);
  CHECK(scheduler_mode_from_string("paper_literal") == SchedulerMode::kPaperLiteral);
  CHECK(std::string(to_string(SchedulerMode::kCorrected)) == "corrected");
  CHECK(std::string(to_string(SchedulerMode::kPaperLiteral)) == "paper_literal");
  CHECK_THROWS(scheduler_mode_from_string("linear"));
}

TEST_CASE("pseudo-labels pick the tempered argmax and soften with temperature") {
  const std::vector<float> logits = {2.0f, 1.0f, 0.0f};

  const PseudoLabel p1 = pseudo_label(logits, 1.0, 42);
  CHECK(p1.class_index == 0);
  CHECK(p1.sample_id == 42);
  CHECK(p1.confidence == doctest::Approx(0.66524096).epsilon(1e-5));

  const PseudoLabel p2 = pseudo_label(logits, 2.0);
  CHECK(p2.class_index == 0);
  CHECK(p2.confidence == doctest::Approx(0.50648037).epsilon(1e-5));
  CHECK(p2.confidence < p1.confidence);

  // Very high temperature approaches the uniform distribution.
  const PseudoLabel flat = pseudo_label(logits, 1e6);
  CHECK(flat.confidence == doctest::Approx(1.0 / 3.0).epsilon(1e-4));

  const std::vector<float> tie = {1.0f, 1.0f, 1.0f, 1.0f};
  CHECK(pseudo_label(tie, 2.0).class_index == 0);

  const std::vector<float> bad = {1.0f, std::numeric_limits<float>::quiet_NaN()};
  CHECK_THROWS(pseudo_label(bad, 1.0));
}

TEST_CASE("combined loss matches hand-computed cross-entropies") {
  Tensor<float> sup({2, 3}, {0.7f, 0.2f, 0.1f, 0.2f, 0.5f, 0.3f});
  const std::vector<int> labels = {0, 1};
  Tensor<float> unsup({3, 3}, {0.6f, 0.3f, 0.1f, 0.1f, 0.8f, 0.1f, 0.3f, 0.4f, 0.3f});
  const std::vector<int> pseudo = {0, 1, 2};
  const std::vector<bool> mask = {true, false, true};

  const CombinedLoss loss = combined_loss(sup, labels, unsup, pseudo, mask, 0.5);
  const double ls = -(std::log(0.7) + std::log(0.5)) / 2.0;
  const double lu = -(std::log(0.6) + std::log(0.3)) / 2.0;  // masked mean over 2 retained
  CHECK(loss.supervised == doctest::Approx(ls).epsilon(1e-6));
  CHECK(loss.unsupervised == doctest::Approx(lu).epsilon(1e-6));
  CHECK(loss.total == doctest::Approx(ls + 0.5 * lu).epsilon(1e-6));

  // Nothing retained: the unsupervised term vanishes.
  const CombinedLoss none = combined_loss(sup, labels, unsup, pseudo, {false, false, false}, 0.5);
  CHECK(none.unsupervised == 0.0);
  CHECK(none.total == doctest::Approx(ls).epsilon(1e-6));

  // beta scales only the unsupervised part.
  const CombinedLoss b2 = combined_loss(sup, labels, unsup, pseudo, mask, 2.0);
  CHECK(b2.total == doctest::Approx(ls + 2.0 * lu).epsilon(1e-6));

  CHECK_THROWS(combined_loss(sup, std::vector<int>{0}, unsup, pseudo, mask, 1.0));
  CHECK_THROWS(combined_loss(sup, labels, unsup, std::vector<int>{0, 1}, mask, 1.0));
}

TEST_CASE("stack_batch preserves order and rejects mixed shapes") {
  const Tensor<float> a = random_tensor<float>({4, 3}, 1);
  const Tensor<float> b = random_tensor<float>({4, 3}, 2);
  const Tensor<float> batch = stack_batch<float>({&a, &b});
  REQUIRE(batch.dims() == std::vector<int>{2, 4, 3});
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    CHECK(batch[i] == a[i]);
    CHECK(batch[a.numel() + i] == b[i]);
  }

  const Tensor<float> odd = random_tensor<float>({5, 3}, 3);
  CHECK_THROWS(stack_batch<float>({&a, &odd}));
  CHECK_THROWS(stack_batch<float>({}));
}

TEST_CASE("self-training gradient matches finite differences") {
  auto arch = mini_arch();
  arch.dropout_rate = 0.0;
  auto params = init_params<double>(arch, 3, 51);

  const Tensor<double> l_batch = random_tensor<double>({2, 6, 6}, 52, 0.6);
  const std::vector<int> labels = {0, 2};
  const Tensor<double> u_batch = random_tensor<double>({3, 6, 6}, 53, 0.6);
  const std::vector<int> pseudo = {2, 0, 1};
  const std::vector<bool> mask = {true, false, true};
  const double beta = 0.7;

  auto objective = [&]() {
    const auto fwd = forward(arch, params, [&] {
      Tensor<double> batch({5, 6, 6});
      std::copy(l_batch.data(), l_batch.data() + l_batch.numel(), batch.data());
      std::copy(u_batch.data(), u_batch.data() + u_batch.numel(), batch.data() + l_batch.numel());
      return batch;
    }(), Mode::kTrain, 9);
    Tensor<double> sup({2, 3}), unsup({3, 3});
    for (int i = 0; i < 2; ++i) {
      const auto p = softmax_temperature(&fwd.logits(i, 0), 3, 1.0);
      std::copy(p.begin(), p.end(), &sup(i, 0));
    }
    for (int i = 0; i < 3; ++i) {
      const auto p = softmax_temperature(&fwd.logits(2 + i, 0), 3, 1.0);
      std::copy(p.begin(), p.end(), &unsup(i, 0));
    }
    const CombinedLoss loss = combined_loss(sup, labels, unsup, pseudo, mask, beta);
    double sq = 0.0;
    for (const auto& e : params.entries()) {
      if (!e.decay) continue;
      for (std::int64_t i = 0; i < e.value.numel(); ++i) sq += e.value[i] * e.value[i];
    }
    return loss.total + 0.5 * arch.l2_rate * sq;
  };

  const StepGradient<double> step =
      selftrain_gradient(arch, params, l_batch, labels, u_batch, pseudo, mask, beta, 9);
  CHECK(step.retained == 2);
  CHECK(testutil::fd_check_params(params, step.grads, objective) < 1e-4);
}

TEST_CASE("masked-out samples contribute nothing to the gradient") {
  const auto arch = mini_arch();
  const auto params = init_params<float>(arch, 4, 61);

  const Tensor<float> l_batch = random_tensor<float>({2, 8, 8}, 62, 0.6);
  const std::vector<int> labels = {1, 3};
  Tensor<float> u_batch = random_tensor<float>({2, 8, 8}, 63, 0.6);
  const std::vector<int> pseudo = {0, 2};
  const std::vector<bool> mask = {true, false};

  const auto base =
      selftrain_gradient(arch, params, l_batch, labels, u_batch, pseudo, mask, 1.0, 5);

  // Replace the masked-out sample with completely different content.
  for (std::int64_t i = 0; i < 64; ++i) u_batch[64 + i] = -3.0f + 0.1f * static_cast<float>(i);
  const auto changed =
      selftrain_gradient(arch, params, l_batch, labels, u_batch, pseudo, mask, 1.0, 5);

  for (std::size_t e = 0; e < base.grads.size(); ++e)
    for (std::int64_t i = 0; i < base.grads.entries()[e].value.numel(); ++i)
      CHECK(base.grads.entries()[e].value[i] == changed.grads.entries()[e].value[i]);
}

TEST_CASE("gradient step handles labeled-only and unlabeled-only batches") {
  const auto arch = mini_arch();
  const auto params = init_params<float>(arch, 4, 71);

  const Tensor<float> l_batch = random_tensor<float>({2, 8, 8}, 72, 0.6);
  const auto sup_only = selftrain_gradient(arch, params, l_batch, {0, 1}, Tensor<float>{}, {}, {},
                                           1.0, 3);
  CHECK(sup_only.loss.unsupervised == 0.0);
  CHECK(sup_only.loss.supervised > 0.0);

  const Tensor<float> u_batch = random_tensor<float>({2, 8, 8}, 73, 0.6);
  const auto unsup_only = selftrain_gradient(arch, params, Tensor<float>{}, {}, u_batch, {1, 2},
                                             {true, true}, 1.0, 3);
  CHECK(unsup_only.loss.supervised == 0.0);
  CHECK(unsup_only.retained == 2);

  CHECK_THROWS(selftrain_gradient(arch, params, Tensor<float>{}, {}, Tensor<float>{}, {}, {}, 1.0, 3));
}

TEST_CASE("device update with beta zero equals supervised-only training") {
  const auto arch = mini_arch();
  const auto params = init_params<float>(arch, 4, 81);
  SelfTrainConfig cfg;
  cfg.beta = 0.0;
  cfg.batch_size = 4;

  const auto full = random_shard(6, 6, 8, 8, 100);
  DeviceShard<float> labeled_only;
  labeled_only.labeled = full.labeled;
  labeled_only.labels = full.labels;

  const auto a = device_update(arch, params, full, 0.5, cfg, 2, 7);
  const auto b = device_update(arch, params, labeled_only, 0.5, cfg, 2, 7);
  CHECK(params_equal(a.params, b.params));
  CHECK(a.stats.steps == b.stats.steps);
}

TEST_CASE("an unreachable threshold reduces to supervised-only training") {
  const auto arch = mini_arch();
  const auto params = init_params<float>(arch, 4, 91);
  SelfTrainConfig cfg;
  cfg.batch_size = 4;

  // Equal stream sizes so both runs take the same number of steps.
  const auto full = random_shard(6, 6, 8, 8, 200);
  DeviceShard<float> labeled_only;
  labeled_only.labeled = full.labeled;
  labeled_only.labels = full.labels;

  const auto a = device_update(arch, params, full, 1.01, cfg, 2, 7);
  SelfTrainConfig sup = cfg;
  sup.beta = 0.0;
  const auto b = device_update(arch, params, labeled_only, 1.01, sup, 2, 7);
  CHECK(params_equal(a.params, b.params));
  CHECK(a.stats.retained_fraction == 0.0);
}

TEST_CASE("device update is deterministic in its seed") {
  const auto arch = mini_arch();
  const auto params = init_params<float>(arch, 4, 31);
  SelfTrainConfig cfg;
  cfg.batch_size = 4;
  const auto shard = random_shard(5, 9, 8, 8, 300);

  const auto a = device_update(arch, params, shard, 0.3, cfg, 2, 17);
  const auto b = device_update(arch, params, shard, 0.3, cfg, 2, 17);
  CHECK(params_equal(a.params, b.params));
  CHECK(a.stats.steps == b.stats.steps);
  CHECK(a.stats.loss_sup == b.stats.loss_sup);

  const auto c = device_update(arch, params, shard, 0.3, cfg, 2, 18);
  CHECK_FALSE(params_equal(a.params, c.params));
}

TEST_CASE("step count follows the longer of the two streams") {
  const auto arch = mini_arch();
  const auto params = init_params<float>(arch, 4, 41);
  SelfTrainConfig cfg;
  cfg.batch_size = 4;

  const auto shard = random_shard(5, 12, 8, 8, 400);
  const auto r = device_update(arch, params, shard, 0.0, cfg, 2, 3);
  CHECK(r.stats.steps == 2 * 3);  // ceil(12/4) per epoch, 2 epochs
  CHECK(r.stats.retained_fraction == doctest::Approx(1.0).epsilon(1e-12));  // tau 0 keeps all
  CHECK(r.stats.mean_confidence > 0.0);
  CHECK(r.stats.mean_confidence <= 1.0);
  CHECK_FALSE(r.stats.skipped);

  // beta = 0 ignores the unlabeled stream, so the labeled stream drives.
  SelfTrainConfig sup = cfg;
  sup.beta = 0.0;
  const auto s = device_update(arch, params, shard, 0.0, sup, 2, 3);
  CHECK(s.stats.steps == 2 * 2);  // ceil(5/4) per epoch
}

TEST_CASE("a device with no labels skips unless a pseudo-label clears the bar") {
  const auto arch = mini_arch();
  const auto params = init_params<float>(arch, 4, 51);
  SelfTrainConfig cfg;
  cfg.batch_size = 4;

  DeviceShard<float> shard;
  for (int i = 0; i < 6; ++i)
    shard.unlabeled.push_back(random_tensor<float>({8, 8}, 500 + static_cast<std::uint64_t>(i), 0.6));

  // Fresh random weights cannot clear an impossible threshold.
  const auto skipped = device_update(arch, params, shard, 1.01, cfg, 1, 5);
  CHECK(skipped.stats.skipped);
  CHECK(skipped.stats.steps == 0);
  CHECK(params_equal(skipped.params, params));

  // With the threshold wide open the device trains on pseudo-labels alone.
  const auto trained = device_update(arch, params, shard, 0.0, cfg, 1, 5);
  CHECK_FALSE(trained.stats.skipped);
  CHECK(trained.stats.steps == 2);
  CHECK_FALSE(params_equal(trained.params, params));

  // An empty shard (or beta = 0 with no labels) is always a skip.
  DeviceShard<float> empty;
  const auto none = device_update(arch, params, empty, 0.0, cfg, 1, 5);
  CHECK(none.stats.skipped);
  SelfTrainConfig sup = cfg;
  sup.beta = 0.0;
  const auto unusable = device_update(arch, params, shard, 0.0, sup, 1, 5);
  CHECK(unusable.stats.skipped);
}

TEST_CASE("config validation rejects inconsistent settings") {
  SelfTrainConfig cfg;
  cfg.beta = -0.1;
  CHECK_THROWS(cfg.validate());
  cfg = SelfTrainConfig{};
  cfg.temperature = 0.0;
  CHECK_THROWS(cfg.validate());
  cfg = SelfTrainConfig{};
  cfg.tau_min = 0.95;  // above tau_max
  CHECK_THROWS(cfg.validate());
  cfg = SelfTrainConfig{};
  cfg.delta = 1.5;
  CHECK_THROWS(cfg.validate());
  cfg = SelfTrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS(cfg.validate());
}

}  // TEST_SUITE
