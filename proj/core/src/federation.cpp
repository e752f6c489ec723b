#include "fedser/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

#include "fedser/metrics.hpp"
#include "fedser/rng.hpp"

namespace fedser {

using ordered_json = nlohmann::ordered_json;

void FederationConfig::validate() const {
  if (num_devices < 1) throw std::invalid_argument("FederationConfig: num_devices must be >= 1");
  if (total_rounds < 1) throw std::invalid_argument("FederationConfig: total_rounds must be >= 1");
  if (!(participation > 0 && participation <= 1))
    throw std::invalid_argument("FederationConfig: participation must be in (0,1]");
  if (local_epochs < 1) throw std::invalid_argument("FederationConfig: local_epochs must be >= 1");
  if (eval_every < 0 || checkpoint_every < 0 || workers < 0)
    throw std::invalid_argument("FederationConfig: cadence/worker knobs must be >= 0");
  if (checkpoint_every > 0 && checkpoint_dir.empty())
    throw std::invalid_argument("FederationConfig: checkpoint_every needs checkpoint_dir");
}

int FederationConfig::participants_per_round() const {
  return static_cast<int>(std::ceil(participation * num_devices));
}

std::vector<int> sample_participants(const FederationConfig& cfg, int round_index) {
  cfg.validate();
  if (round_index < 0 || round_index >= cfg.total_rounds)
    throw std::invalid_argument("sample_participants: round index out of range");

  const int m = cfg.participants_per_round();
  std::vector<int> ids(static_cast<std::size_t>(cfg.num_devices));
  std::iota(ids.begin(), ids.end(), 0);
  auto rng = make_rng(derive_seed(cfg.seed, 0x70617274, static_cast<std::uint64_t>(round_index)));
  // Partial Fisher-Yates: the first m entries become the sample.
  for (int i = 0; i < m; ++i) {
    std::uniform_int_distribution<int> dist(i, cfg.num_devices - 1);
    std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(dist(rng))]);
  }
  ids.resize(static_cast<std::size_t>(m));
  std::sort(ids.begin(), ids.end());
  return ids;
}

template <typename T>
ParamSet<T> aggregate(const std::vector<WeightedUpdate<T>>& updates) {
  if (updates.empty()) throw std::invalid_argument("aggregate: no updates");
  for (std::size_t i = 1; i < updates.size(); ++i) {
    if (updates[i].params->fingerprint() != updates[0].params->fingerprint())
      throw std::invalid_argument("aggregate: architecture fingerprint mismatch");
    if (updates[i].device <= updates[i - 1].device)
      throw std::invalid_argument("aggregate: updates must be in ascending device order");
  }
  long long total = 0;
  for (const auto& u : updates) {
    if (u.samples < 0) throw std::invalid_argument("aggregate: negative sample count");
    total += u.samples;
  }
  if (total == 0) throw std::invalid_argument("aggregate: zero total samples");

  // Accumulate each entry in double, in the given (ascending-device) order,
  // so the reduction is bit-stable no matter how updates were produced.
  ParamSet<double> acc = updates[0].params->template cast<double>().zeros_like();
  double gamma_sum = 0.0;
  for (const auto& u : updates) {
    const double gamma = static_cast<double>(u.samples) / static_cast<double>(total);
    gamma_sum += gamma;
    for (std::size_t e = 0; e < acc.size(); ++e) {
      const Tensor<T>& src = u.params->entries()[e].value;
      Tensor<double>& dst = acc.entries()[e].value;
      for (std::int64_t i = 0; i < src.numel(); ++i)
        dst[i] += gamma * static_cast<double>(src[i]);
    }
  }
  if (std::abs(gamma_sum - 1.0) > 1e-9)
    throw std::logic_error("aggregate: weights do not sum to 1");
  return acc.template cast<T>();
}

template ParamSet<float> aggregate(const std::vector<WeightedUpdate<float>>&);
template ParamSet<double> aggregate(const std::vector<WeightedUpdate<double>>&);

namespace {

DeviceShard<float> materialize_shard(const Dataset& ds, const DeviceShardIds& ids) {
  DeviceShard<float> shard;
  for (int id : ids.labeled) {
    const Sample& s = ds.samples.at(static_cast<std::size_t>(id));
    for (const FeatureTensor& seg : s.segments) {
      shard.labeled.push_back(seg);
      shard.labels.push_back(s.label);
    }
  }
  for (int id : ids.unlabeled) {
    const Sample& s = ds.samples.at(static_cast<std::size_t>(id));
    for (const FeatureTensor& seg : s.segments) shard.unlabeled.push_back(seg);
  }
  return shard;
}

ordered_json device_line(int round, const DeviceRoundStats& d) {
  ordered_json j;
  j["type"] = "device";
  j["round"] = round;
  j["device"] = d.device;
  j["tau"] = d.tau;
  j["samples"] = d.samples;
  j["weight"] = d.weight;
  j["retained_fraction"] = d.update.retained_fraction;
  j["mean_confidence"] = d.update.mean_confidence;
  j["loss_sup"] = d.update.loss_sup;
  j["loss_unsup"] = d.update.loss_unsup;
  j["steps"] = d.update.steps;
  j["skipped"] = d.update.skipped;
  return j;
}

ordered_json round_line(const RoundRecord& rec) {
  double sup = 0, unsup = 0, retained = 0, conf = 0;
  int skipped = 0;
  for (const auto& d : rec.stats) {
    sup += d.update.loss_sup;
    unsup += d.update.loss_unsup;
    retained += d.update.retained_fraction;
    conf += d.update.mean_confidence;
    skipped += d.update.skipped ? 1 : 0;
  }
  const double n = rec.stats.empty() ? 1.0 : static_cast<double>(rec.stats.size());
  ordered_json j;
  j["type"] = "round";
  j["round"] = rec.round;
  j["participants"] = rec.participants;
  j["mean_loss_sup"] = sup / n;
  j["mean_loss_unsup"] = unsup / n;
  j["mean_retained_fraction"] = retained / n;
  j["mean_confidence"] = conf / n;
  j["skipped_devices"] = skipped;
  if (rec.eval_ua) {
    j["eval_ua"] = *rec.eval_ua;
    j["eval_segment_accuracy"] = *rec.eval_segment_accuracy;
  }
  return j;
}

}  // namespace

FederationResult run_federation(const ArchConfig& arch, const FederationConfig& cfg,
                                const PartitionPlan& plan, const SelfTrainConfig& stcfg,
                                const Dataset& ds) {
  arch.validate();
  cfg.validate();
  stcfg.validate();
  ds.validate();
  if (plan.num_devices() != cfg.num_devices)
    throw std::invalid_argument("run_federation: plan has " + std::to_string(plan.num_devices()) +
                                " devices, config expects " + std::to_string(cfg.num_devices));
  plan.validate(static_cast<int>(ds.samples.size()));

  FederationState state;
  state.global = init_params<float>(arch, ds.num_classes, derive_seed(cfg.seed, 0x696e6974));
  for (const DeviceShardIds& ids : plan.devices) {
    DeviceState dev;
    dev.shard = materialize_shard(ds, ids);
    dev.sample_count = static_cast<long long>(ids.labeled.size() + ids.unlabeled.size());
    state.devices.push_back(std::move(dev));
  }

  std::ofstream metrics;
  if (!cfg.metrics_path.empty()) {
    metrics.open(cfg.metrics_path, std::ios::binary | std::ios::trunc);
    if (!metrics) throw std::runtime_error("run_federation: cannot open " + cfg.metrics_path);
  }
  if (cfg.checkpoint_every > 0) std::filesystem::create_directories(cfg.checkpoint_dir);

  for (int round = 0; round < cfg.total_rounds; ++round) {
    const std::vector<int> participants = sample_participants(cfg, round);
    const int m = static_cast<int>(participants.size());

    std::vector<double> taus(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i)
      taus[static_cast<std::size_t>(i)] = confidence_threshold(
          cfg.total_rounds, state.completed_rounds,
          state.devices[static_cast<std::size_t>(participants[static_cast<std::size_t>(i)])]
              .completed_rounds,
          stcfg);

    // Local updates run in a worker pool; slot i belongs to participants[i],
    // so the later reduction is in ascending device order regardless of
    // which thread finished first.
    std::vector<DeviceUpdateResult<float>> results(static_cast<std::size_t>(m));
    std::vector<std::string> failures(static_cast<std::size_t>(m));
    std::atomic<int> next{0};
    auto work = [&] {
      for (int i = next.fetch_add(1); i < m; i = next.fetch_add(1)) {
        const int dev = participants[static_cast<std::size_t>(i)];
        try {
          results[static_cast<std::size_t>(i)] = device_update(
              arch, state.global, state.devices[static_cast<std::size_t>(dev)].shard,
              taus[static_cast<std::size_t>(i)], stcfg, cfg.local_epochs,
              derive_seed(cfg.seed, 0x757064, static_cast<std::uint64_t>(round),
                          static_cast<std::uint64_t>(dev)));
        } catch (const std::exception& e) {
          failures[static_cast<std::size_t>(i)] = e.what();
        }
      }
    };
    const int workers = std::min(std::max(1, cfg.workers), m);
    if (workers <= 1) {
      work();
    } else {
      std::vector<std::thread> pool;
      for (int w = 0; w < workers; ++w) pool.emplace_back(work);
      for (auto& t : pool) t.join();
    }
    for (int i = 0; i < m; ++i)
      if (!failures[static_cast<std::size_t>(i)].empty())
        throw std::runtime_error("run_federation: device " +
                                 std::to_string(participants[static_cast<std::size_t>(i)]) +
                                 " failed in round " + std::to_string(round) + ": " +
                                 failures[static_cast<std::size_t>(i)]);

    long long total_samples = 0;
    for (int dev : participants)
      total_samples += state.devices[static_cast<std::size_t>(dev)].sample_count;
    if (total_samples == 0)
      throw std::runtime_error("run_federation: round " + std::to_string(round) +
                               " has no samples across participants");

    std::vector<WeightedUpdate<float>> updates;
    for (int i = 0; i < m; ++i) {
      const int dev = participants[static_cast<std::size_t>(i)];
      updates.push_back({dev, &results[static_cast<std::size_t>(i)].params,
                         state.devices[static_cast<std::size_t>(dev)].sample_count});
    }
    state.global = aggregate(updates);

    RoundRecord rec;
    rec.round = round;
    rec.participants = participants;
    for (int i = 0; i < m; ++i) {
      const int dev = participants[static_cast<std::size_t>(i)];
      DeviceRoundStats s;
      s.device = dev;
      s.samples = state.devices[static_cast<std::size_t>(dev)].sample_count;
      s.weight = static_cast<double>(s.samples) / static_cast<double>(total_samples);
      s.tau = taus[static_cast<std::size_t>(i)];
      s.update = results[static_cast<std::size_t>(i)].stats;
      rec.stats.push_back(s);
    }

    ++state.completed_rounds;
    for (int dev : participants) ++state.devices[static_cast<std::size_t>(dev)].completed_rounds;

    const bool last = round == cfg.total_rounds - 1;
    if (!plan.test_ids.empty() && (last || (cfg.eval_every > 0 && (round + 1) % cfg.eval_every == 0))) {
      const MetricsReport report = evaluate(arch, state.global, ds, plan.test_ids);
      rec.eval_ua = report.unweighted_accuracy;
      rec.eval_segment_accuracy = report.segment_accuracy;
    }
    if (cfg.checkpoint_every > 0 && (last || (round + 1) % cfg.checkpoint_every == 0))
      save_params(cfg.checkpoint_dir + "/round_" + std::to_string(round + 1) + ".params",
                  state.global);

    if (metrics.is_open()) {
      for (const auto& d : rec.stats) metrics << device_line(round, d).dump() << "\n";
      metrics << round_line(rec).dump() << "\n";
    }
    state.log.push_back(std::move(rec));
  }

  return FederationResult{std::move(state.global), std::move(state.log)};
}

}  // namespace fedser
