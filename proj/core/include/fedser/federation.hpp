#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedser/data.hpp"
#include "fedser/model.hpp"
#include "fedser/params.hpp"
#include "fedser/selftrain.hpp"

namespace fedser {

struct FederationConfig {
  int num_devices = 10;
  int total_rounds = 100;
  double participation = 0.8;  // q; ceil(q*K) devices per round
  int local_epochs = 1;
  std::uint64_t seed = 0;
  int eval_every = 0;        // evaluate on the test fold every e rounds (0 = final round only)
  int checkpoint_every = 0;  // 0 = off
  std::string checkpoint_dir;
  std::string metrics_path;  // per-round JSONL; empty = no file
  int workers = 1;           // device-update thread pool size

  void validate() const;
  int participants_per_round() const;
};

struct DeviceRoundStats {
  int device = 0;
  long long samples = 0;  // N_k = labeled + unlabeled
  double weight = 0.0;    // gamma_k
  double tau = 0.0;
  DeviceUpdateStats update;
};

struct RoundRecord {
  int round = 0;
  std::vector<int> participants;  // ascending device ids
  std::vector<DeviceRoundStats> stats;
  std::optional<double> eval_ua;
  std::optional<double> eval_segment_accuracy;
};

struct DeviceState {
  DeviceShard<float> shard;
  long long sample_count = 0;
  int completed_rounds = 0;  // C_s
};

struct FederationState {
  ParamSet<float> global;
  int completed_rounds = 0;  // C
  std::vector<DeviceState> devices;
  std::vector<RoundRecord> log;
};

/// ceil(q*K) distinct devices, ascending ids; a pure function of
/// (seed, round_index).
std::vector<int> sample_participants(const FederationConfig& cfg, int round_index);

template <typename T>
struct WeightedUpdate {
  int device = 0;
  const ParamSet<T>* params = nullptr;
  long long samples = 0;
};

/// Element-wise average with gamma_k = N_k / sum N over the round's
/// participants, accumulated in 64-bit in ascending device-id order.
template <typename T>
ParamSet<T> aggregate(const std::vector<WeightedUpdate<T>>& updates);

extern template ParamSet<float> aggregate(const std::vector<WeightedUpdate<float>>&);
extern template ParamSet<double> aggregate(const std::vector<WeightedUpdate<double>>&);

struct FederationResult {
  ParamSet<float> params;
  std::vector<RoundRecord> log;
};

/// The coordinator loop: per round, sample participants, run their local
/// self-training updates from the current global parameters (thread pool,
/// results reduced in device order), aggregate, advance C and each
/// participant's C_s. Any device failure aborts the round; no partial
/// aggregation. Bit-deterministic for a given seed regardless of worker
/// count.
FederationResult run_federation(const ArchConfig& arch, const FederationConfig& cfg,
                                const PartitionPlan& plan, const SelfTrainConfig& stcfg,
                                const Dataset& ds);

}  // namespace fedser
