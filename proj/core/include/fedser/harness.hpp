#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedser/data.hpp"
#include "fedser/features.hpp"
#include "fedser/federation.hpp"
#include "fedser/metrics.hpp"
#include "fedser/model.hpp"
#include "fedser/selftrain.hpp"

namespace fedser {

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int trials = 5;
  int fold_limit = 0;  // 0 = run every fold; n = first n folds (desk-scale budget knob)
  std::string output_dir = "out";
  bool save_final_params = true;

  FederationConfig federation;
  SelfTrainConfig selftrain;
  PartitionConfig partition;
  ArchConfig arch;
  FeatureConfig features;

  // Data source: a manifest path, or (when empty) the synthetic generator.
  std::string manifest;
  SynthSpec synth;

  void validate() const;
};

ExperimentConfig load_experiment_config(const std::string& path);
void save_experiment_config(const ExperimentConfig& cfg, const std::string& path);

struct TrialOutcome {
  int fold = 0;
  std::string fold_name;
  int trial = 0;
  bool failed = false;
  std::string error;
  double ua = 0.0;
  double segment_accuracy = 0.0;
  std::vector<double> per_class_recall;
  std::vector<std::vector<long long>> confusion;
  std::vector<std::pair<int, double>> ua_curve;  // (round, UA) at eval cadence
};

struct ExperimentSummary {
  bool complete = true;
  int folds_run = 0;
  int trials = 0;
  double mean_ua = 0.0;
  double std_ua = 0.0;  // sample standard deviation over trials
  std::vector<TrialOutcome> outcomes;
  std::string summary_path;
};

/// Runs fold x trial federated experiments, writes per-trial metrics files
/// plus a structured summary (and the resolved config) under output_dir,
/// and returns the aggregate. Trial failures are recorded and mark the
/// summary incomplete rather than aborting the rest.
ExperimentSummary run_experiment(const ExperimentConfig& cfg);

struct CompareReport {
  double mean_delta = 0.0;                          // candidate - baseline
  std::vector<std::pair<std::string, double>> per_fold;  // fold name -> mean delta
  int positive = 0;  // trial pairs where candidate > baseline
  int negative = 0;
  int ties = 0;
  double sign_test_p = 1.0;  // two-sided
};

/// Pairs trials by (fold, trial) across two summary files; requires the
/// same fold structure and class count.
CompareReport compare_runs(const std::string& baseline_summary, const std::string& candidate_summary);

void save_compare_report(const CompareReport& report, const std::string& path);

}  // namespace fedser
