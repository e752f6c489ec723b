#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedser/features.hpp"

namespace fedser {

/// One utterance: segmented features plus speaker/session metadata.
struct Sample {
  std::vector<FeatureTensor> segments;
  std::string speaker_id;
  std::string session_id;  // LOSO grouping key; often equals speaker_id
  int label = -1;
};

struct Dataset {
  std::vector<Sample> samples;
  int num_classes = 0;
  std::vector<std::string> class_names;

  void validate() const;
  std::vector<int> class_counts() const;
  std::vector<std::string> distinct_speakers() const;  // sorted unique
  std::vector<std::string> distinct_sessions() const;  // sorted unique
};

enum class PartitionMode { kRandom, kPerSpeaker };
enum class FoldStrategy { kLoso, kKFold };

const char* to_string(PartitionMode m);
const char* to_string(FoldStrategy s);
PartitionMode partition_mode_from_string(const std::string& s);
FoldStrategy fold_strategy_from_string(const std::string& s);

struct PartitionConfig {
  PartitionMode mode = PartitionMode::kRandom;
  double sigma = 25.0;  // device-size dispersion, percent coefficient of variation
  double labeled_fraction = 0.1;
  FoldStrategy fold_strategy = FoldStrategy::kKFold;
  int k_folds = 5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Fold {
  std::string name;
  std::vector<int> train_ids;
  std::vector<int> test_ids;
};

/// LOSO: one fold per distinct session, that session held out. k-fold:
/// seeded stratified assignment, per-class counts within +-1 across folds.
std::vector<Fold> make_folds(const Dataset& ds, const PartitionConfig& cfg);

struct LabeledSplit {
  std::vector<int> labeled;
  std::vector<int> unlabeled;
  std::vector<int> per_class_labeled;
  std::vector<int> empty_classes;  // classes left without labels after rounding
};

/// Per-class round(L * count) labeled samples, adjusted by +-1 toward the
/// most under/over-allocated classes until the global total is round(L * N).
LabeledSplit split_labeled(const std::vector<int>& train_ids, const Dataset& ds,
                           double labeled_fraction, std::uint64_t seed);

struct DeviceShardIds {
  std::vector<int> labeled;
  std::vector<int> unlabeled;
  int size() const { return static_cast<int>(labeled.size() + unlabeled.size()); }
};

struct PartitionPlan {
  int fold_index = 0;
  std::string fold_name;
  std::vector<DeviceShardIds> devices;
  std::vector<int> test_ids;
  // provenance
  PartitionMode mode = PartitionMode::kRandom;
  double sigma = 0.0;
  double labeled_fraction = 0.0;
  std::uint64_t seed = 0;

  int num_devices() const { return static_cast<int>(devices.size()); }
  /// Shards pairwise disjoint; shards + test cover exactly `total` ids.
  void validate(int total_samples) const;
};

/// Distributes a fold's training ids over `num_devices` shards and applies
/// the labeled split within each shard. Random mode draws device sizes
/// around N/K with coefficient of variation sigma; per-speaker mode gives
/// each device the full data of one or more disjoint speakers.
PartitionPlan assign_devices(const std::vector<int>& train_ids, const std::vector<int>& test_ids,
                             const Dataset& ds, const PartitionConfig& cfg, int num_devices);

void save_plan(const PartitionPlan& plan, const std::string& path);
PartitionPlan load_plan(const std::string& path);

struct SynthSpec {
  int num_classes = 4;
  int samples_per_class = 100;
  int num_speakers = 8;
  int frames = 198;
  int mel_bins = 64;
  int max_segments = 1;     // segments per utterance drawn uniformly in [1, max]
  double noise_level = 0.4;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Deterministic synthetic stand-in for a recorded emotion corpus. Each
/// class is a spectro-temporal prototype (band position, ripple rate,
/// temporal envelope); each speaker applies a fixed affine distortion (gain,
/// band shift) so per-speaker shards are genuinely non-i.i.d.
Dataset synth_dataset(const SynthSpec& spec);

struct LoadReport {
  int loaded = 0;
  std::vector<std::string> skipped;  // "row N: reason"
  bool ok() const { return skipped.empty(); }
};

/// Reads a CSV manifest (path,speaker_id,label[,session]) of WAV files or
/// feature records. With `class_names` given, labels outside it are
/// rejected; otherwise the vocabulary is the sorted set of seen labels.
/// Strict mode throws on the first bad row; permissive mode skips and
/// reports.
Dataset load_manifest(const std::string& path, const FeatureConfig& fcfg, LoadReport& report,
                      bool permissive = false, const std::vector<std::string>& class_names = {});

}  // namespace fedser
