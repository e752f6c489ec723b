#include "fedser/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "fedser/audio.hpp"
#include "fedser/rng.hpp"

namespace fedser {

using ordered_json = nlohmann::ordered_json;

void Dataset::validate() const {
  if (num_classes < 1) throw std::invalid_argument("Dataset: num_classes must be >= 1");
  if (samples.empty()) throw std::invalid_argument("Dataset: no samples");
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    if (s.label < 0 || s.label >= num_classes)
      throw std::invalid_argument("Dataset: sample " + std::to_string(i) + " has label " +
                                  std::to_string(s.label) + " outside [0," +
                                  std::to_string(num_classes) + ")");
    if (s.segments.empty())
      throw std::invalid_argument("Dataset: sample " + std::to_string(i) + " has no segments");
    for (const auto& seg : s.segments) {
      if (seg.rank() != 2 || seg.dim(0) != samples[0].segments[0].dim(0) ||
          seg.dim(1) != samples[0].segments[0].dim(1))
        throw std::invalid_argument("Dataset: inconsistent segment shapes at sample " +
                                    std::to_string(i));
      if (!seg.all_finite())
        throw std::invalid_argument("Dataset: non-finite features at sample " + std::to_string(i));
    }
    ++counts[static_cast<std::size_t>(s.label)];
  }
  for (int c = 0; c < num_classes; ++c)
    if (counts[static_cast<std::size_t>(c)] == 0)
      throw std::invalid_argument("Dataset: class " + std::to_string(c) + " has no samples");
}

std::vector<int> Dataset::class_counts() const {
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (const Sample& s : samples) ++counts[static_cast<std::size_t>(s.label)];
  return counts;
}

static std::vector<std::string> sorted_unique(std::vector<std::string> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

std::vector<std::string> Dataset::distinct_speakers() const {
  std::vector<std::string> v;
  for (const Sample& s : samples) v.push_back(s.speaker_id);
  return sorted_unique(std::move(v));
}

std::vector<std::string> Dataset::distinct_sessions() const {
  std::vector<std::string> v;
  for (const Sample& s : samples) v.push_back(s.session_id);
  return sorted_unique(std::move(v));
}

const char* to_string(PartitionMode m) {
  return m == PartitionMode::kRandom ? "random" : "per_speaker";
}
const char* to_string(FoldStrategy s) { return s == FoldStrategy::kLoso ? "loso" : "k_fold"; }

PartitionMode partition_mode_from_string(const std::string& s) {
  if (s == "random") return PartitionMode::kRandom;
  if (s == "per_speaker") return PartitionMode::kPerSpeaker;
  throw std::invalid_argument("unknown partition mode: " + s);
}

FoldStrategy fold_strategy_from_string(const std::string& s) {
  if (s == "loso") return FoldStrategy::kLoso;
  if (s == "k_fold") return FoldStrategy::kKFold;
  throw std::invalid_argument("unknown fold strategy: " + s);
}

void PartitionConfig::validate() const {
  if (sigma < 0) throw std::invalid_argument("PartitionConfig: sigma must be >= 0");
  if (!(labeled_fraction > 0 && labeled_fraction <= 1))
    throw std::invalid_argument("PartitionConfig: labeled_fraction must be in (0,1]");
  if (fold_strategy == FoldStrategy::kKFold && k_folds < 2)
    throw std::invalid_argument("PartitionConfig: k_folds must be >= 2");
}

std::vector<Fold> make_folds(const Dataset& ds, const PartitionConfig& cfg) {
  ds.validate();
  cfg.validate();

  std::vector<Fold> folds;
  if (cfg.fold_strategy == FoldStrategy::kLoso) {
    const std::vector<std::string> sessions = ds.distinct_sessions();
    if (sessions.size() < 2)
      throw std::invalid_argument("make_folds: LOSO needs at least two sessions");
    for (const std::string& held_out : sessions) {
      Fold f;
      f.name = "loso:" + held_out;
      for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        if (ds.samples[i].session_id == held_out)
          f.test_ids.push_back(static_cast<int>(i));
        else
          f.train_ids.push_back(static_cast<int>(i));
      }
      folds.push_back(std::move(f));
    }
    return folds;
  }

  // Stratified k-fold: shuffle each class independently, then deal its
  // samples round-robin so per-class fold counts differ by at most one.
  const int k = cfg.k_folds;
  std::vector<std::vector<int>> fold_members(static_cast<std::size_t>(k));
  for (int c = 0; c < ds.num_classes; ++c) {
    std::vector<int> ids;
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
      if (ds.samples[i].label == c) ids.push_back(static_cast<int>(i));
    auto rng = make_rng(derive_seed(cfg.seed, 0x6f6c64, static_cast<std::uint64_t>(c)));
    std::shuffle(ids.begin(), ids.end(), rng);
    for (std::size_t j = 0; j < ids.size(); ++j)
      fold_members[j % static_cast<std::size_t>(k)].push_back(ids[j]);
  }
  for (int f = 0; f < k; ++f) {
    Fold fold;
    fold.name = "fold" + std::to_string(f);
    fold.test_ids = fold_members[static_cast<std::size_t>(f)];
    std::sort(fold.test_ids.begin(), fold.test_ids.end());
    for (int g = 0; g < k; ++g) {
      if (g == f) continue;
      fold.train_ids.insert(fold.train_ids.end(), fold_members[static_cast<std::size_t>(g)].begin(),
                            fold_members[static_cast<std::size_t>(g)].end());
    }
    std::sort(fold.train_ids.begin(), fold.train_ids.end());
    folds.push_back(std::move(fold));
  }
  return folds;
}

LabeledSplit split_labeled(const std::vector<int>& train_ids, const Dataset& ds,
                           double labeled_fraction, std::uint64_t seed) {
  if (!(labeled_fraction > 0 && labeled_fraction <= 1))
    throw std::invalid_argument("split_labeled: labeled_fraction must be in (0,1]");

  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(ds.num_classes));
  for (int id : train_ids) {
    const int label = ds.samples[static_cast<std::size_t>(id)].label;
    by_class[static_cast<std::size_t>(label)].push_back(id);
  }

  const long long total = static_cast<long long>(train_ids.size());
  const long long global_target = std::llround(labeled_fraction * static_cast<double>(total));

  std::vector<long long> targets(static_cast<std::size_t>(ds.num_classes), 0);
  long long assigned = 0;
  for (int c = 0; c < ds.num_classes; ++c) {
    const auto n = static_cast<long long>(by_class[static_cast<std::size_t>(c)].size());
    targets[static_cast<std::size_t>(c)] = std::llround(labeled_fraction * static_cast<double>(n));
    assigned += targets[static_cast<std::size_t>(c)];
  }
  // Nudge the most under/over-allocated classes until the global total is hit.
  while (assigned != global_target) {
    const int dir = assigned < global_target ? 1 : -1;
    int best = -1;
    double best_gap = -1e300;
    for (int c = 0; c < ds.num_classes; ++c) {
      const auto n = static_cast<long long>(by_class[static_cast<std::size_t>(c)].size());
      const long long t = targets[static_cast<std::size_t>(c)];
      if (dir > 0 && t >= n) continue;
      if (dir < 0 && t <= 0) continue;
      const double gap = dir * (labeled_fraction * static_cast<double>(n) - static_cast<double>(t));
      if (gap > best_gap) {
        best_gap = gap;
        best = c;
      }
    }
    if (best < 0) break;  // every class saturated; keep the achievable total
    targets[static_cast<std::size_t>(best)] += dir;
    assigned += dir;
  }

  LabeledSplit out;
  out.per_class_labeled.resize(static_cast<std::size_t>(ds.num_classes), 0);
  for (int c = 0; c < ds.num_classes; ++c) {
    auto& ids = by_class[static_cast<std::size_t>(c)];
    auto rng = make_rng(derive_seed(seed, 0x6c6162, static_cast<std::uint64_t>(c)));
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto t = static_cast<std::size_t>(targets[static_cast<std::size_t>(c)]);
    for (std::size_t i = 0; i < ids.size(); ++i)
      (i < t ? out.labeled : out.unlabeled).push_back(ids[i]);
    out.per_class_labeled[static_cast<std::size_t>(c)] = static_cast<int>(t);
    if (!ids.empty() && t == 0) out.empty_classes.push_back(c);
  }
  std::sort(out.labeled.begin(), out.labeled.end());
  std::sort(out.unlabeled.begin(), out.unlabeled.end());
  return out;
}

void PartitionPlan::validate(int total_samples) const {
  std::vector<char> seen(static_cast<std::size_t>(total_samples), 0);
  auto mark = [&](const std::vector<int>& ids, const char* what) {
    for (int id : ids) {
      if (id < 0 || id >= total_samples)
        throw std::invalid_argument(std::string("PartitionPlan: ") + what + " id out of range");
      if (seen[static_cast<std::size_t>(id)]++)
        throw std::invalid_argument(std::string("PartitionPlan: sample ") + std::to_string(id) +
                                    " assigned twice");
    }
  };
  for (const DeviceShardIds& d : devices) {
    mark(d.labeled, "labeled");
    mark(d.unlabeled, "unlabeled");
  }
  mark(test_ids, "test");
  for (int i = 0; i < total_samples; ++i)
    if (!seen[static_cast<std::size_t>(i)])
      throw std::invalid_argument("PartitionPlan: sample " + std::to_string(i) + " unassigned");
}

/// Device sizes around N/K with the requested coefficient of variation:
/// positive normal weights, renormalized to sum to N, remainders dealt to
/// the largest fractional parts.
static std::vector<int> draw_device_sizes(int total, int num_devices, double sigma_pct,
                                          std::uint64_t seed) {
  std::vector<double> weights(static_cast<std::size_t>(num_devices), 1.0);
  if (sigma_pct > 0) {
    auto rng = make_rng(derive_seed(seed, 0x737a));
    std::normal_distribution<double> dist(1.0, sigma_pct / 100.0);
    for (double& w : weights) w = std::max(0.05, dist(rng));
  }
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);

  std::vector<int> sizes(static_cast<std::size_t>(num_devices), 0);
  std::vector<std::pair<double, int>> fracs;
  int given = 0;
  for (int k = 0; k < num_devices; ++k) {
    const double exact = total * weights[static_cast<std::size_t>(k)] / wsum;
    sizes[static_cast<std::size_t>(k)] = static_cast<int>(std::floor(exact));
    given += sizes[static_cast<std::size_t>(k)];
    fracs.emplace_back(-(exact - std::floor(exact)), k);
  }
  std::sort(fracs.begin(), fracs.end());
  for (int i = 0; i < total - given; ++i)
    ++sizes[static_cast<std::size_t>(fracs[static_cast<std::size_t>(i) % fracs.size()].second)];
  return sizes;
}

PartitionPlan assign_devices(const std::vector<int>& train_ids, const std::vector<int>& test_ids,
                             const Dataset& ds, const PartitionConfig& cfg, int num_devices) {
  cfg.validate();
  if (num_devices < 1) throw std::invalid_argument("assign_devices: need at least one device");
  if (train_ids.empty()) throw std::invalid_argument("assign_devices: empty training set");

  PartitionPlan plan;
  plan.devices.resize(static_cast<std::size_t>(num_devices));
  plan.test_ids = test_ids;
  plan.mode = cfg.mode;
  plan.sigma = cfg.sigma;
  plan.labeled_fraction = cfg.labeled_fraction;
  plan.seed = cfg.seed;

  std::vector<std::vector<int>> shards(static_cast<std::size_t>(num_devices));
  if (cfg.mode == PartitionMode::kRandom) {
    std::vector<int> ids = train_ids;
    auto rng = make_rng(derive_seed(cfg.seed, 0x646576));
    std::shuffle(ids.begin(), ids.end(), rng);
    const std::vector<int> sizes =
        draw_device_sizes(static_cast<int>(ids.size()), num_devices, cfg.sigma, cfg.seed);
    std::size_t pos = 0;
    for (int k = 0; k < num_devices; ++k) {
      for (int i = 0; i < sizes[static_cast<std::size_t>(k)]; ++i)
        shards[static_cast<std::size_t>(k)].push_back(ids[pos++]);
    }
  } else {
    std::vector<std::string> speakers;
    {
      std::vector<std::string> v;
      for (int id : train_ids) v.push_back(ds.samples[static_cast<std::size_t>(id)].speaker_id);
      speakers = sorted_unique(std::move(v));
    }
    if (static_cast<int>(speakers.size()) < num_devices)
      throw std::invalid_argument("assign_devices: per_speaker mode needs at least " +
                                  std::to_string(num_devices) + " speakers, have " +
                                  std::to_string(speakers.size()));
    auto rng = make_rng(derive_seed(cfg.seed, 0x73706b));
    std::shuffle(speakers.begin(), speakers.end(), rng);
    std::map<std::string, int> device_of;
    for (std::size_t i = 0; i < speakers.size(); ++i)
      device_of[speakers[i]] = static_cast<int>(i) % num_devices;
    for (int id : train_ids) {
      const int k = device_of.at(ds.samples[static_cast<std::size_t>(id)].speaker_id);
      shards[static_cast<std::size_t>(k)].push_back(id);
    }
  }

  // The labeled fraction applies within each device so every shard keeps
  // some supervision at its own class ratios.
  for (int k = 0; k < num_devices; ++k) {
    LabeledSplit split = split_labeled(shards[static_cast<std::size_t>(k)], ds,
                                       cfg.labeled_fraction,
                                       derive_seed(cfg.seed, 0x4c, static_cast<std::uint64_t>(k)));
    plan.devices[static_cast<std::size_t>(k)].labeled = std::move(split.labeled);
    plan.devices[static_cast<std::size_t>(k)].unlabeled = std::move(split.unlabeled);
  }
  return plan;
}

void save_plan(const PartitionPlan& plan, const std::string& path) {
  ordered_json j;
  j["fold_index"] = plan.fold_index;
  j["fold_name"] = plan.fold_name;
  j["mode"] = to_string(plan.mode);
  j["sigma"] = plan.sigma;
  j["labeled_fraction"] = plan.labeled_fraction;
  j["seed"] = plan.seed;
  j["test_ids"] = plan.test_ids;
  j["devices"] = ordered_json::array();
  for (const DeviceShardIds& d : plan.devices)
    j["devices"].push_back({{"labeled", d.labeled}, {"unlabeled", d.unlabeled}});

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_plan: cannot open " + path);
  out << j.dump(2) << "\n";
}

PartitionPlan load_plan(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_plan: cannot open " + path);
  ordered_json j;
  in >> j;

  PartitionPlan plan;
  plan.fold_index = j.at("fold_index").get<int>();
  plan.fold_name = j.at("fold_name").get<std::string>();
  plan.mode = partition_mode_from_string(j.at("mode").get<std::string>());
  plan.sigma = j.at("sigma").get<double>();
  plan.labeled_fraction = j.at("labeled_fraction").get<double>();
  plan.seed = j.at("seed").get<std::uint64_t>();
  plan.test_ids = j.at("test_ids").get<std::vector<int>>();
  for (const auto& d : j.at("devices")) {
    DeviceShardIds ids;
    ids.labeled = d.at("labeled").get<std::vector<int>>();
    ids.unlabeled = d.at("unlabeled").get<std::vector<int>>();
    plan.devices.push_back(std::move(ids));
  }
  return plan;
}

void SynthSpec::validate() const {
  if (num_classes < 2) throw std::invalid_argument("SynthSpec: need at least 2 classes");
  if (samples_per_class < 1) throw std::invalid_argument("SynthSpec: samples_per_class must be >= 1");
  if (num_speakers < 1) throw std::invalid_argument("SynthSpec: num_speakers must be >= 1");
  if (frames < 4 || mel_bins < 4) throw std::invalid_argument("SynthSpec: grid too small");
  if (max_segments < 1) throw std::invalid_argument("SynthSpec: max_segments must be >= 1");
  if (noise_level < 0) throw std::invalid_argument("SynthSpec: noise_level must be >= 0");
}

namespace {

struct SpeakerEffect {
  double gain = 1.0;
  double band_shift = 0.0;  // mel bins
  double tilt = 0.0;        // linear spectral tilt
};

SpeakerEffect speaker_effect(const SynthSpec& spec, int speaker) {
  auto rng = make_rng(derive_seed(spec.seed, 0x766f78, static_cast<std::uint64_t>(speaker)));
  std::normal_distribution<double> unit(0.0, 1.0);
  SpeakerEffect e;
  e.gain = 1.0 + 0.2 * unit(rng);
  e.band_shift = 0.12 * spec.mel_bins * unit(rng) / 3.0;
  e.tilt = 0.15 * unit(rng);
  return e;
}

/// Class prototypes pair a spectral band with a temporal texture: classes
/// share bands pairwise, so the band alone cannot separate them and the
/// model must pick up the temporal structure.
struct ClassProto {
  double band_center;  // mel bins
  double band_width;
  double ripple_hz;    // cycles across the full time axis
  int envelope;        // 0 rising, 1 falling, 2 flat, 3 bump
};

ClassProto class_proto(const SynthSpec& spec, int cls) {
  ClassProto p;
  const int band_group = cls % 2;
  p.band_center = (band_group == 0 ? 0.30 : 0.68) * spec.mel_bins;
  p.band_width = 0.10 * spec.mel_bins;
  p.ripple_hz = (cls / 2 % 2 == 0) ? 2.0 : 6.0;
  p.envelope = cls % 4;
  return p;
}

double envelope_value(int kind, double t01) {
  switch (kind) {
    case 0: return 0.35 + 0.65 * t01;
    case 1: return 1.0 - 0.65 * t01;
    case 2: return 0.85;
    default: return 0.30 + 0.70 * std::exp(-12.0 * (t01 - 0.5) * (t01 - 0.5));
  }
}

}  // namespace

Dataset synth_dataset(const SynthSpec& spec) {
  spec.validate();

  Dataset ds;
  ds.num_classes = spec.num_classes;
  for (int c = 0; c < spec.num_classes; ++c) ds.class_names.push_back("class" + std::to_string(c));

  for (int c = 0; c < spec.num_classes; ++c) {
    const ClassProto proto = class_proto(spec, c);
    for (int i = 0; i < spec.samples_per_class; ++i) {
      const int speaker = i % spec.num_speakers;
      const SpeakerEffect eff = speaker_effect(spec, speaker);
      auto rng = make_rng(derive_seed(spec.seed, 0x73616d, static_cast<std::uint64_t>(c),
                                      static_cast<std::uint64_t>(i)));
      std::normal_distribution<double> unit(0.0, 1.0);
      std::uniform_real_distribution<double> uniform(0.0, 1.0);

      Sample s;
      s.speaker_id = "spk" + std::to_string(speaker);
      s.session_id = s.speaker_id;
      s.label = c;

      const int num_segments =
          spec.max_segments == 1
              ? 1
              : 1 + static_cast<int>(uniform(rng) * spec.max_segments) % spec.max_segments;
      for (int seg = 0; seg < num_segments; ++seg) {
        const double phase = 2.0 * M_PI * uniform(rng);
        const double amp = 1.6 * (1.0 + 0.15 * unit(rng)) * eff.gain;
        const double center = proto.band_center + eff.band_shift + 0.6 * unit(rng);

        FeatureTensor t({spec.frames, spec.mel_bins});
        for (int fr = 0; fr < spec.frames; ++fr) {
          const double t01 = spec.frames > 1 ? static_cast<double>(fr) / (spec.frames - 1) : 0.0;
          const double env = envelope_value(proto.envelope, t01);
          const double ripple = 1.0 + 0.8 * std::sin(2.0 * M_PI * proto.ripple_hz * t01 + phase);
          for (int m = 0; m < spec.mel_bins; ++m) {
            const double d = (m - center) / proto.band_width;
            const double band = std::exp(-0.5 * d * d);
            const double floor_level =
                -1.0 + eff.tilt * (static_cast<double>(m) / spec.mel_bins - 0.5);
            const double value = floor_level + amp * env * ripple * band +
                                 spec.noise_level * unit(rng);
            t(fr, m) = static_cast<float>(value);
          }
        }
        s.segments.push_back(std::move(t));
      }
      ds.samples.push_back(std::move(s));
    }
  }
  ds.validate();
  return ds;
}

namespace {

std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    // trim surrounding whitespace
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    cells.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  return cells;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

Dataset load_manifest(const std::string& path, const FeatureConfig& fcfg, LoadReport& report,
                      bool permissive, const std::vector<std::string>& class_names) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_manifest: cannot open " + path);

  const std::string dir = [&] {
    const auto slash = path.find_last_of('/');
    return slash == std::string::npos ? std::string() : path.substr(0, slash + 1);
  }();

  struct Row {
    std::string file, speaker, label, session;
    int line = 0;
  };
  std::vector<Row> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells = split_csv_row(line);
    if (lineno == 1 && !cells.empty() && cells[0] == "path") continue;  // header
    Row r;
    r.line = lineno;
    if (cells.size() < 3 || cells[0].empty() || cells[2].empty()) {
      const std::string why = "row " + std::to_string(lineno) + ": malformed (need path,speaker_id,label)";
      if (!permissive) throw std::runtime_error("load_manifest: " + why);
      report.skipped.push_back(why);
      continue;
    }
    r.file = cells[0];
    r.speaker = cells[1];
    r.label = cells[2];
    r.session = cells.size() > 3 && !cells[3].empty() ? cells[3] : cells[1];
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw std::runtime_error("load_manifest: no samples in " + path);

  std::vector<std::string> vocab = class_names;
  if (vocab.empty()) {
    std::vector<std::string> seen;
    for (const Row& r : rows) seen.push_back(r.label);
    vocab = sorted_unique(std::move(seen));
  }
  std::map<std::string, int> label_index;
  for (std::size_t i = 0; i < vocab.size(); ++i) label_index[vocab[i]] = static_cast<int>(i);

  Dataset ds;
  ds.num_classes = static_cast<int>(vocab.size());
  ds.class_names = vocab;

  for (const Row& r : rows) {
    const auto fail = [&](const std::string& why) {
      const std::string msg = "row " + std::to_string(r.line) + ": " + why;
      if (!permissive) throw std::runtime_error("load_manifest: " + msg);
      report.skipped.push_back(msg);
    };

    const auto label_it = label_index.find(r.label);
    if (label_it == label_index.end()) {
      fail("unknown label '" + r.label + "'");
      continue;
    }

    const std::string file = r.file[0] == '/' ? r.file : dir + r.file;
    Sample s;
    s.speaker_id = r.speaker;
    s.session_id = r.session;
    s.label = label_it->second;
    try {
      FeatureTensor frames;
      int rate = 16000;
      if (ends_with(file, ".wav")) {
        const AudioClip clip = read_wav(file);
        fcfg.validate(clip.sample_rate);
        rate = clip.sample_rate;
        frames = compute_logmel(clip, fcfg);
      } else {
        // Precomputed feature record: rows are frames, segmented here.
        frames = read_feature_record(file);
        if (frames.dim(1) != fcfg.mel_bins)
          throw std::runtime_error("feature record has " + std::to_string(frames.dim(1)) +
                                   " mel bins, config expects " + std::to_string(fcfg.mel_bins));
      }
      if (fcfg.normalize) frames = standardize(frames, compute_moments({frames}));
      s.segments = segment(frames, fcfg, rate);
    } catch (const std::exception& e) {
      fail(e.what());
      continue;
    }
    ds.samples.push_back(std::move(s));
    ++report.loaded;
  }

  if (ds.samples.empty()) throw std::runtime_error("load_manifest: no loadable samples in " + path);
  ds.validate();
  return ds;
}

}  // namespace fedser
