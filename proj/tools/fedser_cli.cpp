// Command-line driver: synthesize datasets, build partition plans, run
// federated experiments, evaluate checkpoints, compare run summaries.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fedser/data.hpp"
#include "fedser/features.hpp"
#include "fedser/federation.hpp"
#include "fedser/harness.hpp"
#include "fedser/metrics.hpp"
#include "fedser/params.hpp"
#include "fedser/selftrain.hpp"

namespace fs = std::filesystem;
using fedser::ExperimentConfig;
using ordered_json = nlohmann::ordered_json;

namespace {

// Shared experiment flags, named after the protocol symbols. Each is
// optional; unset flags leave the config (file or default) untouched.
struct Overrides {
  std::optional<int> devices;
  std::optional<int> rounds;
  std::optional<double> participation;
  std::optional<int> local_epochs;
  std::optional<double> sigma;
  std::optional<double> labeled_fraction;
  std::optional<double> beta;
  std::optional<double> temperature;
  std::optional<double> tau_min;
  std::optional<double> tau_max;
  std::optional<double> delta;
  std::optional<std::string> scheduler_mode;
  std::optional<std::string> partition_mode;
  std::optional<std::string> fold_strategy;
  std::optional<int> trials;
  std::optional<int> fold_limit;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<int> eval_every;
};

void add_override_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--devices", o.devices, "Number of devices K");
  cmd->add_option("--rounds", o.rounds, "Total federation rounds R");
  cmd->add_option("--participation", o.participation, "Participation fraction q in (0,1]");
  cmd->add_option("--local-epochs", o.local_epochs, "Local epochs E per round");
  cmd->add_option("--sigma", o.sigma, "Device-size dispersion (percent CV)");
  cmd->add_option("--labeled-fraction", o.labeled_fraction, "Labeled fraction L in (0,1]");
  cmd->add_option("--beta", o.beta, "Unlabeled loss weight");
  cmd->add_option("--temperature", o.temperature, "Pseudo-label softmax temperature T");
  cmd->add_option("--tau-min", o.tau_min, "Confidence threshold floor");
  cmd->add_option("--tau-max", o.tau_max, "Confidence threshold ceiling");
  cmd->add_option("--delta", o.delta, "Scheduler participation influence");
  cmd->add_option("--scheduler-mode", o.scheduler_mode, "corrected | paper_literal");
  cmd->add_option("--partition-mode", o.partition_mode, "random | per_speaker");
  cmd->add_option("--fold-strategy", o.fold_strategy, "loso | k_fold");
  cmd->add_option("--trials", o.trials, "Trials per fold");
  cmd->add_option("--fold-limit", o.fold_limit, "Run only the first n folds (0 = all)");
  cmd->add_option("--seed", o.seed, "Experiment seed");
  cmd->add_option("--workers", o.workers, "Device-update worker threads");
  cmd->add_option("--eval-every", o.eval_every, "Evaluate on the test fold every n rounds");
}

void apply(const Overrides& o, ExperimentConfig& cfg) {
  if (o.devices) cfg.federation.num_devices = *o.devices;
  if (o.rounds) cfg.federation.total_rounds = *o.rounds;
  if (o.participation) cfg.federation.participation = *o.participation;
  if (o.local_epochs) cfg.federation.local_epochs = *o.local_epochs;
  if (o.sigma) cfg.partition.sigma = *o.sigma;
  if (o.labeled_fraction) cfg.partition.labeled_fraction = *o.labeled_fraction;
  if (o.beta) cfg.selftrain.beta = *o.beta;
  if (o.temperature) cfg.selftrain.temperature = *o.temperature;
  if (o.tau_min) cfg.selftrain.tau_min = *o.tau_min;
  if (o.tau_max) cfg.selftrain.tau_max = *o.tau_max;
  if (o.delta) cfg.selftrain.delta = *o.delta;
  if (o.scheduler_mode) cfg.selftrain.scheduler_mode = fedser::scheduler_mode_from_string(*o.scheduler_mode);
  if (o.partition_mode) cfg.partition.mode = fedser::partition_mode_from_string(*o.partition_mode);
  if (o.fold_strategy) cfg.partition.fold_strategy = fedser::fold_strategy_from_string(*o.fold_strategy);
  if (o.trials) cfg.trials = *o.trials;
  if (o.fold_limit) cfg.fold_limit = *o.fold_limit;
  if (o.seed) cfg.seed = *o.seed;
  if (o.workers) cfg.federation.workers = *o.workers;
  if (o.eval_every) cfg.federation.eval_every = *o.eval_every;
}

fedser::FeatureConfig load_features_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  ordered_json j;
  in >> j;
  fedser::FeatureConfig cfg;
  cfg.window_ms = j.value("window_ms", cfg.window_ms);
  cfg.hop_ms = j.value("hop_ms", cfg.hop_ms);
  cfg.mel_bins = j.value("mel_bins", cfg.mel_bins);
  cfg.segment_seconds = j.value("segment_seconds", cfg.segment_seconds);
  cfg.log_offset = j.value("log_offset", cfg.log_offset);
  cfg.fmin_hz = j.value("fmin_hz", cfg.fmin_hz);
  cfg.fmax_hz = j.value("fmax_hz", cfg.fmax_hz);
  return cfg;
}

int cmd_synth(const fedser::SynthSpec& spec, const std::string& out_dir) {
  const fedser::Dataset ds = fedser::synth_dataset(spec);
  fs::create_directories(out_dir);

  // One feature record per sample; multi-segment samples are stored as a
  // longer frame sequence and re-segmented on load.
  std::ofstream manifest(out_dir + "/manifest.csv");
  manifest << "path,speaker_id,label,session\n";
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const fedser::Sample& s = ds.samples[i];
    const int frames = s.segments[0].dim(0);
    fedser::FeatureTensor all({static_cast<int>(s.segments.size()) * frames, spec.mel_bins});
    for (std::size_t seg = 0; seg < s.segments.size(); ++seg)
      std::copy(s.segments[seg].data(), s.segments[seg].data() + s.segments[seg].numel(),
                all.data() + static_cast<std::int64_t>(seg) * s.segments[seg].numel());
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%05zu.fr", i);
    fedser::write_feature_record(out_dir + "/" + name, all);
    manifest << name << "," << s.speaker_id << "," << ds.class_names[static_cast<std::size_t>(s.label)]
             << "," << s.session_id << "\n";
  }

  // A feature config whose segment length matches the generated frame count,
  // so loading the manifest reproduces the original segments.
  fedser::FeatureConfig fcfg;
  fcfg.mel_bins = spec.mel_bins;
  const int sr = 16000;
  fcfg.segment_seconds =
      (fcfg.window_samples(sr) + (spec.frames - 1) * fcfg.hop_samples(sr)) / static_cast<double>(sr);
  ordered_json fj{{"window_ms", fcfg.window_ms},
                  {"hop_ms", fcfg.hop_ms},
                  {"mel_bins", fcfg.mel_bins},
                  {"segment_seconds", fcfg.segment_seconds},
                  {"log_offset", fcfg.log_offset},
                  {"fmin_hz", fcfg.fmin_hz},
                  {"fmax_hz", fcfg.fmax_hz}};
  std::ofstream(out_dir + "/features.json") << fj.dump(2) << "\n";

  std::cout << "wrote " << ds.samples.size() << " samples (" << ds.num_classes << " classes, "
            << ds.distinct_speakers().size() << " speakers) to " << out_dir << "\n";
  return 0;
}

int cmd_partition(const std::string& manifest, const std::string& features_json,
                  const fedser::PartitionConfig& pcfg, int devices, int fold_index,
                  const std::string& output) {
  fedser::FeatureConfig fcfg;
  if (!features_json.empty()) fcfg = load_features_json(features_json);

  fedser::LoadReport report;
  const fedser::Dataset ds = fedser::load_manifest(manifest, fcfg, report, /*permissive=*/true);
  for (const std::string& s : report.skipped) std::cerr << "warning: " << s << "\n";

  const std::vector<fedser::Fold> folds = fedser::make_folds(ds, pcfg);
  if (fold_index < 0 || fold_index >= static_cast<int>(folds.size()))
    throw std::runtime_error("fold index " + std::to_string(fold_index) + " out of range (have " +
                             std::to_string(folds.size()) + " folds)");
  const fedser::Fold& fold = folds[static_cast<std::size_t>(fold_index)];

  fedser::PartitionPlan plan =
      fedser::assign_devices(fold.train_ids, fold.test_ids, ds, pcfg, devices);
  plan.fold_index = fold_index;
  plan.fold_name = fold.name;
  fedser::save_plan(plan, output);

  std::cout << "plan: " << fold.name << ", " << devices << " devices, "
            << fold.train_ids.size() << " train / " << fold.test_ids.size() << " test\n";
  for (int k = 0; k < plan.num_devices(); ++k)
    std::cout << "  device " << k << ": " << plan.devices[static_cast<std::size_t>(k)].labeled.size()
              << " labeled, " << plan.devices[static_cast<std::size_t>(k)].unlabeled.size()
              << " unlabeled\n";
  return 0;
}

int cmd_run(const std::string& config_path, const Overrides& overrides, const std::string& output,
            const std::string& manifest) {
  ExperimentConfig cfg;
  if (!config_path.empty()) cfg = fedser::load_experiment_config(config_path);
  if (!manifest.empty()) cfg.manifest = manifest;
  apply(overrides, cfg);
  if (!output.empty()) cfg.output_dir = output;

  const fedser::ExperimentSummary summary = fedser::run_experiment(cfg);
  for (const fedser::TrialOutcome& o : summary.outcomes) {
    std::cout << o.fold_name << " trial " << o.trial << ": ";
    if (o.failed)
      std::cout << "FAILED (" << o.error << ")\n";
    else
      std::cout << "UA " << o.ua << "\n";
  }
  std::cout << "mean UA " << summary.mean_ua << " +- " << summary.std_ua << " over "
            << summary.folds_run << " fold(s) x " << summary.trials << " trial(s)\n"
            << "summary: " << summary.summary_path << "\n";
  return summary.complete ? 0 : 1;
}

int cmd_eval(const std::string& params_path, const std::string& config_path,
             const std::string& manifest, const std::string& plan_path,
             const std::string& output) {
  ExperimentConfig cfg;
  if (!config_path.empty()) cfg = fedser::load_experiment_config(config_path);
  if (!manifest.empty()) cfg.manifest = manifest;

  fedser::Dataset ds;
  if (cfg.manifest.empty()) {
    ds = fedser::synth_dataset(cfg.synth);
  } else {
    fedser::LoadReport report;
    ds = fedser::load_manifest(cfg.manifest, cfg.features, report, /*permissive=*/true);
    for (const std::string& s : report.skipped) std::cerr << "warning: " << s << "\n";
  }

  std::vector<int> test_ids;
  if (!plan_path.empty()) {
    test_ids = fedser::load_plan(plan_path).test_ids;
  } else {
    for (std::size_t i = 0; i < ds.samples.size(); ++i) test_ids.push_back(static_cast<int>(i));
  }

  const auto expected = fedser::init_params<float>(cfg.arch, ds.num_classes, 0).fingerprint();
  const fedser::ParamSet<float> params = fedser::load_params(params_path, expected);
  const fedser::MetricsReport report = fedser::evaluate(cfg.arch, params, ds, test_ids);

  ordered_json j;
  j["utterances"] = report.utterances;
  j["unweighted_accuracy"] = report.unweighted_accuracy;
  j["segment_accuracy"] = report.segment_accuracy;
  j["per_class_recall"] = report.per_class_recall;
  j["confusion"] = report.confusion;
  if (!report.missing_classes.empty()) j["missing_classes"] = report.missing_classes;
  if (output.empty())
    std::cout << j.dump(2) << "\n";
  else
    std::ofstream(output) << j.dump(2) << "\n";
  return 0;
}

int cmd_compare(const std::string& baseline, const std::string& candidate,
                const std::string& output) {
  const fedser::CompareReport report = fedser::compare_runs(baseline, candidate);
  std::cout << "mean UA delta (candidate - baseline): " << report.mean_delta << "\n";
  for (const auto& [fold, delta] : report.per_fold)
    std::cout << "  " << fold << ": " << delta << "\n";
  std::cout << report.positive << " trials up, " << report.negative << " down, " << report.ties
            << " tied; sign test p = " << report.sign_test_p << "\n";
  if (!output.empty()) fedser::save_compare_report(report, output);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deterministic simulator of semi-supervised federated learning for speech "
               "emotion recognition"};
  app.require_subcommand(1);

  // synth
  fedser::SynthSpec spec;
  std::string synth_out = "synth_data";
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic feature dataset");
  synth->add_option("--classes", spec.num_classes, "Number of emotion classes");
  synth->add_option("--samples-per-class", spec.samples_per_class, "Samples per class");
  synth->add_option("--speakers", spec.num_speakers, "Number of speakers");
  synth->add_option("--frames", spec.frames, "Frames per segment");
  synth->add_option("--mel-bins", spec.mel_bins, "Mel bins");
  synth->add_option("--max-segments", spec.max_segments, "Max segments per utterance");
  synth->add_option("--noise", spec.noise_level, "Noise level");
  synth->add_option("--seed", spec.seed, "Generator seed");
  synth->add_option("--output", synth_out, "Output directory");

  // partition
  std::string part_manifest, part_features, part_output = "plan.json";
  fedser::PartitionConfig pcfg;
  std::string part_mode = "random", part_strategy = "k_fold";
  int part_devices = 10, part_fold = 0;
  CLI::App* partition = app.add_subcommand("partition", "Build and save a partition plan");
  partition->add_option("--manifest", part_manifest, "Dataset manifest CSV")->required();
  partition->add_option("--features", part_features, "Feature config JSON");
  partition->add_option("--partition-mode", part_mode, "random | per_speaker");
  partition->add_option("--sigma", pcfg.sigma, "Device-size dispersion (percent CV)");
  partition->add_option("--labeled-fraction", pcfg.labeled_fraction, "Labeled fraction L");
  partition->add_option("--fold-strategy", part_strategy, "loso | k_fold");
  partition->add_option("--folds", pcfg.k_folds, "k for k_fold");
  partition->add_option("--fold", part_fold, "Fold index to partition");
  partition->add_option("--devices", part_devices, "Number of devices K");
  partition->add_option("--seed", pcfg.seed, "Partition seed");
  partition->add_option("--output", part_output, "Plan output path");

  // run
  std::string run_config, run_output, run_manifest;
  Overrides run_overrides;
  CLI::App* run = app.add_subcommand("run", "Run a federated experiment");
  run->add_option("--config", run_config, "Experiment config JSON");
  run->add_option("--manifest", run_manifest, "Dataset manifest CSV (default: synthetic)");
  run->add_option("--output", run_output, "Output directory");
  add_override_flags(run, run_overrides);

  // eval
  std::string eval_params, eval_config, eval_manifest, eval_plan, eval_output;
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a saved model on a test set");
  eval->add_option("--params", eval_params, "Saved parameter file")->required();
  eval->add_option("--config", eval_config, "Experiment config JSON (arch + data source)");
  eval->add_option("--manifest", eval_manifest, "Dataset manifest CSV");
  eval->add_option("--plan", eval_plan, "Partition plan; evaluation uses its test ids");
  eval->add_option("--output", eval_output, "Report output path (default: stdout)");

  // compare
  std::string cmp_a, cmp_b, cmp_output;
  CLI::App* compare = app.add_subcommand("compare", "Compare two run summaries");
  compare->add_option("baseline", cmp_a, "Baseline summary.json")->required();
  compare->add_option("candidate", cmp_b, "Candidate summary.json")->required();
  compare->add_option("--output", cmp_output, "Delta report output path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(spec, synth_out);
    if (partition->parsed()) {
      pcfg.mode = fedser::partition_mode_from_string(part_mode);
      pcfg.fold_strategy = fedser::fold_strategy_from_string(part_strategy);
      return cmd_partition(part_manifest, part_features, pcfg, part_devices, part_fold,
                           part_output);
    }
    if (run->parsed()) return cmd_run(run_config, run_overrides, run_output, run_manifest);
    if (eval->parsed())
      return cmd_eval(eval_params, eval_config, eval_manifest, eval_plan, eval_output);
    if (compare->parsed()) return cmd_compare(cmp_a, cmp_b, cmp_output);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
