#include "fedser/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "fedser/rng.hpp"

namespace fedser {

using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

void ExperimentConfig::validate() const {
  if (trials < 1) throw std::invalid_argument("ExperimentConfig: trials must be >= 1");
  if (fold_limit < 0) throw std::invalid_argument("ExperimentConfig: fold_limit must be >= 0");
  if (output_dir.empty()) throw std::invalid_argument("ExperimentConfig: output_dir required");
  federation.validate();
  selftrain.validate();
  partition.validate();
  arch.validate();
  if (manifest.empty()) synth.validate();
}

namespace {

ordered_json to_json(const FederationConfig& c) {
  return {{"devices", c.num_devices},
          {"rounds", c.total_rounds},
          {"participation", c.participation},
          {"local_epochs", c.local_epochs},
          {"eval_every", c.eval_every},
          {"checkpoint_every", c.checkpoint_every},
          {"workers", c.workers}};
}

void from_json(const ordered_json& j, FederationConfig& c) {
  c.num_devices = j.value("devices", c.num_devices);
  c.total_rounds = j.value("rounds", c.total_rounds);
  c.participation = j.value("participation", c.participation);
  c.local_epochs = j.value("local_epochs", c.local_epochs);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.workers = j.value("workers", c.workers);
}

ordered_json to_json(const SelfTrainConfig& c) {
  return {{"beta", c.beta},
          {"temperature", c.temperature},
          {"tau_min", c.tau_min},
          {"tau_max", c.tau_max},
          {"delta", c.delta},
          {"scheduler_mode", to_string(c.scheduler_mode)},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate}};
}

void from_json(const ordered_json& j, SelfTrainConfig& c) {
  c.beta = j.value("beta", c.beta);
  c.temperature = j.value("temperature", c.temperature);
  c.tau_min = j.value("tau_min", c.tau_min);
  c.tau_max = j.value("tau_max", c.tau_max);
  c.delta = j.value("delta", c.delta);
  if (j.contains("scheduler_mode"))
    c.scheduler_mode = scheduler_mode_from_string(j.at("scheduler_mode").get<std::string>());
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
}

ordered_json to_json(const PartitionConfig& c) {
  return {{"mode", to_string(c.mode)},
          {"sigma", c.sigma},
          {"labeled_fraction", c.labeled_fraction},
          {"fold_strategy", to_string(c.fold_strategy)},
          {"k_folds", c.k_folds}};
}

void from_json(const ordered_json& j, PartitionConfig& c) {
  if (j.contains("mode")) c.mode = partition_mode_from_string(j.at("mode").get<std::string>());
  c.sigma = j.value("sigma", c.sigma);
  c.labeled_fraction = j.value("labeled_fraction", c.labeled_fraction);
  if (j.contains("fold_strategy"))
    c.fold_strategy = fold_strategy_from_string(j.at("fold_strategy").get<std::string>());
  c.k_folds = j.value("k_folds", c.k_folds);
}

ordered_json to_json(const ArchConfig& c) {
  return {{"blocks", c.blocks},
          {"channels", c.channels},
          {"temporal_kernel", c.temporal_kernel},
          {"spectral_kernel", c.spectral_kernel},
          {"groupnorm_groups", c.groupnorm_groups},
          {"groupnorm_eps", c.groupnorm_eps},
          {"dropout_rate", c.dropout_rate},
          {"l2_rate", c.l2_rate},
          {"attention_kernel", c.attention_kernel},
          {"channel_hidden_divisor", c.channel_hidden_divisor}};
}

void from_json(const ordered_json& j, ArchConfig& c) {
  c.blocks = j.value("blocks", c.blocks);
  c.channels = j.value("channels", c.channels);
  c.temporal_kernel = j.value("temporal_kernel", c.temporal_kernel);
  c.spectral_kernel = j.value("spectral_kernel", c.spectral_kernel);
  c.groupnorm_groups = j.value("groupnorm_groups", c.groupnorm_groups);
  c.groupnorm_eps = j.value("groupnorm_eps", c.groupnorm_eps);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  c.l2_rate = j.value("l2_rate", c.l2_rate);
  c.attention_kernel = j.value("attention_kernel", c.attention_kernel);
  c.channel_hidden_divisor = j.value("channel_hidden_divisor", c.channel_hidden_divisor);
}

ordered_json to_json(const FeatureConfig& c) {
  return {{"window_ms", c.window_ms},
          {"hop_ms", c.hop_ms},
          {"mel_bins", c.mel_bins},
          {"segment_seconds", c.segment_seconds},
          {"log_offset", c.log_offset},
          {"fmin_hz", c.fmin_hz},
          {"fmax_hz", c.fmax_hz},
          {"normalize", c.normalize}};
}

void from_json(const ordered_json& j, FeatureConfig& c) {
  c.window_ms = j.value("window_ms", c.window_ms);
  c.hop_ms = j.value("hop_ms", c.hop_ms);
  c.mel_bins = j.value("mel_bins", c.mel_bins);
  c.segment_seconds = j.value("segment_seconds", c.segment_seconds);
  c.log_offset = j.value("log_offset", c.log_offset);
  c.fmin_hz = j.value("fmin_hz", c.fmin_hz);
  c.fmax_hz = j.value("fmax_hz", c.fmax_hz);
  c.normalize = j.value("normalize", c.normalize);
}

ordered_json to_json(const SynthSpec& c) {
  return {{"classes", c.num_classes},
          {"samples_per_class", c.samples_per_class},
          {"speakers", c.num_speakers},
          {"frames", c.frames},
          {"mel_bins", c.mel_bins},
          {"max_segments", c.max_segments},
          {"noise_level", c.noise_level},
          {"seed", c.seed}};
}

void from_json(const ordered_json& j, SynthSpec& c) {
  c.num_classes = j.value("classes", c.num_classes);
  c.samples_per_class = j.value("samples_per_class", c.samples_per_class);
  c.num_speakers = j.value("speakers", c.num_speakers);
  c.frames = j.value("frames", c.frames);
  c.mel_bins = j.value("mel_bins", c.mel_bins);
  c.max_segments = j.value("max_segments", c.max_segments);
  c.noise_level = j.value("noise_level", c.noise_level);
  c.seed = j.value("seed", c.seed);
}

ordered_json to_json(const ExperimentConfig& c) {
  ordered_json j{{"seed", c.seed},
                 {"trials", c.trials},
                 {"fold_limit", c.fold_limit},
                 {"output_dir", c.output_dir},
                 {"save_final_params", c.save_final_params},
                 {"federation", to_json(c.federation)},
                 {"selftrain", to_json(c.selftrain)},
                 {"partition", to_json(c.partition)},
                 {"arch", to_json(c.arch)},
                 {"features", to_json(c.features)}};
  if (c.manifest.empty())
    j["synth"] = to_json(c.synth);
  else
    j["manifest"] = c.manifest;
  return j;
}

void from_json(const ordered_json& j, ExperimentConfig& c) {
  c.seed = j.value("seed", c.seed);
  c.trials = j.value("trials", c.trials);
  c.fold_limit = j.value("fold_limit", c.fold_limit);
  c.output_dir = j.value("output_dir", c.output_dir);
  c.save_final_params = j.value("save_final_params", c.save_final_params);
  if (j.contains("federation")) from_json(j.at("federation"), c.federation);
  if (j.contains("selftrain")) from_json(j.at("selftrain"), c.selftrain);
  if (j.contains("partition")) from_json(j.at("partition"), c.partition);
  if (j.contains("arch")) from_json(j.at("arch"), c.arch);
  if (j.contains("features")) from_json(j.at("features"), c.features);
  if (j.contains("manifest")) c.manifest = j.at("manifest").get<std::string>();
  if (j.contains("synth")) from_json(j.at("synth"), c.synth);
}

void write_json_file(const ordered_json& j, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
}

ordered_json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  ordered_json j;
  in >> j;
  return j;
}

}  // namespace

ExperimentConfig load_experiment_config(const std::string& path) {
  ExperimentConfig cfg;
  from_json(read_json_file(path), cfg);
  return cfg;
}

void save_experiment_config(const ExperimentConfig& cfg, const std::string& path) {
  write_json_file(to_json(cfg), path);
}

ExperimentSummary run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();

  Dataset ds;
  if (cfg.manifest.empty()) {
    ds = synth_dataset(cfg.synth);
  } else {
    LoadReport report;
    ds = load_manifest(cfg.manifest, cfg.features, report, /*permissive=*/true);
    if (!report.ok())
      for (const std::string& s : report.skipped)
        std::fputs(("warning: " + s + "\n").c_str(), stderr);
  }

  const std::vector<Fold> folds = make_folds(ds, cfg.partition);
  const int folds_to_run = cfg.fold_limit > 0
                               ? std::min<int>(cfg.fold_limit, static_cast<int>(folds.size()))
                               : static_cast<int>(folds.size());

  fs::create_directories(cfg.output_dir);
  save_experiment_config(cfg, cfg.output_dir + "/config.json");

  ExperimentSummary summary;
  summary.folds_run = folds_to_run;
  summary.trials = cfg.trials;

  for (int f = 0; f < folds_to_run; ++f) {
    for (int t = 0; t < cfg.trials; ++t) {
      const std::string trial_dir =
          cfg.output_dir + "/fold" + std::to_string(f) + "/trial" + std::to_string(t);
      fs::create_directories(trial_dir);

      TrialOutcome outcome;
      outcome.fold = f;
      outcome.fold_name = folds[static_cast<std::size_t>(f)].name;
      outcome.trial = t;
      try {
        PartitionConfig pcfg = cfg.partition;
        pcfg.seed = derive_seed(cfg.seed, 0x706c616e, static_cast<std::uint64_t>(f),
                                static_cast<std::uint64_t>(t));
        const PartitionPlan plan =
            assign_devices(folds[static_cast<std::size_t>(f)].train_ids,
                           folds[static_cast<std::size_t>(f)].test_ids, ds, pcfg,
                           cfg.federation.num_devices);
        save_plan(plan, trial_dir + "/plan.json");

        FederationConfig fedcfg = cfg.federation;
        fedcfg.seed = derive_seed(cfg.seed, 0x666564, static_cast<std::uint64_t>(f),
                                  static_cast<std::uint64_t>(t));
        fedcfg.metrics_path = trial_dir + "/metrics.jsonl";
        if (fedcfg.checkpoint_every > 0) fedcfg.checkpoint_dir = trial_dir + "/checkpoints";

        const FederationResult result = run_federation(cfg.arch, fedcfg, plan, cfg.selftrain, ds);
        if (cfg.save_final_params) save_params(trial_dir + "/final.params", result.params);

        const MetricsReport report =
            evaluate(cfg.arch, result.params, ds, folds[static_cast<std::size_t>(f)].test_ids);
        outcome.ua = report.unweighted_accuracy;
        outcome.segment_accuracy = report.segment_accuracy;
        outcome.per_class_recall = report.per_class_recall;
        outcome.confusion = report.confusion;
        for (const RoundRecord& rec : result.log)
          if (rec.eval_ua) outcome.ua_curve.emplace_back(rec.round, *rec.eval_ua);
      } catch (const std::exception& e) {
        outcome.failed = true;
        outcome.error = e.what();
        summary.complete = false;
      }
      summary.outcomes.push_back(std::move(outcome));
    }
  }

  double sum = 0.0;
  int ok = 0;
  for (const TrialOutcome& o : summary.outcomes)
    if (!o.failed) {
      sum += o.ua;
      ++ok;
    }
  summary.mean_ua = ok > 0 ? sum / ok : 0.0;
  double var = 0.0;
  for (const TrialOutcome& o : summary.outcomes)
    if (!o.failed) var += (o.ua - summary.mean_ua) * (o.ua - summary.mean_ua);
  summary.std_ua = ok > 1 ? std::sqrt(var / (ok - 1)) : 0.0;

  ordered_json j;
  j["config"] = to_json(cfg);
  j["dataset"] = {{"samples", ds.samples.size()},
                  {"classes", ds.num_classes},
                  {"speakers", ds.distinct_speakers().size()}};
  j["folds_run"] = summary.folds_run;
  j["trials"] = summary.trials;
  j["complete"] = summary.complete;
  j["results"] = ordered_json::array();
  for (const TrialOutcome& o : summary.outcomes) {
    ordered_json r{{"fold", o.fold}, {"fold_name", o.fold_name}, {"trial", o.trial}};
    if (o.failed) {
      r["error"] = o.error;
    } else {
      r["ua"] = o.ua;
      r["segment_accuracy"] = o.segment_accuracy;
      r["per_class_recall"] = o.per_class_recall;
      r["confusion"] = o.confusion;
      ordered_json curve = ordered_json::array();
      for (const auto& [round, ua] : o.ua_curve) curve.push_back({{"round", round}, {"ua", ua}});
      r["ua_curve"] = std::move(curve);
    }
    j["results"].push_back(std::move(r));
  }
  j["aggregate"] = {{"mean_ua", summary.mean_ua}, {"std_ua", summary.std_ua}};

  summary.summary_path = cfg.output_dir + "/summary.json";
  write_json_file(j, summary.summary_path);
  return summary;
}

namespace {

double binomial_sign_test(int positive, int negative) {
  // Two-sided exact sign test on the non-tied pairs.
  const int n = positive + negative;
  if (n == 0) return 1.0;
  const int k = std::min(positive, negative);
  // tail = P(X <= k) for X ~ Binomial(n, 1/2)
  double tail = 0.0;
  double coeff = 1.0;  // C(n, 0)
  for (int i = 0; i <= k; ++i) {
    tail += coeff;
    coeff = coeff * (n - i) / (i + 1);
  }
  tail *= std::pow(0.5, n);
  return std::min(1.0, 2.0 * tail);
}

}  // namespace

CompareReport compare_runs(const std::string& baseline_summary,
                           const std::string& candidate_summary) {
  const ordered_json a = read_json_file(baseline_summary);
  const ordered_json b = read_json_file(candidate_summary);

  if (a.at("dataset").at("classes") != b.at("dataset").at("classes"))
    throw std::invalid_argument("compare_runs: class counts differ");
  if (a.at("folds_run") != b.at("folds_run"))
    throw std::invalid_argument("compare_runs: fold structures differ");

  std::map<std::pair<int, int>, double> ua_a;
  std::map<int, std::string> fold_names_a;
  for (const auto& r : a.at("results")) {
    if (r.contains("error")) continue;
    ua_a[{r.at("fold").get<int>(), r.at("trial").get<int>()}] = r.at("ua").get<double>();
    fold_names_a[r.at("fold").get<int>()] = r.at("fold_name").get<std::string>();
  }

  CompareReport report;
  std::map<int, std::pair<double, int>> fold_delta;  // fold -> (delta sum, count)
  double delta_sum = 0.0;
  int pairs = 0;
  for (const auto& r : b.at("results")) {
    if (r.contains("error")) continue;
    const int fold = r.at("fold").get<int>();
    const int trial = r.at("trial").get<int>();
    const auto it = ua_a.find({fold, trial});
    if (it == ua_a.end()) continue;
    if (fold_names_a.at(fold) != r.at("fold_name").get<std::string>())
      throw std::invalid_argument("compare_runs: fold structures differ");
    const double delta = r.at("ua").get<double>() - it->second;
    delta_sum += delta;
    ++pairs;
    auto& fd = fold_delta[fold];
    fd.first += delta;
    ++fd.second;
    if (delta > 0)
      ++report.positive;
    else if (delta < 0)
      ++report.negative;
    else
      ++report.ties;
  }
  if (pairs == 0) throw std::invalid_argument("compare_runs: no comparable trial pairs");

  report.mean_delta = delta_sum / pairs;
  for (const auto& [fold, acc] : fold_delta)
    report.per_fold.emplace_back(fold_names_a.at(fold), acc.first / acc.second);
  report.sign_test_p = binomial_sign_test(report.positive, report.negative);
  return report;
}

void save_compare_report(const CompareReport& report, const std::string& path) {
  ordered_json j;
  j["mean_delta"] = report.mean_delta;
  j["per_fold"] = ordered_json::array();
  for (const auto& [name, delta] : report.per_fold)
    j["per_fold"].push_back({{"fold", name}, {"mean_delta", delta}});
  j["positive"] = report.positive;
  j["negative"] = report.negative;
  j["ties"] = report.ties;
  j["sign_test_p"] = report.sign_test_p;
  write_json_file(j, path);
}

}  // namespace fedser
