#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedser/model.hpp"
#include "fedser/params.hpp"
#include "fedser/rng.hpp"
#include "fedser/tensor.hpp"

namespace fedser {

enum class SchedulerMode { kCorrected, kPaperLiteral };

inline const char* to_string(SchedulerMode m) {
  return m == SchedulerMode::kCorrected ? "corrected" : "paper_literal";
}

inline SchedulerMode scheduler_mode_from_string(const std::string& s) {
  if (s == "corrected") return SchedulerMode::kCorrected;
  if (s == "paper_literal") return SchedulerMode::kPaperLiteral;
  throw std::invalid_argument("unknown scheduler mode: " + s);
}

struct SelfTrainConfig {
  double beta = 1.0;         // weight of the unlabeled loss
  double temperature = 2.0;  // pseudo-label softening
  double tau_min = 0.5;
  double tau_max = 0.9;
  double delta = 0.5;        // participation influence on the threshold
  SchedulerMode scheduler_mode = SchedulerMode::kCorrected;
  int batch_size = 8;
  double learning_rate = 0.001;

  void validate() const {
    if (beta < 0) throw std::invalid_argument("SelfTrainConfig: beta must be >= 0");
    if (temperature <= 0) throw std::invalid_argument("SelfTrainConfig: temperature must be > 0");
    if (!(0 <= tau_min && tau_min <= tau_max && tau_max <= 1))
      throw std::invalid_argument("SelfTrainConfig: require 0 <= tau_min <= tau_max <= 1");
    if (delta < 0 || delta > 1) throw std::invalid_argument("SelfTrainConfig: delta must be in [0,1]");
    if (batch_size < 1) throw std::invalid_argument("SelfTrainConfig: batch_size must be >= 1");
    if (learning_rate <= 0) throw std::invalid_argument("SelfTrainConfig: learning_rate must be > 0");
  }
};

struct PseudoLabel {
  int class_index = 0;
  double confidence = 0.0;  // max temperature-softened softmax probability
  int sample_id = -1;
};

/// Class with the highest temperature-softened probability; ties break
/// toward the lowest class index.
template <typename T>
PseudoLabel pseudo_label(const T* logits, int num_classes, double temperature, int sample_id = -1) {
  for (int i = 0; i < num_classes; ++i)
    if (!std::isfinite(static_cast<double>(logits[i])))
      throw std::invalid_argument("pseudo_label: non-finite logits");
  const std::vector<T> p = softmax_temperature(logits, num_classes, temperature);
  PseudoLabel out;
  out.class_index = argmax_lowest(p.data(), num_classes);
  out.confidence = static_cast<double>(p[static_cast<std::size_t>(out.class_index)]);
  out.sample_id = sample_id;
  return out;
}

template <typename T>
PseudoLabel pseudo_label(const std::vector<T>& logits, double temperature, int sample_id = -1) {
  return pseudo_label(logits.data(), static_cast<int>(logits.size()), temperature, sample_id);
}

/// Device-specific confidence threshold as a function of global progress C,
/// device progress C_s and the total round budget R.
///
/// corrected:     tau = tau_min + (tau_max-tau_min)/2 * (1 - cos(pi*x/R))
/// paper_literal: tau = (tau_max-tau_min)/2 * (1 + cos(pi*x/R))
/// with x = clamp(C - delta*(C - C_s), 0, R). The corrected mode rises from
/// tau_min to tau_max; the literal mode decays from tau_max-tau_min to 0.
inline double confidence_threshold(int total_rounds, int completed_rounds, int device_rounds,
                                   const SelfTrainConfig& cfg) {
  if (total_rounds <= 0) throw std::invalid_argument("confidence_threshold: R must be > 0");
  if (!(0 <= device_rounds && device_rounds <= completed_rounds && completed_rounds <= total_rounds))
    throw std::invalid_argument("confidence_threshold: require 0 <= C_s <= C <= R");
  cfg.validate();

  const double x = std::clamp(
      completed_rounds - cfg.delta * (completed_rounds - device_rounds), 0.0,
      static_cast<double>(total_rounds));
  const double phase = std::cos(M_PI * x / total_rounds);
  if (cfg.scheduler_mode == SchedulerMode::kCorrected)
    return cfg.tau_min + 0.5 * (cfg.tau_max - cfg.tau_min) * (1.0 - phase);
  return 0.5 * (cfg.tau_max - cfg.tau_min) * (1.0 + phase);
}

struct CombinedLoss {
  double total = 0.0;
  double supervised = 0.0;
  double unsupervised = 0.0;  // masked mean; 0 when nothing is retained
};

/// L = L_s + beta * L_u over probability rows; L_u is the masked mean
/// cross-entropy against pseudo-labels so beta's meaning is independent of
/// the retained count.
template <typename T>
CombinedLoss combined_loss(const Tensor<T>& sup_probs, const std::vector<int>& labels,
                           const Tensor<T>& unsup_probs, const std::vector<int>& pseudo_labels,
                           const std::vector<bool>& mask, double beta) {
  constexpr double kTiny = 1e-12;
  CombinedLoss out;
  const int nl = sup_probs.numel() > 0 ? sup_probs.dim(0) : 0;
  if (nl != static_cast<int>(labels.size()))
    throw std::invalid_argument("combined_loss: labels do not match supervised rows");
  for (int i = 0; i < nl; ++i)
    out.supervised -= std::log(std::max(kTiny, static_cast<double>(sup_probs(i, labels[static_cast<std::size_t>(i)]))));
  if (nl > 0) out.supervised /= nl;

  const int nu = unsup_probs.numel() > 0 ? unsup_probs.dim(0) : 0;
  if (nu != static_cast<int>(pseudo_labels.size()) || nu != static_cast<int>(mask.size()))
    throw std::invalid_argument("combined_loss: pseudo-labels/mask do not match unsupervised rows");
  int retained = 0;
  for (int i = 0; i < nu; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    ++retained;
    out.unsupervised -=
        std::log(std::max(kTiny, static_cast<double>(unsup_probs(i, pseudo_labels[static_cast<std::size_t>(i)]))));
  }
  if (retained > 0) out.unsupervised /= retained;
  out.total = out.supervised + beta * out.unsupervised;
  return out;
}

/// Stacks equally shaped [T x F] segments into a batch [N x T x F].
template <typename T>
Tensor<T> stack_batch(const std::vector<const Tensor<T>*>& items) {
  if (items.empty()) throw std::invalid_argument("stack_batch: empty batch");
  const int t = items[0]->dim(0), f = items[0]->dim(1);
  Tensor<T> out({static_cast<int>(items.size()), t, f});
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->rank() != 2 || items[i]->dim(0) != t || items[i]->dim(1) != f)
      throw std::invalid_argument("stack_batch: inconsistent segment shapes");
    std::copy(items[i]->data(), items[i]->data() + items[i]->numel(),
              out.data() + static_cast<std::int64_t>(i) * t * f);
  }
  return out;
}

template <typename T>
struct DeviceShard {
  std::vector<Tensor<T>> labeled;
  std::vector<int> labels;  // parallel to labeled
  std::vector<Tensor<T>> unlabeled;
};

struct DeviceUpdateStats {
  int steps = 0;
  double retained_fraction = 0.0;  // of unlabeled samples seen, mean over steps
  double mean_confidence = 0.0;    // mean pseudo-label confidence
  double loss_sup = 0.0;           // mean over steps
  double loss_unsup = 0.0;
  bool skipped = false;
};

template <typename T>
struct DeviceUpdateResult {
  ParamSet<T> params;
  DeviceUpdateStats stats;
};

template <typename T>
struct StepGradient {
  ParamSet<T> grads;
  CombinedLoss loss;
  int retained = 0;
  double confidence_sum = 0.0;
};

/// One combined supervised + pseudo-labeled gradient for fixed pseudo-labels
/// and mask. Labeled and unlabeled rows share a single train-mode forward;
/// masked-out rows receive zero upstream gradient. The unlabeled batch may be
/// empty.
template <typename T>
StepGradient<T> selftrain_gradient(const ArchConfig& arch, const ParamSet<T>& params,
                                   const Tensor<T>& labeled_batch, const std::vector<int>& labels,
                                   const Tensor<T>& unlabeled_batch,
                                   const std::vector<int>& pseudo_labels,
                                   const std::vector<bool>& mask, double beta,
                                   std::uint64_t dropout_seed) {
  const int nl = labeled_batch.numel() > 0 ? labeled_batch.dim(0) : 0;
  const int nu = unlabeled_batch.numel() > 0 ? unlabeled_batch.dim(0) : 0;
  if (nl + nu == 0) throw std::invalid_argument("selftrain_gradient: empty step");
  const int num_classes = params.num_classes();

  Tensor<T> batch;
  if (nl > 0 && nu > 0) {
    batch = Tensor<T>({nl + nu, labeled_batch.dim(1), labeled_batch.dim(2)});
    std::copy(labeled_batch.data(), labeled_batch.data() + labeled_batch.numel(), batch.data());
    std::copy(unlabeled_batch.data(), unlabeled_batch.data() + unlabeled_batch.numel(),
              batch.data() + labeled_batch.numel());
  } else {
    batch = nl > 0 ? labeled_batch : unlabeled_batch;
  }

  ForwardResult<T> fwd = forward(arch, params, batch, Mode::kTrain, dropout_seed);

  int retained = 0;
  for (int i = 0; i < nu; ++i)
    if (mask[static_cast<std::size_t>(i)]) ++retained;

  Tensor<T> probs({nl + nu, num_classes});
  for (int i = 0; i < nl + nu; ++i) {
    const std::vector<T> p = softmax_temperature(&fwd.logits(i, 0), num_classes, 1.0);
    std::copy(p.begin(), p.end(), &probs(i, 0));
  }

  Tensor<T> dlogits({nl + nu, num_classes});
  for (int i = 0; i < nl; ++i) {
    const T scale = static_cast<T>(1.0 / nl);
    for (int c = 0; c < num_classes; ++c)
      dlogits(i, c) = (probs(i, c) - (c == labels[static_cast<std::size_t>(i)] ? T{1} : T{})) * scale;
  }
  for (int i = 0; i < nu; ++i) {
    const int row = nl + i;
    if (!mask[static_cast<std::size_t>(i)] || beta == 0 || retained == 0) {
      for (int c = 0; c < num_classes; ++c) dlogits(row, c) = T{};
      continue;
    }
    const T scale = static_cast<T>(beta / retained);
    for (int c = 0; c < num_classes; ++c)
      dlogits(row, c) =
          (probs(row, c) - (c == pseudo_labels[static_cast<std::size_t>(i)] ? T{1} : T{})) * scale;
  }

  StepGradient<T> out;
  out.grads = backward(arch, params, fwd.cache, dlogits);
  out.retained = retained;

  Tensor<T> sup_probs;
  Tensor<T> unsup_probs;
  if (nl > 0) {
    sup_probs = Tensor<T>({nl, num_classes});
    std::copy(probs.data(), probs.data() + static_cast<std::int64_t>(nl) * num_classes, sup_probs.data());
  }
  if (nu > 0) {
    unsup_probs = Tensor<T>({nu, num_classes});
    std::copy(probs.data() + static_cast<std::int64_t>(nl) * num_classes,
              probs.data() + static_cast<std::int64_t>(nl + nu) * num_classes, unsup_probs.data());
  }
  out.loss = combined_loss(sup_probs, labels, unsup_probs, pseudo_labels, mask, beta);
  return out;
}

/// Local update of Algorithm-style federated self-training: E epochs over
/// equally sized labeled/unlabeled batch pairs, pseudo-labels recomputed
/// from the current local model each batch (eval-mode forward), confidence
/// filtering against tau, one Adam step per batch pair.
template <typename T>
DeviceUpdateResult<T> device_update(const ArchConfig& arch, ParamSet<T> params,
                                    const DeviceShard<T>& shard, double tau,
                                    const SelfTrainConfig& cfg, int epochs, std::uint64_t seed) {
  cfg.validate();
  if (epochs < 1) throw std::invalid_argument("device_update: epochs must be >= 1");
  if (shard.labeled.size() != shard.labels.size())
    throw std::invalid_argument("device_update: labels do not match labeled shard");

  const int nl = static_cast<int>(shard.labeled.size());
  const bool use_unlabeled = cfg.beta > 0 && !shard.unlabeled.empty();
  const int nu = use_unlabeled ? static_cast<int>(shard.unlabeled.size()) : 0;
  const int num_classes = params.num_classes();

  DeviceUpdateResult<T> out;
  out.params = std::move(params);

  if (nl == 0) {
    // A device without labels can still learn from confident pseudo-labels.
    bool any_clears = false;
    if (use_unlabeled) {
      std::vector<const Tensor<T>*> ptrs;
      for (const auto& t : shard.unlabeled) ptrs.push_back(&t);
      ForwardResult<T> fwd = forward(arch, out.params, stack_batch(ptrs), Mode::kEval);
      for (int i = 0; i < nu && !any_clears; ++i) {
        const PseudoLabel pl = pseudo_label(&fwd.logits(i, 0), num_classes, cfg.temperature, i);
        any_clears = pl.confidence >= tau;
      }
    }
    if (!any_clears) {
      out.stats.skipped = true;
      return out;
    }
  }

  OptimizerState<T> opt = OptimizerState<T>::make(out.params, cfg.learning_rate);

  const int driver = std::max(nl, nu);
  const int steps_per_epoch = (driver + cfg.batch_size - 1) / cfg.batch_size;

  double retained_acc = 0.0, conf_acc = 0.0, sup_acc = 0.0, unsup_acc = 0.0;
  long long unlabeled_seen = 0, retained_total = 0;
  int unsup_steps = 0;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::vector<int> order_l(static_cast<std::size_t>(nl));
    std::iota(order_l.begin(), order_l.end(), 0);
    std::vector<int> order_u(static_cast<std::size_t>(nu));
    std::iota(order_u.begin(), order_u.end(), 0);
    {
      auto rng_l = make_rng(derive_seed(seed, static_cast<std::uint64_t>(epoch), 0));
      std::shuffle(order_l.begin(), order_l.end(), rng_l);
      auto rng_u = make_rng(derive_seed(seed, static_cast<std::uint64_t>(epoch), 1));
      std::shuffle(order_u.begin(), order_u.end(), rng_u);
    }

    for (int step = 0; step < steps_per_epoch; ++step) {
      Tensor<T> l_batch;
      std::vector<int> labels;
      if (nl > 0) {
        std::vector<const Tensor<T>*> ptrs;
        for (int i = 0; i < cfg.batch_size; ++i) {
          const int idx = order_l[static_cast<std::size_t>((step * cfg.batch_size + i) % nl)];
          ptrs.push_back(&shard.labeled[static_cast<std::size_t>(idx)]);
          labels.push_back(shard.labels[static_cast<std::size_t>(idx)]);
        }
        l_batch = stack_batch(ptrs);
      }

      Tensor<T> u_batch;
      std::vector<int> pseudo;
      std::vector<bool> mask;
      if (nu > 0) {
        std::vector<const Tensor<T>*> ptrs;
        for (int i = 0; i < cfg.batch_size; ++i) {
          const int idx = order_u[static_cast<std::size_t>((step * cfg.batch_size + i) % nu)];
          ptrs.push_back(&shard.unlabeled[static_cast<std::size_t>(idx)]);
        }
        u_batch = stack_batch(ptrs);

        // Pseudo-labels come from the current local model, eval mode.
        ForwardResult<T> fwd = forward(arch, out.params, u_batch, Mode::kEval);
        for (int i = 0; i < cfg.batch_size; ++i) {
          const PseudoLabel pl = pseudo_label(&fwd.logits(i, 0), num_classes, cfg.temperature, i);
          pseudo.push_back(pl.class_index);
          mask.push_back(pl.confidence >= tau);
          conf_acc += pl.confidence;
          retained_total += mask.back() ? 1 : 0;
        }
        unlabeled_seen += cfg.batch_size;
        ++unsup_steps;
      }

      StepGradient<T> grad = selftrain_gradient(
          arch, out.params, l_batch, labels, u_batch, pseudo, mask, cfg.beta,
          derive_seed(seed, static_cast<std::uint64_t>(epoch), 2, static_cast<std::uint64_t>(step)));
      adam_step(out.params, grad.grads, opt);

      sup_acc += grad.loss.supervised;
      unsup_acc += grad.loss.unsupervised;
      retained_acc += nu > 0 ? static_cast<double>(grad.retained) / cfg.batch_size : 0.0;
      ++out.stats.steps;
    }
  }

  if (out.stats.steps > 0) {
    out.stats.loss_sup = sup_acc / out.stats.steps;
    out.stats.loss_unsup = unsup_acc / out.stats.steps;
  }
  if (unsup_steps > 0) retained_acc /= unsup_steps;
  out.stats.retained_fraction = unsup_steps > 0 ? retained_acc : 0.0;
  out.stats.mean_confidence = unlabeled_seen > 0 ? conf_acc / static_cast<double>(unlabeled_seen) : 0.0;
  return out;
}

}  // namespace fedser
