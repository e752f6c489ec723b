#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fedser/model.hpp"
#include "fedser/params.hpp"
#include "fedser/tensor.hpp"

namespace testutil {

/// Two-block miniature architecture used by gradient checks and small
/// end-to-end runs; minimum input extent 2.
inline fedser::ArchConfig mini_arch() {
  fedser::ArchConfig a;
  a.blocks = 2;
  a.channels = {4, 4};
  a.temporal_kernel = 3;
  a.spectral_kernel = 3;
  a.groupnorm_groups = 2;
  a.dropout_rate = 0.1;
  a.l2_rate = 1e-4;
  a.attention_kernel = 3;
  a.channel_hidden_divisor = 2;
  return a;
}

template <typename T>
fedser::Tensor<T> random_tensor(std::vector<int> dims, std::uint64_t seed, double scale = 1.0) {
  fedser::Tensor<T> t(std::move(dims));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng));
  return t;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
}

/// Central finite differences over every element of every parameter entry,
/// returning the max relative error against the analytic gradient.
inline double fd_check_params(fedser::ParamSet<double>& params,
                              const fedser::ParamSet<double>& analytic,
                              const std::function<double()>& loss, double h = 1e-5) {
  double worst = 0.0;
  for (std::size_t e = 0; e < params.size(); ++e) {
    auto& value = params.entries()[e].value;
    const auto& grad = analytic.entries()[e].value;
    for (std::int64_t i = 0; i < value.numel(); ++i) {
      const double saved = value[i];
      value[i] = saved + h;
      const double up = loss();
      value[i] = saved - h;
      const double down = loss();
      value[i] = saved;
      const double fd = (up - down) / (2 * h);
      worst = std::max(worst, rel_err(fd, grad[i]));
    }
  }
  return worst;
}

/// Cross-entropy of softmax(logits) against integer labels, plus the L2
/// penalty matching the backward pass ((l2/2) * sum of decay weights^2).
inline double ce_l2_objective(const fedser::Tensor<double>& logits, const std::vector<int>& labels,
                              const fedser::ParamSet<double>& params, double l2_rate) {
  double loss = 0.0;
  const int n = logits.dim(0), c = logits.dim(1);
  for (int i = 0; i < n; ++i) {
    const std::vector<double> p = fedser::softmax_temperature(&logits(i, 0), c, 1.0);
    loss -= std::log(std::max(1e-300, p[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])]));
  }
  loss /= n;
  if (l2_rate > 0) {
    double sq = 0.0;
    for (const auto& entry : params.entries()) {
      if (!entry.decay) continue;
      for (std::int64_t i = 0; i < entry.value.numel(); ++i)
        sq += entry.value[i] * entry.value[i];
    }
    loss += 0.5 * l2_rate * sq;
  }
  return loss;
}

}  // namespace testutil
