#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "fedser/tensor.hpp"

namespace fedser {

/// Named collection of dense arrays holding all model weights. The entry
/// order is fixed at construction and is part of the architecture
/// fingerprint; two ParamSets are combinable only if fingerprints match.
template <typename T>
class ParamSet {
public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool decay = false;  // participates in L2 regularization
  };

  ParamSet() = default;
  explicit ParamSet(int num_classes) : num_classes_(num_classes) {}

  void add(std::string name, Tensor<T> value, bool decay) {
    if (index_.count(name)) throw std::invalid_argument("ParamSet: duplicate layer " + name);
    index_[name] = entries_.size();
    entries_.push_back(Entry{std::move(name), std::move(value), decay});
    fingerprint_ = 0;  // recomputed lazily
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamSet: no layer " + name);
    return entries_[it->second].value;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamSet: no layer " + name);
    return entries_[it->second].value;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  int num_classes() const { return num_classes_; }
  void set_num_classes(int c) { num_classes_ = c; }

  std::int64_t total_parameters() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

  bool all_finite() const {
    for (const auto& e : entries_)
      if (!e.value.all_finite()) return false;
    return true;
  }

  /// FNV-1a hash over layer names, shapes and the class count. Captures the
  /// architecture, not the weight values.
  std::uint64_t fingerprint() const {
    if (fingerprint_ == 0) fingerprint_ = compute_fingerprint();
    return fingerprint_;
  }

  /// Same shape, all values zero. Used for gradients and accumulators.
  ParamSet zeros_like() const {
    ParamSet out(num_classes_);
    for (const auto& e : entries_) out.add(e.name, Tensor<T>::zeros_like(e.value), e.decay);
    return out;
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out(num_classes_);
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.decay);
    return out;
  }

private:
  std::uint64_t compute_fingerprint() const {
    std::uint64_t h = 14695981039346656037ULL;
    auto feed = [&h](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xffULL;
        h *= 1099511628211ULL;
      }
    };
    auto feed_str = [&h](const std::string& s) {
      for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
      }
    };
    feed(static_cast<std::uint64_t>(num_classes_));
    for (const auto& e : entries_) {
      feed_str(e.name);
      for (int d : e.value.dims()) feed(static_cast<std::uint64_t>(d));
    }
    if (h == 0) h = 1;
    return h;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  int num_classes_ = 0;
  mutable std::uint64_t fingerprint_ = 0;

  template <typename U>
  friend class ParamSet;
};

/// Adam state. Moment arrays shape-match the ParamSet they were built from.
template <typename T>
struct OptimizerState {
  ParamSet<T> first_moment;
  ParamSet<T> second_moment;
  long long step = 0;
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static OptimizerState make(const ParamSet<T>& params, double learning_rate = 0.001) {
    OptimizerState s;
    s.first_moment = params.zeros_like();
    s.second_moment = params.zeros_like();
    s.learning_rate = learning_rate;
    return s;
  }
};

/// Standard Adam update with bias correction, in place. Throws on non-finite
/// gradients, naming the offending layer.
template <typename T>
void adam_step(ParamSet<T>& params, const ParamSet<T>& grads, OptimizerState<T>& state) {
  if (params.fingerprint() != grads.fingerprint())
    throw std::invalid_argument("adam_step: gradient fingerprint mismatch");
  if (params.size() != state.first_moment.size())
    throw std::invalid_argument("adam_step: optimizer state does not match params");

  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

  for (std::size_t e = 0; e < params.size(); ++e) {
    auto& p = params.entries()[e].value;
    const auto& g = grads.entries()[e].value;
    auto& m = state.first_moment.entries()[e].value;
    auto& v = state.second_moment.entries()[e].value;
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      const double gi = static_cast<double>(g[i]);
      if (!std::isfinite(gi))
        throw std::runtime_error("adam_step: non-finite gradient in layer " +
                                 params.entries()[e].name);
      const double mi = state.beta1 * static_cast<double>(m[i]) + (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * static_cast<double>(v[i]) + (1.0 - state.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double m_hat = mi / bc1;
      const double v_hat = vi / bc2;
      p[i] = static_cast<T>(static_cast<double>(p[i]) -
                            state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon));
    }
  }
}

// Length-prefixed binary ParamSet file: header carries the architecture
// fingerprint and class count; payload is row-major 32-bit little-endian
// floats per layer. Loading with an expected fingerprint refuses mismatches.
void save_params(const std::string& path, const ParamSet<float>& params);
ParamSet<float> load_params(const std::string& path, std::uint64_t expected_fingerprint = 0);

}  // namespace fedser
