#include "fedser/metrics.hpp"

#include <algorithm>
#include <stdexcept>

#include "fedser/selftrain.hpp"

namespace fedser {

long long MetricsReport::total() const {
  long long n = 0;
  for (const auto& row : confusion)
    for (long long v : row) n += v;
  return n;
}

std::vector<float> utterance_predict(const ArchConfig& arch, const ParamSet<float>& params,
                                     const std::vector<FeatureTensor>& segments) {
  if (segments.empty()) throw std::invalid_argument("utterance_predict: no segments");
  std::vector<const FeatureTensor*> ptrs;
  for (const auto& s : segments) ptrs.push_back(&s);
  const ForwardResult<float> fwd = forward(arch, params, stack_batch(ptrs), Mode::kEval);

  const int num_classes = params.num_classes();
  std::vector<float> mean(static_cast<std::size_t>(num_classes), 0.0f);
  for (int s = 0; s < static_cast<int>(segments.size()); ++s) {
    const std::vector<float> p = softmax_temperature(&fwd.logits(s, 0), num_classes, 1.0);
    for (int c = 0; c < num_classes; ++c) mean[static_cast<std::size_t>(c)] += p[static_cast<std::size_t>(c)];
  }
  for (float& v : mean) v /= static_cast<float>(segments.size());
  return mean;
}

MetricsReport report_from_confusion(const std::vector<std::vector<long long>>& confusion) {
  const int num_classes = static_cast<int>(confusion.size());
  MetricsReport r;
  r.confusion = confusion;
  r.per_class_recall.assign(static_cast<std::size_t>(num_classes), 0.0);

  double recall_sum = 0.0;
  int represented = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (static_cast<int>(confusion[static_cast<std::size_t>(c)].size()) != num_classes)
      throw std::invalid_argument("report_from_confusion: matrix must be square");
    long long row = 0;
    for (long long v : confusion[static_cast<std::size_t>(c)]) row += v;
    if (row == 0) {
      r.missing_classes.push_back(c);
      continue;
    }
    const double recall =
        static_cast<double>(confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)]) /
        static_cast<double>(row);
    r.per_class_recall[static_cast<std::size_t>(c)] = recall;
    recall_sum += recall;
    ++represented;
  }
  if (represented == 0) throw std::invalid_argument("report_from_confusion: empty matrix");
  r.unweighted_accuracy = recall_sum / represented;
  r.utterances = r.total();
  return r;
}

MetricsReport evaluate(const ArchConfig& arch, const ParamSet<float>& params, const Dataset& ds,
                       const std::vector<int>& test_ids) {
  if (test_ids.empty()) throw std::invalid_argument("evaluate: empty test set");
  const int num_classes = ds.num_classes;
  if (params.num_classes() != num_classes)
    throw std::invalid_argument("evaluate: model and dataset class counts differ");

  std::vector<std::vector<long long>> confusion(
      static_cast<std::size_t>(num_classes),
      std::vector<long long>(static_cast<std::size_t>(num_classes), 0));
  long long segments = 0, segment_hits = 0;

  for (int id : test_ids) {
    const Sample& s = ds.samples.at(static_cast<std::size_t>(id));
    std::vector<const FeatureTensor*> ptrs;
    for (const auto& seg : s.segments) ptrs.push_back(&seg);
    const ForwardResult<float> fwd = forward(arch, params, stack_batch(ptrs), Mode::kEval);

    std::vector<float> mean(static_cast<std::size_t>(num_classes), 0.0f);
    for (int i = 0; i < static_cast<int>(s.segments.size()); ++i) {
      const std::vector<float> p = softmax_temperature(&fwd.logits(i, 0), num_classes, 1.0);
      for (int c = 0; c < num_classes; ++c) mean[static_cast<std::size_t>(c)] += p[static_cast<std::size_t>(c)];
      ++segments;
      if (argmax_lowest(&fwd.logits(i, 0), num_classes) == s.label) ++segment_hits;
    }
    const int pred = argmax_lowest(mean.data(), num_classes);
    ++confusion[static_cast<std::size_t>(s.label)][static_cast<std::size_t>(pred)];
  }

  MetricsReport r = report_from_confusion(confusion);
  r.segments = segments;
  r.segment_accuracy = segments > 0 ? static_cast<double>(segment_hits) / segments : 0.0;
  return r;
}

}  // namespace fedser
