#pragma once

#include <vector>

#include "fedser/data.hpp"
#include "fedser/model.hpp"
#include "fedser/params.hpp"

namespace fedser {

struct MetricsReport {
  std::vector<std::vector<long long>> confusion;  // [true class][predicted class]
  std::vector<double> per_class_recall;           // NaN-free; missing classes excluded from UA
  double unweighted_accuracy = 0.0;               // mean recall over represented classes
  double segment_accuracy = 0.0;                  // per-segment diagnostic
  long long utterances = 0;
  long long segments = 0;
  std::vector<int> missing_classes;  // classes with no test samples

  long long total() const;
};

/// Mean of the per-segment softmax outputs; sums to 1 within float rounding.
std::vector<float> utterance_predict(const ArchConfig& arch, const ParamSet<float>& params,
                                     const std::vector<FeatureTensor>& segments);

/// Recalls and unweighted accuracy from a filled confusion matrix. Classes
/// with empty rows are reported in missing_classes and skipped in the mean.
MetricsReport report_from_confusion(const std::vector<std::vector<long long>>& confusion);

/// Utterance-level evaluation of `params` on the listed samples.
MetricsReport evaluate(const ArchConfig& arch, const ParamSet<float>& params, const Dataset& ds,
                       const std::vector<int>& test_ids);

}  // namespace fedser
