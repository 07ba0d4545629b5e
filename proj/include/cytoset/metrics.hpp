#pragma once

#include "cytoset/models.hpp"

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace cyto {

struct SampleMetrics {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  long tp = 0, fp = 0, fn = 0;
  bool has_positives = false;  // samples without positives leave aggregation
};

/// p = tp/(tp+fp), r = tp/(tp+fn), F1 = 2pr/(p+r); tp+fp = 0 gives p = 0.
SampleMetrics sample_metrics(const std::vector<std::uint8_t>& labels,
                             const std::vector<std::uint8_t>& predictions);

struct MetricsReport {
  std::vector<int> sample_indices;        // evaluated samples, dataset order
  std::vector<SampleMetrics> per_sample;  // aligned with sample_indices
  int excluded_no_positive = 0;
  double mean_p = 0, std_p = 0, median_p = 0;
  double mean_r = 0, std_r = 0, median_r = 0;
  double mean_f1 = 0, std_f1 = 0, median_f1 = 0;

  /// Recomputes the aggregate fields from per_sample.
  void aggregate();
  std::string to_table() const;  // human-readable, paper-style columns
  std::string to_json() const;   // machine-readable
};

/// Eval-mode whole-sample evaluation over one split, threshold 0.5.
MetricsReport evaluate(Model& model, const FcmDataset& ds, Split split,
                       const std::vector<std::string>& feature_mask = {},
                       std::unordered_map<int, EdgeList>* graph_cache =
                           nullptr);

/// Re-standardizes `target` with `source`'s canonical markers and train
/// statistics (no retraining); errors if a canonical marker is missing.
FcmDataset with_source_standardization(const FcmDataset& source,
                                       const FcmDataset& target);

/// Evaluates a frozen model on a foreign dataset using the training
/// dataset's standardization statistics.
MetricsReport cross_lab_eval(Model& model, const FcmDataset& train_ds,
                             const FcmDataset& other, Split split,
                             const std::vector<std::string>& feature_mask =
                                 {});

/// Canonical markers ranked by class-mean separation over train events
/// (descending |mean_blast - mean_healthy| / pooled std); first `count`.
std::vector<std::string> most_discriminative_markers(const FcmDataset& ds,
                                                     int count);

/// 2-D PCA of the model's pre-head activations for one sample. Components
/// are in descending eigenvalue order; each component's largest-magnitude
/// loading is made positive.
struct PcaProjection {
  std::vector<float> xy;             // n × 2, row-major
  std::vector<std::uint8_t> labels;  // empty when the sample is unlabeled
};
PcaProjection pca_features_export(Model& model, const FcmDataset& ds,
                                  int sample_idx);

}  // namespace cyto
