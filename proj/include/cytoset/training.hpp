#pragma once

#include "cytoset/metrics.hpp"
#include "cytoset/models.hpp"

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace cyto {

struct TrainConfig {
  int batch_size = 4;
  int events_per_sample = 50000;
  int epochs = 150;
  double lr = 1e-3;
  double lr_min = 2e-4;
  int cosine_T = 10;
  bool cosine_restart = true;  // false: clamp to lr_min after the first cycle
  double jitter_scale = 0.01;
  double label_smoothing_eps = 0.1;
  std::uint64_t seed = 0;
  std::vector<std::string> feature_mask;
  std::string checkpoint_path;  // best-epoch parameters, empty = temp file
  std::string log_path;         // JSONL epoch log, empty = no file
};

/// lr(t) = lr_min + 0.5 (lr - lr_min)(1 + cos(pi (t mod T)/T)); clamped
/// mode pins lr_min once t reaches T.
double cosine_lr(int t, const TrainConfig& cfg);

/// AdamW with decoupled weight decay; the decay rate comes from each
/// parameter's registration (0.2 for the GAT group, 0 elsewhere).
class AdamW {
 public:
  explicit AdamW(double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8);
  /// One update over all trainable parameters using gradients on `tape`.
  void step(ParamStore& params, Tape& tape, double lr);

 private:
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::unordered_map<const void*, std::pair<std::vector<float>,
                                            std::vector<float>>>
      state_;
};

/// One training view of one sample: subsampled rows, jittered standardized
/// node features, smoothed targets.
struct BatchSample {
  int sample_idx = 0;
  std::vector<int> rows;  // distinct event rows used this epoch
  Tensor x;               // |rows| × F_in
  Tensor targets;         // |rows| × 1, values {eps/2, 1 - eps/2}
};

/// Uniform subsample without replacement to min(n, events_per_sample), then
/// Gaussian jitter on the standardized features.
std::vector<BatchSample> make_batch(const FcmDataset& ds,
                                    const std::vector<int>& sample_indices,
                                    const TrainConfig& cfg,
                                    std::mt19937& rng);

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_mean_f1 = 0;
};

struct TrainReport {
  std::vector<EpochLog> epochs;
  int best_epoch = -1;
  double best_val_f1 = -1.0;
  std::string checkpoint_path;  // best-epoch parameters
};

/// The full recipe: shuffled batches, per-event BCE on smoothed targets,
/// AdamW + cosine schedule, per-epoch validation mean F1, best-checkpoint
/// retention. The model is left holding the best parameters.
TrainReport train(Model& model, const FcmDataset& ds, const TrainConfig& cfg);

}  // namespace cyto
