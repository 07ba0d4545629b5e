#pragma once

#include "cytoset/dataset.hpp"
#include "cytoset/sample.hpp"

#include <cstdint>

namespace cyto {

/// Gaussian-mixture generator: several healthy clusters plus one rare blast
/// cluster placed adjacent to a healthy one. Each sample's component means
/// are jointly translated by a random shift so fixed per-event decision
/// boundaries degrade and in-sample context helps.
struct SynthConfig {
  int n_events = 5000;
  int n_features = 10;
  int n_healthy_clusters = 4;
  double blast_fraction = 0.01;          // in [0.0001, 0.5]
  double population_shift_scale = 1.0;   // per-sample translation magnitude
  // Fraction of the blast offset carried by the leading `primary_features`
  // axes; the rest is spread weakly so masking those axes leaves a faint
  // per-event signal.
  int primary_features = 3;
  // Blast mean offset from its host cluster, in units of the host sigma.
  float blast_offset_lo = 2.5f;
  float blast_offset_hi = 4.0f;
  std::uint64_t seed = 0;

  void validate() const;
};

FcmSample generate_sample(const SynthConfig& config, std::uint64_t sample_seed);

FcmDataset generate_dataset(const SynthConfig& config, int n_samples,
                            std::uint64_t seed);

}  // namespace cyto
