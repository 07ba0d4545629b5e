#pragma once

#include "cytoset/sample.hpp"
#include "cytoset/tensor.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace cyto {

enum class Split { train, val, test };
const char* split_name(Split s);
Split split_from_name(const std::string& name);

/// CSV: header of marker names, then numeric rows ('.' decimal). The label
/// column, when named, is removed from the features and binarized.
FcmSample load_csv_sample(std::istream& in,
                          const std::optional<std::string>& label_column);
FcmSample load_csv_file(const std::string& path,
                        const std::optional<std::string>& label_column);
void write_csv_sample(const FcmSample& sample, std::ostream& out,
                      const std::string& label_column = "label");

/// An immutable collection of samples with a canonical marker list, a
/// train/val/test split and train-split standardization statistics.
struct FcmDataset {
  std::vector<FcmSample> samples;
  std::vector<Split> split;                     // per sample
  std::vector<std::string> canonical_markers;
  std::vector<float> feature_mean;              // per canonical marker, train
  std::vector<float> feature_std;

  std::vector<int> sample_indices(Split s) const;

  /// n x |canonical| standardized feature matrix for one sample.
  std::vector<float> standardized_features(int sample_idx) const;

  /// n x F standardized matrix over ALL of the sample's own markers (used
  /// for graph construction / FPS). Canonical markers use the dataset
  /// train statistics; extra markers fall back to per-sample statistics.
  std::vector<float> standardized_full_features(int sample_idx,
                                                int* out_cols) const;
};

/// Manifest (JSON): sample paths, canonical markers, optional explicit
/// split, label source, optional per-marker arcsinh cofactors.
FcmDataset build_dataset(const std::string& manifest_path, std::uint64_t seed);

/// Assembles a dataset from in-memory samples; explicit splits are honored
/// verbatim, otherwise samples are shuffled with the seed and partitioned
/// 50/25/25 (train = ceil(n/2), val = floor(n/4), test = rest).
FcmDataset assemble_dataset(std::vector<FcmSample> samples,
                            std::vector<std::string> canonical_markers,
                            std::optional<std::vector<Split>> explicit_split,
                            std::uint64_t seed);

}  // namespace cyto
