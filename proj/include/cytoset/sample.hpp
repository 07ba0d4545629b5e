#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cyto {

/// One measured sample: n events by F markers, optional per-event binary
/// labels (1 = blast, the positive class).
struct FcmSample {
  std::string sample_id;
  std::vector<std::string> markers;       // size F, unique within the sample
  std::vector<float> events;              // n*F row-major
  std::vector<std::uint8_t> labels;       // size n when present, else empty

  int n_events() const {
    return markers.empty() ? 0
                           : static_cast<int>(events.size() / markers.size());
  }
  int n_features() const { return static_cast<int>(markers.size()); }
  float at(int event, int feature) const {
    return events[static_cast<std::size_t>(event) * markers.size() + feature];
  }
  bool has_labels() const { return !labels.empty(); }

  /// Column index of a marker by exact name (whitespace-trimmed), -1 if absent.
  int marker_index(const std::string& name) const;

  /// Throws DataError on violated invariants (empty, duplicate markers,
  /// label length mismatch).
  void validate() const;
};

}  // namespace cyto
