#pragma once

#include "cytoset/tensor.hpp"

#include <cstdint>
#include <vector>

namespace cyto {

/// Directed k-nearest-neighbor graph: dst is a neighbor of src, exactly k
/// outgoing edges per node, no self-loops, ties broken by lower index.
struct KnnGraph {
  int n_nodes = 0;
  int k = 0;
  std::vector<std::pair<int, int>> edges;  // (src, dst), grouped by src

  /// Neighbor list of one node (k consecutive edges).
  const std::pair<int, int>* neighbors(int node) const {
    return edges.data() + static_cast<std::size_t>(node) * k;
  }
};

/// Exact blocked brute-force k-NN over the full feature space (squared
/// Euclidean internally).
KnnGraph knn_graph(const float* events, int n, int f, int k);
KnnGraph knn_graph(const std::vector<float>& events, int f, int k);

/// Ordered farthest-point-sampling selection.
struct FpsSelection {
  std::vector<int> indices;
  double ratio = 0.0;
};

/// Greedy FPS: target m = clamp(max(min_count, round(ratio*n)), 1, n); the
/// first index is drawn uniformly from the seed, each later index maximizes
/// the minimum distance to the already-selected set (O(nm)).
FpsSelection fps_select(const float* events, int n, int f, double ratio,
                        int min_count, std::uint64_t seed);
FpsSelection fps_select(const std::vector<float>& events, int f, double ratio,
                        int min_count, std::uint64_t seed);

/// FPS with a caller-forced first pick (tests, permutation-equivariance).
FpsSelection fps_select_from(const float* events, int n, int f, int m,
                             int first_pick);

}  // namespace cyto
