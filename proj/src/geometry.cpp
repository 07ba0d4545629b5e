#include "cytoset/geometry.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>

namespace cyto {
namespace {

using EMat =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapM = Eigen::Map<const EMat>;

void check_finite(const float* events, std::int64_t count) {
  for (std::int64_t i = 0; i < count; ++i)
    if (!std::isfinite(events[i]))
      throw DataError("geometry: non-finite input at flat index " +
                      std::to_string(i));
}

}  // namespace

KnnGraph knn_graph(const float* events, int n, int f, int k) {
  if (k < 1 || n <= k)
    throw DataError("knn_graph: need n > k >= 1, got n=" + std::to_string(n) +
                    " k=" + std::to_string(k));
  check_finite(events, static_cast<std::int64_t>(n) * f);

  KnnGraph g;
  g.n_nodes = n;
  g.k = k;
  g.edges.resize(static_cast<std::size_t>(n) * k);

  CMapM X(events, n, f);
  Eigen::VectorXf norms(n);
  for (int i = 0; i < n; ++i) norms[i] = X.row(i).squaredNorm();

  // blocked query rows; memory stays O(block * n)
  const int block = std::max(1, std::min(n, 4 * 1024 * 1024 / std::max(1, n)));
  // candidate margin re-ranked with exact double-precision distances, so the
  // final ordering is independent of GEMM rounding
  const int margin = std::min(n - 1, k + 32);
  EMat dist(block, n);
  std::vector<std::pair<float, int>> cand(n - 1);
  std::vector<std::pair<double, int>> exact(margin);
  for (int q0 = 0; q0 < n; q0 += block) {
    const int rows = std::min(block, n - q0);
    dist.topRows(rows).noalias() = -2.0f * X.middleRows(q0, rows) * X.transpose();
    for (int r = 0; r < rows; ++r) {
      const int q = q0 + r;
      std::size_t m = 0;
      for (int j = 0; j < n; ++j) {
        if (j == q) continue;
        cand[m++] = {dist(r, j) + norms[j], j};  // + norms[q] is constant
      }
      std::partial_sort(cand.begin(), cand.begin() + margin, cand.end());
      for (int t = 0; t < margin; ++t) {
        const int j = cand[t].second;
        double d2 = 0;
        const float* a = events + static_cast<std::int64_t>(q) * f;
        const float* b = events + static_cast<std::int64_t>(j) * f;
        for (int c = 0; c < f; ++c)
          d2 += (double(a[c]) - b[c]) * (double(a[c]) - b[c]);
        exact[t] = {d2, j};
      }
      std::sort(exact.begin(), exact.end());
      for (int t = 0; t < k; ++t)
        g.edges[static_cast<std::size_t>(q) * k + t] = {q, exact[t].second};
    }
  }
  return g;
}

KnnGraph knn_graph(const std::vector<float>& events, int f, int k) {
  return knn_graph(events.data(), static_cast<int>(events.size()) / f, f, k);
}

FpsSelection fps_select_from(const float* events, int n, int f, int m,
                             int first_pick) {
  if (n < 1) throw DataError("fps_select: empty input");
  m = std::clamp(m, 1, n);
  check_finite(events, static_cast<std::int64_t>(n) * f);

  FpsSelection sel;
  sel.indices.reserve(m);
  sel.indices.push_back(first_pick);
  std::vector<double> min_d2(n);
  auto d2 = [&](int a, int b) {
    const float* pa = events + static_cast<std::int64_t>(a) * f;
    const float* pb = events + static_cast<std::int64_t>(b) * f;
    double s = 0;
    for (int c = 0; c < f; ++c)
      s += (double(pa[c]) - pb[c]) * (double(pa[c]) - pb[c]);
    return s;
  };
  for (int i = 0; i < n; ++i) min_d2[i] = d2(i, first_pick);
  while (static_cast<int>(sel.indices.size()) < m) {
    int best = 0;
    for (int i = 1; i < n; ++i)
      if (min_d2[i] > min_d2[best]) best = i;  // ties: lower index wins
    sel.indices.push_back(best);
    for (int i = 0; i < n; ++i)
      min_d2[i] = std::min(min_d2[i], d2(i, best));
  }
  return sel;
}

FpsSelection fps_select(const float* events, int n, int f, double ratio,
                        int min_count, std::uint64_t seed) {
  if (ratio <= 0.0 || ratio > 1.0)
    throw DataError("fps_select: ratio must be in (0,1], got " +
                    std::to_string(ratio));
  if (n < 1) throw DataError("fps_select: empty input");
  const int target = std::clamp(
      std::max(min_count, static_cast<int>(std::lround(ratio * n))), 1, n);
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  std::uniform_int_distribution<int> pick(0, n - 1);
  FpsSelection sel = fps_select_from(events, n, f, target, pick(rng));
  sel.ratio = ratio;
  return sel;
}

FpsSelection fps_select(const std::vector<float>& events, int f, double ratio,
                        int min_count, std::uint64_t seed) {
  return fps_select(events.data(), static_cast<int>(events.size()) / f, f,
                    ratio, min_count, seed);
}

}  // namespace cyto
