#include "doctest.h"

#include "cytoset/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <vector>

using namespace cyto;

namespace {

// O(n^2) reference with the same double-precision arithmetic as the
// implementation, so edge sets must match exactly (not just approximately).
std::vector<std::pair<int, int>> brute_knn(const std::vector<float>& x, int n,
                                           int f, int k) {
  std::vector<std::pair<int, int>> edges;
  std::vector<std::pair<double, int>> d(n);
  for (int q = 0; q < n; ++q) {
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int c = 0; c < f; ++c) {
        const double diff = double(x[q * f + c]) - x[j * f + c];
        s += diff * diff;
      }
      d[j] = {s, j};
    }
    d[q].first = std::numeric_limits<double>::infinity();  // no self-loop
    std::sort(d.begin(), d.end());
    for (int t = 0; t < k; ++t) edges.emplace_back(q, d[t].second);
  }
  return edges;
}

std::vector<int> brute_fps(const std::vector<float>& x, int n, int f, int m,
                           int first) {
  std::vector<int> sel{first};
  auto d2 = [&](int a, int b) {
    double s = 0;
    for (int c = 0; c < f; ++c) {
      const double diff = double(x[a * f + c]) - x[b * f + c];
      s += diff * diff;
    }
    return s;
  };
  while (static_cast<int>(sel.size()) < m) {
    int best = -1;
    double best_d = -1;
    for (int i = 0; i < n; ++i) {
      double mind = std::numeric_limits<double>::infinity();
      for (int s : sel) mind = std::min(mind, d2(i, s));
      if (mind > best_d) {
        best_d = mind;
        best = i;
      }
    }
    sel.push_back(best);
  }
  return sel;
}

std::vector<float> random_points(int n, int f, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  std::vector<float> x(static_cast<std::size_t>(n) * f);
  for (auto& v : x) v = d(rng);
  return x;
}

}  // namespace

TEST_CASE("colinear points, k=1") {
  std::vector<float> x{0, 1, 3};
  KnnGraph g = knn_graph(x, 1, 1);
  REQUIRE(g.edges.size() == 3);
  CHECK(g.edges[0] == std::pair<int, int>{0, 1});
  CHECK(g.edges[1] == std::pair<int, int>{1, 0});
  CHECK(g.edges[2] == std::pair<int, int>{2, 1});
}

TEST_CASE("duplicated points pick each other, never themselves") {
  std::vector<float> x{0, 0, 5};
  KnnGraph g = knn_graph(x, 1, 1);
  CHECK(g.edges[0] == std::pair<int, int>{0, 1});
  CHECK(g.edges[1] == std::pair<int, int>{1, 0});
  CHECK(g.edges[2].second != 2);  // tie between 0 and 1: lower index
  CHECK(g.edges[2] == std::pair<int, int>{2, 0});
}

TEST_CASE("invalid knn inputs are rejected") {
  std::vector<float> x{0, 1, 3};
  CHECK_THROWS_AS(knn_graph(x, 1, 3), DataError);
  CHECK_THROWS_AS(knn_graph(x, 1, 0), DataError);
  std::vector<float> bad{0, std::numeric_limits<float>::quiet_NaN(), 3, 4};
  CHECK_THROWS_AS(knn_graph(bad, 1, 1), DataError);
}

TEST_CASE("knn matches the brute-force oracle on random instances") {
  for (std::uint32_t seed : {1u, 2u, 3u, 4u, 5u}) {
    const int n = 100 + 80 * static_cast<int>(seed);  // up to 500
    const int f = 1 + static_cast<int>(seed) % 7;
    const int k = seed == 5u ? 10 : 1 + static_cast<int>(seed);
    std::vector<float> x = random_points(n, f, seed);
    KnnGraph g = knn_graph(x, f, k);
    CHECK(g.edges == brute_knn(x, n, f, k));
  }
}

TEST_CASE("knn edge counts and no self-loops hold") {
  std::vector<float> x = random_points(200, 4, 99);
  KnnGraph g = knn_graph(x, 4, 10);
  CHECK(g.edges.size() == 2000);
  for (int q = 0; q < 200; ++q) {
    std::set<int> nbrs;
    for (int t = 0; t < g.k; ++t) {
      CHECK(g.neighbors(q)[t].first == q);
      CHECK(g.neighbors(q)[t].second != q);
      nbrs.insert(g.neighbors(q)[t].second);
    }
    CHECK(nbrs.size() == 10);  // distinct neighbors
  }
}

TEST_CASE("fps hand example: x=0,1,2,10, first pick 0, m=2") {
  std::vector<float> x{0, 1, 2, 10};
  FpsSelection s = fps_select_from(x.data(), 4, 1, 2, 0);
  CHECK(s.indices == std::vector<int>{0, 3});
}

TEST_CASE("fps ratio=1 selects a permutation of all indices") {
  std::vector<float> x = random_points(37, 3, 12);
  FpsSelection s = fps_select(x, 3, 1.0, 16, 5);
  REQUIRE(s.indices.size() == 37);
  std::set<int> uniq(s.indices.begin(), s.indices.end());
  CHECK(uniq.size() == 37);
  CHECK(*uniq.begin() == 0);
  CHECK(*uniq.rbegin() == 36);
}

TEST_CASE("fps target size: max(min_count, round(ratio*n)) clamped to n") {
  std::vector<float> x = random_points(50, 2, 3);
  CHECK(fps_select(x, 2, 0.1, 16, 0).indices.size() == 16);   // min_count
  CHECK(fps_select(x, 2, 0.5, 16, 0).indices.size() == 25);   // round
  CHECK(fps_select(x, 2, 0.9, 100, 0).indices.size() == 50);  // clamp to n
  CHECK_THROWS_AS(fps_select(x, 2, 0.0, 16, 0), DataError);
  CHECK_THROWS_AS(fps_select(x, 2, 1.5, 16, 0), DataError);
}

TEST_CASE("fps matches the brute-force greedy oracle") {
  for (std::uint32_t seed : {7u, 8u, 9u}) {
    const int n = 200;
    const int f = 2 + static_cast<int>(seed) % 3;
    std::vector<float> x = random_points(n, f, seed);
    const int first = static_cast<int>(seed) * 13 % n;
    FpsSelection s = fps_select_from(x.data(), n, f, 20, first);
    CHECK(s.indices == brute_fps(x, n, f, 20, first));
  }
}

TEST_CASE("fps min pairwise distance is non-increasing in m") {
  std::vector<float> x = random_points(120, 3, 21);
  FpsSelection full = fps_select_from(x.data(), 120, 3, 40, 4);
  auto d2 = [&](int a, int b) {
    double s = 0;
    for (int c = 0; c < 3; ++c) {
      const double diff = double(x[a * 3 + c]) - x[b * 3 + c];
      s += diff * diff;
    }
    return s;
  };
  double prev = std::numeric_limits<double>::infinity();
  for (int m = 2; m <= 40; ++m) {
    double mind = std::numeric_limits<double>::infinity();
    for (int i = 0; i < m; ++i)
      for (int j = i + 1; j < m; ++j)
        mind = std::min(mind, d2(full.indices[i], full.indices[j]));
    CHECK(mind <= prev + 1e-12);
    prev = mind;
  }
}

TEST_CASE("knn and fps are permutation equivariant") {
  const int n = 150, f = 3, k = 4;
  std::vector<float> x = random_points(n, f, 31);
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  std::mt19937 rng(5);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<float> px(x.size());
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < f; ++c) px[perm[i] * f + c] = x[i * f + c];

  KnnGraph g = knn_graph(x, f, k);
  KnnGraph pg = knn_graph(px, f, k);
  for (int q = 0; q < n; ++q) {
    std::set<int> a, b;
    for (int t = 0; t < k; ++t) {
      a.insert(perm[g.neighbors(q)[t].second]);
      b.insert(pg.neighbors(perm[q])[t].second);
    }
    CHECK(a == b);
  }

  FpsSelection s = fps_select_from(x.data(), n, f, 15, 7);
  FpsSelection ps = fps_select_from(px.data(), n, f, 15, perm[7]);
  std::vector<int> mapped;
  for (int i : s.indices) mapped.push_back(perm[i]);
  CHECK(mapped == ps.indices);
}
