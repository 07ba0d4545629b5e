#include "doctest.h"

#include "cytoset/layers.hpp"

#include <cmath>
#include <random>

using namespace cyto;

namespace {

Tensor rand_mat(int n, int d, std::mt19937& rng) {
  return Tensor::uniform({n, d}, -1.0f, 1.0f, rng);
}

LayerContext eval_ctx() { return LayerContext{}; }

// permute rows of a matrix: out[perm[i]] = x[i]
Tensor permute_rows(const Tensor& x, const std::vector<int>& perm) {
  Tensor out = Tensor::zeros(x.shape);
  const int c = x.cols();
  for (int i = 0; i < x.rows(); ++i)
    std::copy_n(x.data().begin() + std::int64_t(i) * c, c,
                out.data().begin() + std::int64_t(perm[i]) * c);
  return out;
}

double max_row_diff(const Tensor& a, const Tensor& b,
                    const std::vector<int>& perm) {
  double worst = 0;
  const int c = a.cols();
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < c; ++j)
      worst = std::max(
          worst, std::abs(double(a.data()[std::int64_t(i) * c + j]) -
                          b.data()[std::int64_t(perm[i]) * c + j]));
  return worst;
}

}  // namespace

TEST_CASE("param store rejects duplicate names and round-trips checkpoints") {
  ParamStore store;
  std::mt19937 rng(1);
  store.add("a", Tensor::uniform({2, 3}, -1, 1, rng));
  CHECK_THROWS_AS(store.add("a", Tensor::zeros({1})), DataError);
  store.add("b", Tensor::full({4}, 2.0f), 0.2f, false);
  Checkpoint ck = store.to_checkpoint();

  ParamStore other;
  std::mt19937 rng2(9);
  other.add("a", Tensor::uniform({2, 3}, -1, 1, rng2));
  other.add("b", Tensor::zeros({4}));
  other.load_checkpoint(ck);
  CHECK(other.find("a")->value.data() == store.find("a")->value.data());
  CHECK(other.find("b")->value.data() == std::vector<float>(4, 2.0f));

  ParamStore missing;
  missing.add("c", Tensor::zeros({1}));
  CHECK_THROWS_AS(missing.load_checkpoint(ck), DataError);
}

TEST_CASE("mab attention rows sum to 1; a single key gets weight 1") {
  ParamStore store;
  std::mt19937 rng(3);
  MAB mab = MAB::make(store, "mab", 8, 2, rng);
  Tape tape;
  Tensor x = rand_mat(5, 8, rng);
  Tensor y = rand_mat(4, 8, rng);
  for (int h = 0; h < 2; ++h) {
    Tensor a = mab.attention_weights(tape, x, y, h);
    REQUIRE(a.shape == std::vector<int>{5, 4});
    for (int i = 0; i < 5; ++i) {
      double s = 0;
      for (int j = 0; j < 4; ++j) s += a.data()[i * 4 + j];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  Tensor single = mab.attention_weights(tape, x, rand_mat(1, 8, rng), 0);
  for (int i = 0; i < 5; ++i) CHECK(single.data()[i] == 1.0f);
}

TEST_CASE("mab rejects indivisible head counts and bad widths") {
  ParamStore store;
  std::mt19937 rng(3);
  CHECK_THROWS_AS(MAB::make(store, "m", 10, 4, rng), DataError);
  MAB ok = MAB::make(store, "ok", 8, 2, rng);
  Tape tape;
  LayerContext ctx = eval_ctx();
  CHECK_THROWS_AS(ok.forward(tape, rand_mat(3, 6, rng), rand_mat(3, 8, rng),
                             ctx),
                  DataError);
}

TEST_CASE("mab is permutation equivariant in X") {
  ParamStore store;
  std::mt19937 rng(5);
  MAB mab = MAB::make(store, "mab", 8, 4, rng);
  Tensor x = rand_mat(7, 8, rng);
  Tensor y = rand_mat(3, 8, rng);
  std::vector<int> perm{3, 0, 6, 1, 5, 2, 4};
  LayerContext ctx = eval_ctx();
  Tape t1, t2;
  Tensor out = mab.forward(t1, x, y, ctx);
  Tensor pout = mab.forward(t2, permute_rows(x, perm), y, ctx);
  CHECK(max_row_diff(out, pout, perm) < 1e-5);
}

TEST_CASE("isab shapes, 150-point ablation config, equivariance") {
  ParamStore store;
  std::mt19937 rng(8);
  ISAB isab = ISAB::make(store, "isab", 32, 4, InducingSource::learned(16),
                         rng);
  LayerContext ctx = eval_ctx();
  Tape tape;
  Tensor x = rand_mat(20, 32, rng);
  Tensor out = isab.forward(tape, x, ctx);
  CHECK(out.shape == std::vector<int>{20, 32});
  CHECK(isab.inducing_points().shape == std::vector<int>{16, 32});

  ISAB big = ISAB::make(store, "isab150", 32, 4, InducingSource::learned(150),
                        rng);
  CHECK(big.inducing_points().shape == std::vector<int>{150, 32});

  std::vector<int> perm(20);
  for (int i = 0; i < 20; ++i) perm[i] = (i * 7) % 20;
  Tape t2;
  Tensor pout = isab.forward(t2, permute_rows(x, perm), ctx);
  CHECK(max_row_diff(out, pout, perm) < 1e-5);
}

TEST_CASE("fps isab clamps the inducing count and runs on one event") {
  ParamStore store;
  std::mt19937 rng(4);
  ISAB isab = ISAB::make(store, "fisab", 8, 2, InducingSource::fps(1.0, 16),
                         rng);
  LayerContext ctx = eval_ctx();
  Tape tape;
  CHECK(isab.forward(tape, rand_mat(5, 8, rng), ctx).shape ==
        std::vector<int>{5, 8});
  Tape t2;
  CHECK(isab.forward(t2, rand_mat(1, 8, rng), ctx).shape ==
        std::vector<int>{1, 8});
}

TEST_CASE("isab attention allocation grows linearly in n") {
  ParamStore store;
  std::mt19937 rng(2);
  ISAB isab = ISAB::make(store, "isab", 8, 2, InducingSource::learned(16),
                         rng);
  auto count = [&](int n) {
    LayerContext ctx = eval_ctx();
    Tape tape(false);
    isab.forward(tape, rand_mat(n, 8, rng), ctx);
    return ctx.attention_elements;
  };
  const auto a = count(128), b = count(256);
  CHECK(double(b) / a == doctest::Approx(2.0).epsilon(0.05));
}

TEST_CASE("relu linear attention matches the naive quadratic oracle") {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 64);
    const int d = 1 + static_cast<int>(rng() % 8);
    Tensor q = rand_mat(n, d, rng), k = rand_mat(n, d, rng),
           v = rand_mat(n, d, rng);
    Tape tape(false);
    Tensor out = relu_linear_attention(tape, q, k, v);
    auto phi = [](float z) { return z > 0 ? z : 0.0f; };
    for (int i = 0; i < n; ++i) {
      std::vector<double> num(d, 0.0);
      double den = 0;
      for (int j = 0; j < n; ++j) {
        double w = 0;
        for (int c = 0; c < d; ++c)
          w += double(phi(q.data()[i * d + c])) * phi(k.data()[j * d + c]);
        den += w;
        for (int c = 0; c < d; ++c) num[c] += w * v.data()[j * d + c];
      }
      for (int c = 0; c < d; ++c)
        CHECK(out.data()[i * d + c] ==
              doctest::Approx(num[c] / std::max(1e-6, den)).epsilon(1e-5));
    }
  }
}

TEST_CASE("relu linear attention degenerate cases") {
  std::mt19937 rng(13);
  Tape tape(false);
  Tensor q = rand_mat(6, 4, rng);
  Tensor k = Tensor::full({6, 4}, -1.0f);  // phi(K) = 0 everywhere
  Tensor v = rand_mat(6, 4, rng);
  Tensor out = relu_linear_attention(tape, q, k, v);
  for (float x : out.data()) {
    CHECK(x == 0.0f);
    CHECK(std::isfinite(x));
  }
  Tensor q1 = Tensor::full({1, 2}, 1.0f), k1 = Tensor::full({1, 2}, 0.5f);
  Tensor v1 = Tensor::from({1, 2}, {3.0f, -4.0f});
  Tensor o1 = relu_linear_attention(tape, q1, k1, v1);
  CHECK(o1.data()[0] == doctest::Approx(3.0f));
  CHECK(o1.data()[1] == doctest::Approx(-4.0f));
}

TEST_CASE("global aggregate: mean hand case, max invariance, pma shape") {
  Tape tape(false);
  LayerContext ctx = eval_ctx();
  Tensor x = Tensor::from({2, 2}, {1, 3, 3, 1});
  Tensor m = global_aggregate(tape, x, AggregateMode::mean, nullptr, ctx);
  CHECK(m.shape == std::vector<int>{1, 2});
  CHECK(m.data() == std::vector<float>{2, 2});

  std::mt19937 rng(17);
  Tensor y = rand_mat(9, 4, rng);
  std::vector<int> perm{4, 7, 0, 2, 8, 1, 6, 3, 5};
  Tensor mx = global_aggregate(tape, y, AggregateMode::max, nullptr, ctx);
  Tensor pmx = global_aggregate(tape, permute_rows(y, perm),
                                AggregateMode::max, nullptr, ctx);
  CHECK(mx.data() == pmx.data());

  ParamStore store;
  PMA pma = PMA::make(store, "pma", 32, rng);
  for (int n : {1, 5, 40}) {
    Tape t;
    CHECK(global_aggregate(t, rand_mat(n, 32, rng), AggregateMode::pma, &pma,
                           ctx)
              .shape == std::vector<int>{1, 32});
  }
  CHECK_THROWS_AS(aggregate_mode_from_name("sum"), DataError);
}

TEST_CASE("pointnet concat widths and duplicate-event consistency") {
  ParamStore store;
  std::mt19937 rng(19);
  PointNet std_net = PointNet::make(store, "pn", 5, false, 8, rng);
  PointNet adapted = PointNet::make(store, "pna", 5, true, 8, rng);
  CHECK(std_net.concat_width() == 1152);
  CHECK(adapted.concat_width() == 2048);

  LayerContext ctx = eval_ctx();
  Tensor x = rand_mat(6, 5, rng);
  // duplicate row 2 as row 5
  std::copy_n(x.data().begin() + 2 * 5, 5, x.data().begin() + 5 * 5);
  for (const PointNet* net : {&std_net, &adapted}) {
    Tape tape(false);
    Tensor out = net->forward(tape, x, ctx);
    REQUIRE(out.shape == std::vector<int>{6, 8});
    // GEMM accumulation order varies with row alignment; allow float noise
    for (int j = 0; j < 8; ++j)
      CHECK(out.data()[2 * 8 + j] ==
            doctest::Approx(out.data()[5 * 8 + j]).epsilon(1e-5));
  }
}

TEST_CASE("gcn matches the dense normalized-adjacency oracle on a path") {
  ParamStore store;
  std::mt19937 rng(23);
  GnnLayer g = GnnLayer::make(store, "g", GnnKind::gcn, 2, 2, rng);
  // force W = I, b = 0
  auto& w = store.find("g.w")->value.data();
  w = {1, 0, 0, 1};
  EdgeList path{3, {{0, 1}, {1, 0}, {1, 2}, {2, 1}}};
  Tensor x = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  Tape tape(false);
  LayerContext ctx = eval_ctx();
  Tensor out = g.forward(tape, x, path, ctx);
  // deg-hat = [2, 3, 2]; out_i = sum_j A_hat_ij x_j / sqrt(d_i d_j)
  const double s6 = std::sqrt(6.0);
  for (int j = 0; j < 2; ++j) {
    CHECK(out.data()[0 * 2 + j] ==
          doctest::Approx(x.data()[j] / 2.0 + x.data()[2 + j] / s6)
              .epsilon(1e-6));
    CHECK(out.data()[1 * 2 + j] ==
          doctest::Approx(x.data()[j] / s6 + x.data()[2 + j] / 3.0 +
                          x.data()[4 + j] / s6)
              .epsilon(1e-6));
    CHECK(out.data()[2 * 2 + j] ==
          doctest::Approx(x.data()[2 + j] / s6 + x.data()[4 + j] / 2.0)
              .epsilon(1e-6));
  }
}

TEST_CASE("gat attention coefficients sum to 1 per node") {
  ParamStore store;
  std::mt19937 rng(29);
  GnnLayer g = GnnLayer::make(store, "g", GnnKind::gat, 4, 4, rng);
  CHECK(store.find("g.w")->weight_decay == 0.2f);
  CHECK(store.find("g.a_src")->weight_decay == 0.2f);
  EdgeList graph{4, {{0, 1}, {0, 2}, {1, 0}, {1, 3}, {2, 3}, {3, 1}}};
  Tensor x = rand_mat(4, 4, rng);
  Tape tape(false);
  std::vector<int> seg;
  Tensor alpha = g.gat_coefficients(tape, x, graph, &seg);
  std::vector<double> sums(4, 0.0);
  for (std::size_t i = 0; i < seg.size(); ++i)
    sums[seg[i]] += alpha.data()[i];
  for (double s : sums) CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("gin with no edges reduces to MLP((1 + eps) x)") {
  ParamStore store;
  std::mt19937 rng(31);
  GnnLayer g = GnnLayer::make(store, "g", GnnKind::gin, 3, 3, rng);
  store.find("g.eps")->value.data()[0] = 0.3f;
  Tensor x = rand_mat(5, 3, rng);
  EdgeList empty{5, {}};
  LayerContext ctx = eval_ctx();
  Tape tape(false);
  Tensor out = g.forward(tape, x, empty, ctx);
  // reference: run the registered MLP on 1.3 * x directly
  Tape ref(false);
  Tensor z = ref.scale(x, 1.3f);
  Tensor expect = ref.linear(
      ref.gelu(ref.linear(z, store.find("g.mlp1.w")->value,
                          store.find("g.mlp1.b")->value)),
      store.find("g.mlp2.w")->value, store.find("g.mlp2.b")->value);
  for (std::size_t i = 0; i < out.data().size(); ++i)
    CHECK(out.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-6));
}

TEST_CASE("gnn layers are permutation equivariant") {
  std::mt19937 rng(37);
  const int n = 9, d = 4;
  std::vector<int> perm{2, 5, 0, 8, 1, 7, 3, 6, 4};
  // a knn-style graph: 2 out-edges per node
  EdgeList graph{n, {}};
  for (int i = 0; i < n; ++i) {
    graph.edges.push_back({i, (i + 1) % n});
    graph.edges.push_back({i, (i + 4) % n});
  }
  EdgeList pgraph{n, {}};
  for (auto [s, t] : graph.edges) pgraph.edges.push_back({perm[s], perm[t]});
  std::sort(pgraph.edges.begin(), pgraph.edges.end());

  for (GnnKind kind : {GnnKind::gcn, GnnKind::gat, GnnKind::gin}) {
    ParamStore store;
    GnnLayer g = GnnLayer::make(store, "g", kind, d, d, rng);
    Tensor x = rand_mat(n, d, rng);
    LayerContext ctx = eval_ctx();
    Tape t1, t2;
    Tensor out = g.forward(t1, x, graph, ctx);
    Tensor pout = g.forward(t2, permute_rows(x, perm), pgraph, ctx);
    CHECK(max_row_diff(out, pout, perm) < 1e-5);
  }
}

TEST_CASE("asap pool on a 3-node graph keeps 2 clusters") {
  ParamStore store;
  std::mt19937 rng(41);
  AsapPool pool = AsapPool::make(store, "p", 4, rng);
  EdgeList graph{3, {{0, 1}, {1, 0}, {2, 1}}};
  Tensor x = rand_mat(3, 4, rng);
  LayerContext ctx = eval_ctx();
  Tape tape;
  AsapResult r = pool.forward(tape, x, graph, 2, ctx);
  CHECK(r.pooled.shape == std::vector<int>{2, 4});
  CHECK(r.pooled_graph.n_nodes == 2);
  CHECK(r.pooled_graph.edges.size() <= 2);  // one undirected edge at most
  for (float w : r.memberships.data()) CHECK(w >= 0.0f);
  CHECK_THROWS_AS(pool.forward(tape, x, graph, 3, ctx), DataError);
}

TEST_CASE("asap unpool: one-hot, identity, and renormalization") {
  Tape tape(false);
  // hard one-hot assignment: events inherit cluster values verbatim
  AsapResult hard;
  hard.n_events = 3;
  hard.member_event = {0, 1, 2};
  hard.member_cluster = {0, 1, 0};
  hard.memberships = Tensor::full({3, 1}, 1.0f);
  Tensor vals = Tensor::from({2, 1}, {5.0f, 7.0f});
  Tensor out = asap_unpool(tape, vals, hard);
  CHECK(out.data() == std::vector<float>{5, 7, 5});

  // identity pooling: unpool is identity
  AsapResult ident;
  ident.n_events = 2;
  ident.member_event = {0, 1};
  ident.member_cluster = {0, 1};
  ident.memberships = Tensor::full({2, 1}, 1.0f);
  Tensor v2 = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(asap_unpool(tape, v2, ident).data() == v2.data());

  // soft weights renormalize to a convex combination
  AsapResult soft;
  soft.n_events = 1;
  soft.member_event = {0, 0};
  soft.member_cluster = {0, 1};
  soft.memberships = Tensor::from({2, 1}, {0.2f, 0.6f});
  Tensor v3 = Tensor::from({2, 1}, {1.0f, 9.0f});
  CHECK(asap_unpool(tape, v3, soft).data()[0] ==
        doctest::Approx((0.2 * 1 + 0.6 * 9) / 0.8).epsilon(1e-6));
}

TEST_CASE("mlp block maps duplicate rows identically in eval mode") {
  ParamStore store;
  std::mt19937 rng(43);
  MLPBlock mlp = MLPBlock::make(store, "mlp", {3, 8, 8}, rng);
  Tensor x = rand_mat(4, 3, rng);
  std::copy_n(x.data().begin(), 3, x.data().begin() + 9);  // row 3 = row 0
  LayerContext ctx = eval_ctx();
  Tape tape(false);
  Tensor out = mlp.forward(tape, x, ctx);
  for (int j = 0; j < 8; ++j)
    CHECK(out.data()[j] == out.data()[3 * 8 + j]);
}

TEST_CASE("layers pass gradient checks on small random inputs") {
  std::mt19937 rng(47);
  const int n = 6, d = 8;
  LayerContext ctx = eval_ctx();

  ParamStore store;
  MAB mab = MAB::make(store, "mab", d, 2, rng);
  Tensor y = rand_mat(4, d, rng);
  CHECK(gradient_check(
            [&](Tape& t, const Tensor& in) {
              return t.reduce_mean(mab.forward(t, in, y, ctx), -1);
            },
            rand_mat(n, d, rng), 1e-3) <= 1e-3);

  ISAB isab = ISAB::make(store, "isab", d, 2, InducingSource::learned(3),
                         rng);
  CHECK(gradient_check(
            [&](Tape& t, const Tensor& in) {
              return t.reduce_mean(isab.forward(t, in, ctx), -1);
            },
            rand_mat(n, d, rng), 1e-3) <= 1e-3);

  ISAB fisab = ISAB::make(store, "fisab", d, 2, InducingSource::fps(0.5, 2),
                          rng);
  CHECK(gradient_check(
            [&](Tape& t, const Tensor& in) {
              return t.reduce_mean(fisab.forward(t, in, ctx), -1);
            },
            rand_mat(n, d, rng), 1e-3) <= 1e-3);

  Tensor k = rand_mat(n, d, rng), v = rand_mat(n, d, rng);
  CHECK(gradient_check(
            [&](Tape& t, const Tensor& in) {
              return t.reduce_mean(relu_linear_attention(t, in, k, v), -1);
            },
            rand_mat(n, d, rng), 1e-3) <= 1e-3);

  PMA pma = PMA::make(store, "pma", d, rng);
  CHECK(gradient_check(
            [&](Tape& t, const Tensor& in) {
              return t.reduce_mean(pma.forward(t, in, ctx), -1);
            },
            rand_mat(n, d, rng), 1e-3) <= 1e-3);

  MLPBlock mlp = MLPBlock::make(store, "mlp", {d, 5, 5}, rng);
  CHECK(gradient_check(
            [&](Tape& t, const Tensor& in) {
              return t.reduce_mean(mlp.forward(t, in, ctx), -1);
            },
            rand_mat(n, d, rng), 1e-3) <= 1e-3);

  EdgeList graph{n, {}};
  for (int i = 0; i < n; ++i) {
    graph.edges.push_back({i, (i + 1) % n});
    graph.edges.push_back({i, (i + 2) % n});
  }
  for (GnnKind kind : {GnnKind::gcn, GnnKind::gat, GnnKind::gin}) {
    ParamStore gs;
    GnnLayer g = GnnLayer::make(gs, "g", kind, d, 5, rng);
    CHECK(gradient_check(
              [&](Tape& t, const Tensor& in) {
                return t.reduce_mean(g.forward(t, in, graph, ctx), -1);
              },
              rand_mat(n, d, rng), 1e-3) <= 1e-3);
  }

  AsapPool pool = AsapPool::make(store, "pool", d, rng);
  CHECK(gradient_check(
            [&](Tape& t, const Tensor& in) {
              AsapResult r = pool.forward(t, in, graph, 3, ctx);
              Tensor head = t.reduce_mean(r.pooled, 1);  // one value/cluster
              return t.reduce_mean(
                  asap_unpool(t, reshape(t, head, {3, 1}), r), -1);
            },
            rand_mat(n, d, rng), 1e-3) <= 1e-3);

  PointNet pn = PointNet::make(store, "pn", 4, false, 5, rng);
  CHECK(gradient_check(
            [&](Tape& t, const Tensor& in) {
              return t.reduce_mean(pn.forward(t, in, ctx), -1);
            },
            rand_mat(3, 4, rng), 1e-3) <= 1e-3);
}

TEST_CASE("no-attention mab mixes no context across events") {
  ParamStore store;
  std::mt19937 rng(53);
  ISAB noatt = ISAB::make(store, "na", 8, 2, InducingSource::learned(4), rng,
                          true);
  LayerContext ctx = eval_ctx();
  Tensor x = rand_mat(5, 8, rng);
  Tape t1;
  Tensor out = noatt.forward(t1, x, ctx);
  // change every event except row 0: row 0's output must not move
  Tensor x2 = rand_mat(5, 8, rng);
  std::copy_n(x.data().begin(), 8, x2.data().begin());
  Tape t2;
  Tensor out2 = noatt.forward(t2, x2, ctx);
  for (int j = 0; j < 8; ++j)
    CHECK(out.data()[j] == doctest::Approx(out2.data()[j]).epsilon(1e-6));
}
