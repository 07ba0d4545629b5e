#include "cytoset/gradcheck.hpp"

#include "cytoset/layers.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace cyto {
namespace {

constexpr double kTol = 1e-3;

Tensor rand_kinked(std::vector<int> shape, std::mt19937& rng) {
  Tensor x = Tensor::normal(std::move(shape), 0, 1, rng);
  // keep probes away from relu/leaky kinks so central differences are valid
  for (float& v : x.data())
    if (std::abs(v) < 1e-2f) v = v < 0 ? v - 0.05f : v + 0.05f;
  return x;
}

struct Suite {
  std::vector<GradCheckResult> results;

  void run(const std::string& name, const TensorFn& fn, const Tensor& x) {
    const double err = gradient_check(fn, x, 1e-3);
    auto it = std::find_if(results.begin(), results.end(),
                           [&](const GradCheckResult& r) {
                             return r.name == name;
                           });
    if (it == results.end()) {
      results.push_back({name, err, err <= kTol});
    } else {
      it->max_error = std::max(it->max_error, err);
      it->pass = it->pass && err <= kTol;
    }
  }
};

void check_ops(Suite& suite, std::mt19937& rng) {
  std::uniform_int_distribution<int> dim(2, 8);
  const int n = dim(rng), c = dim(rng);
  Tensor x = rand_kinked({n, c}, rng);
  Tensor other = Tensor::normal({n, c}, 0, 1, rng);
  Tensor w = Tensor::normal({c, 3}, 0, 1, rng);
  Tensor bias = Tensor::normal({3}, 0, 1, rng);
  Tensor gamma = Tensor::normal({c}, 1, 0.2f, rng);
  Tensor beta = Tensor::normal({c}, 0, 0.2f, rng);
  std::vector<int> idx(n);
  std::uniform_int_distribution<int> pick(0, n - 1);
  for (auto& i : idx) i = pick(rng);
  std::vector<float> rm(c, 0.1f), rv(c, 1.2f);

  suite.run("op:matmul", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.matmul(p, w), -1); }, x);
  suite.run("op:add", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.add(p, other), -1); }, x);
  suite.run("op:sub", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.sub(p, other), -1); }, x);
  suite.run("op:mul", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.mul(p, other), -1); }, x);
  suite.run("op:concat", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.concat(p, other, 1), -1); }, x);
  suite.run("op:reduce_mean", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.reduce_mean(p, 0), -1); }, x);
  suite.run("op:reduce_sum", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.reduce_sum(p, 1), -1); }, x);
  suite.run("op:reduce_max", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.reduce_max(p, 1), -1); }, x);
  suite.run("op:softmax", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.mul(t.softmax(p, 1), other), -1); }, x);
  suite.run("op:relu", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.relu(p), -1); }, x);
  suite.run("op:leaky_relu", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.leaky_relu(p, 0.2f), -1); }, x);
  suite.run("op:gelu", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.gelu(p), -1); }, x);
  suite.run("op:sigmoid", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.sigmoid(p), -1); }, x);
  suite.run("op:layernorm", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.mul(t.layernorm(p, gamma, beta), other), -1); }, x);
  suite.run("op:batchnorm", [&](Tape& t, const Tensor& p) {
    auto m = rm;
    auto v = rv;
    return t.reduce_mean(t.batchnorm(p, gamma, beta, m, v, 0.1f, false), -1);
  }, x);
  suite.run("op:dropout", [&](Tape& t, const Tensor& p) {
    std::mt19937 r(1);
    return t.reduce_mean(t.dropout(p, 0.5f, false, r), -1); }, x);
  suite.run("op:linear", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.linear(p, w, bias), -1); }, x);
  suite.run("op:gather", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.gather(p, idx), -1); }, x);
  suite.run("op:scatter_sum", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.scatter_sum(p, idx, n), -1); }, x);
  suite.run("op:transpose", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.mul(t.transpose(p), Tensor::scalar(2)), -1); }, x);
  suite.run("op:scale", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.scale(p, -1.7f), -1); }, x);
  suite.run("op:bce_logits", [&](Tape& t, const Tensor& p) {
    Tensor tgt = Tensor::full({n, c}, 0.3f);
    return t.reduce_mean(t.bce_logits(p, tgt), -1); }, x);

  Tensor cvec = rand_kinked({n}, rng);
  Tensor dvec = Tensor::uniform({n}, 0.5f, 2.0f, rng);
  std::vector<int> seg(n);
  std::uniform_int_distribution<int> segpick(0, 2);
  for (auto& s : seg) s = segpick(rng);
  suite.run("op:rowmul", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.rowmul(x, p), -1); }, cvec);
  suite.run("op:rowdiv", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.rowdiv(x, p), -1); }, dvec);
  suite.run("op:segment_softmax", [&](Tape& t, const Tensor& p) {
    return t.reduce_mean(t.mul(t.segment_softmax(p, seg), dvec), -1); }, cvec);
}

void check_layers(Suite& suite, std::mt19937& rng) {
  const int n = 6, d = 8;
  LayerContext ctx;  // eval mode

  ParamStore store;
  MAB mab = MAB::make(store, "mab", d, 2, rng);
  Tensor y = rand_kinked({4, d}, rng);
  suite.run("layer:mab", [&](Tape& t, const Tensor& in) {
    return t.reduce_mean(mab.forward(t, in, y, ctx), -1);
  }, rand_kinked({n, d}, rng));

  ISAB isab = ISAB::make(store, "isab", d, 2, InducingSource::learned(3),
                         rng);
  suite.run("layer:isab", [&](Tape& t, const Tensor& in) {
    return t.reduce_mean(isab.forward(t, in, ctx), -1);
  }, rand_kinked({n, d}, rng));

  ISAB fisab = ISAB::make(store, "fisab", d, 2, InducingSource::fps(0.5, 2),
                          rng);
  suite.run("layer:isab_fps", [&](Tape& t, const Tensor& in) {
    return t.reduce_mean(fisab.forward(t, in, ctx), -1);
  }, rand_kinked({n, d}, rng));

  Tensor k = rand_kinked({n, d}, rng), v = rand_kinked({n, d}, rng);
  suite.run("layer:relu_linear_attention", [&](Tape& t, const Tensor& in) {
    return t.reduce_mean(relu_linear_attention(t, in, k, v), -1);
  }, rand_kinked({n, d}, rng));

  PMA pma = PMA::make(store, "pma", d, rng);
  suite.run("layer:pma", [&](Tape& t, const Tensor& in) {
    return t.reduce_mean(pma.forward(t, in, ctx), -1);
  }, rand_kinked({n, d}, rng));

  MLPBlock mlp = MLPBlock::make(store, "mlp", {d, 5, 5}, rng);
  suite.run("layer:mlp", [&](Tape& t, const Tensor& in) {
    return t.reduce_mean(mlp.forward(t, in, ctx), -1);
  }, rand_kinked({n, d}, rng));

  EdgeList graph{n, {}};
  for (int i = 0; i < n; ++i) {
    graph.edges.push_back({i, (i + 1) % n});
    graph.edges.push_back({i, (i + 2) % n});
  }
  const char* gnn_names[] = {"layer:gcn", "layer:gat", "layer:gin"};
  const GnnKind kinds[] = {GnnKind::gcn, GnnKind::gat, GnnKind::gin};
  for (int g = 0; g < 3; ++g) {
    ParamStore gs;
    GnnLayer layer = GnnLayer::make(gs, "g", kinds[g], d, 5, rng);
    suite.run(gnn_names[g], [&](Tape& t, const Tensor& in) {
      return t.reduce_mean(layer.forward(t, in, graph, ctx), -1);
    }, rand_kinked({n, d}, rng));
  }

  AsapPool pool = AsapPool::make(store, "pool", d, rng);
  suite.run("layer:asap", [&](Tape& t, const Tensor& in) {
    AsapResult r = pool.forward(t, in, graph, 3, ctx);
    Tensor head = t.reduce_mean(r.pooled, 1);
    return t.reduce_mean(asap_unpool(t, reshape(t, head, {3, 1}), r), -1);
  }, rand_kinked({n, d}, rng));

  PointNet pn = PointNet::make(store, "pn", 4, false, 5, rng);
  suite.run("layer:pointnet", [&](Tape& t, const Tensor& in) {
    return t.reduce_mean(pn.forward(t, in, ctx), -1);
  }, rand_kinked({3, 4}, rng));
}

}  // namespace

std::vector<GradCheckResult> run_gradient_suite(int instances,
                                                std::uint64_t seed) {
  Suite suite;
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  for (int i = 0; i < instances; ++i) {
    check_ops(suite, rng);
    check_layers(suite, rng);
  }
  return suite.results;
}

}  // namespace cyto
