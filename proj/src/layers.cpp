#include "cytoset/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace cyto {
namespace {

Tensor uniform_init(std::vector<int> shape, int fan_in, std::mt19937& rng) {
  const float s = std::sqrt(1.0f / std::max(1, fan_in));
  return Tensor::uniform(std::move(shape), -s, s, rng);
}

/// Constant 0/1 column-selection matrix picking cols [lo, lo+w) of a
/// dim-wide input: X * sel gives the slice, slice * sel^T re-embeds it.
Tensor selection(int dim, int lo, int w) {
  Tensor e = Tensor::zeros({dim, w});
  for (int j = 0; j < w; ++j) e.data()[std::int64_t(lo + j) * w + j] = 1.0f;
  return e;
}

}  // namespace

Tensor ParamStore::add(const std::string& name, Tensor value,
                       float weight_decay, bool trainable) {
  if (by_name_.count(name))
    throw DataError("param '" + name + "' registered twice");
  value.requires_grad = trainable;
  by_name_[name] = static_cast<int>(params_.size());
  params_.push_back({name, value, weight_decay, trainable});
  return value;
}

Param* ParamStore::find(const std::string& name) {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : &params_[it->second];
}

std::int64_t ParamStore::total_size() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

Checkpoint ParamStore::to_checkpoint() const {
  Checkpoint ck;
  for (const auto& p : params_) ck.add(p.name, p.value);
  return ck;
}

void ParamStore::load_checkpoint(const Checkpoint& ck) {
  for (auto& p : params_) {
    const Tensor* t = ck.find(p.name);
    if (!t) throw DataError("checkpoint missing parameter '" + p.name + "'");
    if (t->shape != p.value.shape)
      throw DataError("checkpoint shape mismatch for '" + p.name + "'");
    *p.value.store = *t->store;
  }
}

Tensor reshape(Tape& tape, const Tensor& x, std::vector<int> shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  if (n != x.size()) throw DataError("reshape: element count mismatch");
  Tensor y = tape.scale(x, 1.0f);
  y.shape = std::move(shape);
  return y;
}

Tensor broadcast_rows(Tape& tape, const Tensor& row, int n) {
  if (!row.is_matrix() || row.shape[0] != 1)
    throw DataError("broadcast_rows: need a 1 x d matrix");
  return tape.matmul(Tensor::full({n, 1}, 1.0f), row);
}

// ---------------------------------------------------------------- Linear

Linear Linear::make(ParamStore& store, const std::string& name, int in_dim,
                    int out_dim, std::mt19937& rng, float weight_decay) {
  Linear l;
  l.w_ = store.add(name + ".w", uniform_init({in_dim, out_dim}, in_dim, rng),
                   weight_decay);
  l.b_ = store.add(name + ".b", Tensor::zeros({out_dim}), weight_decay);
  return l;
}

Tensor Linear::forward(Tape& tape, const Tensor& x) const {
  return tape.linear(x, w_, b_);
}

// --------------------------------------------------------------- MLPBlock

MLPBlock MLPBlock::make(ParamStore& store, const std::string& name,
                        std::vector<int> dims, std::mt19937& rng) {
  if (dims.size() < 2) throw DataError("mlp_block: need at least one layer");
  MLPBlock m;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const std::string li = name + ".l" + std::to_string(i);
    m.layers_.push_back(Linear::make(store, li, dims[i], dims[i + 1], rng));
    const int d = dims[i + 1];
    m.bn_gamma_.push_back(store.add(li + ".bn.g", Tensor::full({d}, 1.0f)));
    m.bn_beta_.push_back(store.add(li + ".bn.b", Tensor::zeros({d})));
    Tensor rm = store.add(li + ".bn.mean", Tensor::zeros({d}), 0.0f, false);
    Tensor rv = store.add(li + ".bn.var", Tensor::full({d}, 1.0f), 0.0f,
                          false);
    m.bn_mean_param_.push_back(rm);
    m.bn_var_param_.push_back(rv);
    m.bn_mean_.push_back(rm.store);
    m.bn_var_.push_back(rv.store);
  }
  return m;
}

Tensor MLPBlock::forward(Tape& tape, const Tensor& x, LayerContext& ctx)
    const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = tape.gelu(layers_[i].forward(tape, h));
    h = tape.batchnorm(h, bn_gamma_[i], bn_beta_[i], *bn_mean_[i],
                       *bn_var_[i], 0.1f, ctx.train);
  }
  return h;
}

// -------------------------------------------------------------------- MAB

MAB MAB::make(ParamStore& store, const std::string& name, int dim, int heads,
              std::mt19937& rng, bool no_attention, float weight_decay) {
  if (heads < 1 || dim % heads != 0)
    throw DataError("mab: hidden_dim " + std::to_string(dim) +
                    " not divisible by heads " + std::to_string(heads));
  MAB m;
  m.dim_ = dim;
  m.heads_ = heads;
  m.no_attention_ = no_attention;
  auto w = [&](const std::string& suffix) {
    return store.add(name + suffix, uniform_init({dim, dim}, dim, rng),
                     weight_decay);
  };
  m.wq_ = w(".wq");
  m.wk_ = w(".wk");
  m.wv_ = w(".wv");
  m.wo_ = w(".wo");
  m.ln1_g_ = store.add(name + ".ln1.g", Tensor::full({dim}, 1.0f));
  m.ln1_b_ = store.add(name + ".ln1.b", Tensor::zeros({dim}));
  m.ln2_g_ = store.add(name + ".ln2.g", Tensor::full({dim}, 1.0f));
  m.ln2_b_ = store.add(name + ".ln2.b", Tensor::zeros({dim}));
  m.ff1_w_ = store.add(name + ".ff1.w", uniform_init({dim, dim}, dim, rng),
                       weight_decay);
  m.ff1_b_ = store.add(name + ".ff1.b", Tensor::zeros({dim}));
  m.ff2_w_ = store.add(name + ".ff2.w", uniform_init({dim, dim}, dim, rng),
                       weight_decay);
  m.ff2_b_ = store.add(name + ".ff2.b", Tensor::zeros({dim}));
  return m;
}

Tensor MAB::multihead(Tape& tape, const Tensor& x, const Tensor& y,
                      LayerContext& ctx) const {
  if (x.cols() != dim_ || y.cols() != dim_)
    throw DataError("mab: input width != hidden_dim");
  if (no_attention_) {
    // summed query/key/value projections of the same rows; no mixing
    Tensor s = tape.add(tape.add(tape.matmul(x, wq_), tape.matmul(x, wk_)),
                        tape.matmul(x, wv_));
    return tape.matmul(s, wo_);
  }
  const int dh = dim_ / heads_;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  Tensor q = tape.matmul(x, wq_);
  Tensor k = tape.matmul(y, wk_);
  Tensor v = tape.matmul(y, wv_);
  Tensor merged;
  for (int h = 0; h < heads_; ++h) {
    Tensor sel = selection(dim_, h * dh, dh);
    Tensor qh = tape.matmul(q, sel);
    Tensor kh = tape.matmul(k, sel);
    Tensor vh = tape.matmul(v, sel);
    Tensor scores =
        tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt);
    ctx.attention_elements +=
        std::int64_t(x.rows()) * y.rows();  // attention matrix footprint
    Tensor att = tape.softmax(scores, 1);
    Tensor oh = tape.matmul(tape.matmul(att, vh), tape.transpose(sel));
    merged = h == 0 ? oh : tape.add(merged, oh);
  }
  return tape.matmul(merged, wo_);
}

Tensor MAB::attention_weights(Tape& tape, const Tensor& x, const Tensor& y,
                              int head) const {
  const int dh = dim_ / heads_;
  Tensor sel = selection(dim_, head * dh, dh);
  Tensor qh = tape.matmul(tape.matmul(x, wq_), sel);
  Tensor kh = tape.matmul(tape.matmul(y, wk_), sel);
  Tensor scores = tape.scale(tape.matmul(qh, tape.transpose(kh)),
                             1.0f / std::sqrt(static_cast<float>(dh)));
  return tape.softmax(scores, 1);
}

Tensor MAB::forward(Tape& tape, const Tensor& x, const Tensor& y,
                    LayerContext& ctx) const {
  Tensor h = tape.layernorm(tape.add(x, multihead(tape, x, y, ctx)), ln1_g_,
                            ln1_b_);
  Tensor ff = tape.linear(tape.gelu(tape.linear(h, ff1_w_, ff1_b_)), ff2_w_,
                          ff2_b_);
  return tape.layernorm(tape.add(h, ff), ln2_g_, ln2_b_);
}

// ------------------------------------------------------------------- ISAB

ISAB ISAB::make(ParamStore& store, const std::string& name, int dim,
                int heads, InducingSource src, std::mt19937& rng,
                bool no_attention) {
  ISAB i;
  i.src_ = src;
  i.no_attention_ = no_attention;
  if (no_attention) {
    i.mab1_ = MAB::make(store, name + ".mab1", dim, heads, rng, true);
    return i;
  }
  if (src.kind == InducingSource::Kind::learned) {
    if (src.m < 1) throw DataError("isab: need at least one inducing point");
    Tensor init = Tensor::normal({src.m, dim}, 0.0f,
                                 1.0f / std::sqrt(static_cast<float>(dim)),
                                 rng);
    i.inducing_ = store.add(name + ".inducing", std::move(init));
  }
  i.mab0_ = MAB::make(store, name + ".mab0", dim, heads, rng);
  i.mab1_ = MAB::make(store, name + ".mab1", dim, heads, rng);
  return i;
}

Tensor ISAB::forward(Tape& tape, const Tensor& x, LayerContext& ctx) const {
  if (no_attention_) return mab1_.forward(tape, x, x, ctx);
  Tensor inducing;
  if (src_.kind == InducingSource::Kind::learned) {
    inducing = inducing_;
  } else {
    // re-select inducing rows from this layer's input on every pass
    const int n = x.rows();
    const int target = std::clamp(
        std::max(src_.min_count,
                 static_cast<int>(std::lround(src_.ratio * n))),
        1, n);
    int first;
    if (ctx.train && ctx.rng) {
      first = std::uniform_int_distribution<int>(0, n - 1)(*ctx.rng);
    } else {
      std::mt19937 rng(static_cast<std::uint32_t>(ctx.fps_eval_seed));
      first = std::uniform_int_distribution<int>(0, n - 1)(rng);
    }
    FpsSelection sel =
        fps_select_from(x.data().data(), n, x.cols(), target, first);
    inducing = tape.gather(x, sel.indices);
  }
  Tensor h = mab0_.forward(tape, inducing, x, ctx);
  return mab1_.forward(tape, x, h, ctx);
}

// -------------------------------------------------- relu linear attention

Tensor relu_linear_attention(Tape& tape, const Tensor& q, const Tensor& k,
                             const Tensor& v) {
  if (q.shape != k.shape || k.shape != v.shape || !q.is_matrix())
    throw DataError("relu_linear_attention: Q, K, V shapes must match");
  Tensor pq = tape.relu(q);
  Tensor pk = tape.relu(k);
  Tensor kv = tape.matmul(tape.transpose(pk), v);  // d x d
  Tensor num = tape.matmul(pq, kv);
  Tensor ksum = reshape(tape, tape.reduce_sum(pk, 0), {q.cols(), 1});
  Tensor den = tape.matmul(pq, ksum);  // n x 1
  return tape.rowdiv(num, den, 1e-6f);
}

// -------------------------------------------------------------------- PMA

AggregateMode aggregate_mode_from_name(const std::string& name) {
  if (name == "mean") return AggregateMode::mean;
  if (name == "max") return AggregateMode::max;
  if (name == "pma") return AggregateMode::pma;
  throw DataError("unknown aggregate mode '" + name + "'");
}

PMA PMA::make(ParamStore& store, const std::string& name, int dim,
              std::mt19937& rng) {
  PMA p;
  Tensor seed = Tensor::normal({1, dim}, 0.0f,
                               1.0f / std::sqrt(static_cast<float>(dim)),
                               rng);
  p.seed_ = store.add(name + ".seed", std::move(seed));
  p.ff_w_ = store.add(name + ".ff1.w", uniform_init({dim, dim}, dim, rng));
  p.ff_b_ = store.add(name + ".ff1.b", Tensor::zeros({dim}));
  p.ff2_w_ = store.add(name + ".ff2.w", uniform_init({dim, dim}, dim, rng));
  p.ff2_b_ = store.add(name + ".ff2.b", Tensor::zeros({dim}));
  p.mab_ = MAB::make(store, name + ".mab", dim, 1, rng);  // one head
  return p;
}

Tensor PMA::forward(Tape& tape, const Tensor& x, LayerContext& ctx) const {
  Tensor ff = tape.linear(tape.gelu(tape.linear(x, ff_w_, ff_b_)), ff2_w_,
                          ff2_b_);
  return mab_.forward(tape, seed_, ff, ctx);
}

Tensor global_aggregate(Tape& tape, const Tensor& x, AggregateMode mode,
                        const PMA* pma, LayerContext& ctx) {
  switch (mode) {
    case AggregateMode::mean:
      return reshape(tape, tape.reduce_mean(x, 0), {1, x.cols()});
    case AggregateMode::max:
      return reshape(tape, tape.reduce_max(x, 0), {1, x.cols()});
    case AggregateMode::pma:
      if (!pma) throw DataError("global_aggregate: pma params missing");
      return pma->forward(tape, x, ctx);
  }
  throw DataError("global_aggregate: bad mode");
}

// ----------------------------------------------------------------- PointNet

PointNet PointNet::make(ParamStore& store, const std::string& name,
                        int in_dim, bool adapted, int out_dim,
                        std::mt19937& rng) {
  PointNet p;
  p.adapted_ = adapted;
  const int event_dim = adapted ? 1024 : 128;
  const int mid = adapted ? 256 : 64;
  p.enc1_ = Linear::make(store, name + ".enc1", in_dim, mid, rng);
  p.enc2_ = Linear::make(store, name + ".enc2", mid, event_dim, rng);
  p.global_ = Linear::make(store, name + ".global", event_dim, 1024, rng);
  p.concat_width_ = event_dim + 1024;
  p.seg1_ = Linear::make(store, name + ".seg1", p.concat_width_, 256, rng);
  p.seg2_ = Linear::make(store, name + ".seg2", 256, out_dim, rng);
  return p;
}

Tensor PointNet::forward(Tape& tape, const Tensor& x, LayerContext& ctx)
    const {
  (void)ctx;
  Tensor e = tape.gelu(enc2_.forward(tape, tape.gelu(enc1_.forward(tape, x))));
  Tensor g = tape.gelu(global_.forward(tape, e));
  Tensor pooled = reshape(tape, tape.reduce_max(g, 0), {1, 1024});
  Tensor joined = tape.concat(e, broadcast_rows(tape, pooled, x.rows()), 1);
  return tape.gelu(
      seg2_.forward(tape, tape.gelu(seg1_.forward(tape, joined))));
}

// -------------------------------------------------------------- GNN layers

GnnLayer GnnLayer::make(ParamStore& store, const std::string& name,
                        GnnKind kind, int in_dim, int out_dim,
                        std::mt19937& rng) {
  GnnLayer g;
  g.kind_ = kind;
  switch (kind) {
    case GnnKind::gcn:
      g.w_ = store.add(name + ".w", uniform_init({in_dim, out_dim}, in_dim,
                                                 rng));
      g.b_ = store.add(name + ".b", Tensor::zeros({out_dim}));
      break;
    case GnnKind::gat:
      // the GAT group carries weight decay 0.2
      g.w_ = store.add(name + ".w",
                       uniform_init({in_dim, out_dim}, in_dim, rng), 0.2f);
      g.b_ = store.add(name + ".b", Tensor::zeros({out_dim}), 0.2f);
      g.a_src_ = store.add(name + ".a_src",
                           uniform_init({out_dim, 1}, out_dim, rng), 0.2f);
      g.a_dst_ = store.add(name + ".a_dst",
                           uniform_init({out_dim, 1}, out_dim, rng), 0.2f);
      break;
    case GnnKind::gin:
      g.eps_ = store.add(name + ".eps", Tensor::zeros({1}));
      g.gin1_ = Linear::make(store, name + ".mlp1", in_dim, out_dim, rng);
      g.gin2_ = Linear::make(store, name + ".mlp2", out_dim, out_dim, rng);
      break;
  }
  return g;
}

Tensor GnnLayer::gat_coefficients(Tape& tape, const Tensor& x,
                                  const EdgeList& graph,
                                  std::vector<int>* segments) const {
  const int n = graph.n_nodes;
  // aggregation support: in-neighbors (knn dsts) plus self, grouped per node
  std::vector<int> recv, send;
  std::size_t e = 0;
  for (int i = 0; i < n; ++i) {
    recv.push_back(i);
    send.push_back(i);
    while (e < graph.edges.size() && graph.edges[e].first == i) {
      recv.push_back(i);
      send.push_back(graph.edges[e].second);
      ++e;
    }
  }
  Tensor h = tape.linear(x, w_, b_);
  Tensor s1 = tape.matmul(h, a_src_);
  Tensor s2 = tape.matmul(h, a_dst_);
  Tensor scores = tape.leaky_relu(
      tape.add(tape.gather(s1, recv), tape.gather(s2, send)), 0.2f);
  Tensor flat = reshape(tape, scores, {static_cast<int>(recv.size())});
  Tensor alpha = tape.segment_softmax(flat, recv);
  if (segments) *segments = recv;
  return alpha;
}

Tensor GnnLayer::forward(Tape& tape, const Tensor& x, const EdgeList& graph,
                         LayerContext& ctx) const {
  const int n = graph.n_nodes;
  if (x.rows() != n) throw DataError("gnn_layer: node count mismatch");
  for (const auto& [s, d] : graph.edges)
    if (s < 0 || s >= n || d < 0 || d >= n)
      throw DataError("gnn_layer: node index out of range");

  if (kind_ == GnnKind::gcn) {
    // symmetrized adjacency with self-loops, D^-1/2 A D^-1/2 X W
    std::set<std::pair<int, int>> sym;
    for (int i = 0; i < n; ++i) sym.insert({i, i});
    for (const auto& [s, d] : graph.edges) {
      sym.insert({s, d});
      sym.insert({d, s});
    }
    std::vector<int> deg(n, 0);
    for (const auto& [u, v] : sym) {
      (void)v;
      ++deg[u];
    }
    std::vector<int> us, vs;
    Tensor coeff = Tensor::zeros({static_cast<int>(sym.size())});
    int idx = 0;
    for (const auto& [u, v] : sym) {
      us.push_back(u);
      vs.push_back(v);
      coeff.data()[idx++] =
          1.0f / std::sqrt(static_cast<float>(deg[u]) * deg[v]);
    }
    Tensor xw = tape.linear(x, w_, b_);
    Tensor msg = tape.rowmul(tape.gather(xw, vs), coeff);
    return tape.scatter_sum(msg, us, n);
  }

  if (kind_ == GnnKind::gat) {
    std::vector<int> recv;
    Tensor alpha = gat_coefficients(tape, x, graph, &recv);
    std::vector<int> send;
    std::size_t e = 0;
    for (int i = 0; i < n; ++i) {
      send.push_back(i);
      while (e < graph.edges.size() && graph.edges[e].first == i) {
        send.push_back(graph.edges[e].second);
        ++e;
      }
    }
    if (ctx.train && ctx.rng)
      alpha = tape.dropout(alpha, 0.2f, true, *ctx.rng);
    Tensor h = tape.linear(x, w_, b_);
    Tensor msg = tape.rowmul(tape.gather(h, send), alpha);
    return tape.scatter_sum(msg, recv, n);
  }

  // GIN: MLP((1 + eps) x + sum over neighbors)
  std::vector<int> src, dst;
  for (const auto& [s, d] : graph.edges) {
    src.push_back(s);
    dst.push_back(d);
  }
  Tensor self = tape.add(x, tape.mul(x, eps_));
  Tensor z = src.empty()
                 ? self
                 : tape.add(self, tape.scatter_sum(tape.gather(x, dst), src,
                                                   n));
  return gin2_.forward(tape, tape.gelu(gin1_.forward(tape, z)));
}

// ------------------------------------------------------------------- ASAP

AsapPool AsapPool::make(ParamStore& store, const std::string& name, int dim,
                        std::mt19937& rng) {
  AsapPool p;
  p.w_ = store.add(name + ".w", uniform_init({dim, dim}, dim, rng));
  p.a_src_ = store.add(name + ".a_src", uniform_init({dim, 1}, dim, rng));
  p.a_dst_ = store.add(name + ".a_dst", uniform_init({dim, 1}, dim, rng));
  p.fit_w_ = store.add(name + ".fit.w", uniform_init({dim, 1}, dim, rng));
  p.fit_b_ = store.add(name + ".fit.b", Tensor::zeros({1}));
  return p;
}

AsapResult AsapPool::forward(Tape& tape, const Tensor& x,
                             const EdgeList& graph, int target_nodes,
                             LayerContext& ctx) const {
  (void)ctx;
  const int n = graph.n_nodes;
  if (x.rows() != n) throw DataError("asap_pool: node count mismatch");
  if (target_nodes >= n || target_nodes < 1)
    throw DataError("asap_pool: target_nodes must be in [1, n)");

  // 1-hop ego networks: cluster i holds i and its out-neighbors
  std::vector<int> cl, mem;
  std::size_t e = 0;
  for (int i = 0; i < n; ++i) {
    cl.push_back(i);
    mem.push_back(i);
    while (e < graph.edges.size() && graph.edges[e].first == i) {
      cl.push_back(i);
      mem.push_back(graph.edges[e].second);
      ++e;
    }
  }
  const int total = static_cast<int>(cl.size());

  // membership attention within each ego network
  Tensor h = tape.matmul(x, w_);
  Tensor s1 = tape.matmul(h, a_src_);
  Tensor s2 = tape.matmul(h, a_dst_);
  Tensor scores = tape.leaky_relu(
      tape.add(tape.gather(s1, cl), tape.gather(s2, mem)), 0.2f);
  Tensor m_all = tape.segment_softmax(reshape(tape, scores, {total}), cl);

  // cluster representations and fitness
  Tensor reps = tape.scatter_sum(tape.rowmul(tape.gather(h, mem), m_all), cl,
                                 n);
  Tensor fitness =
      tape.sigmoid(tape.add(tape.matmul(reps, fit_w_), fit_b_));

  // keep the top target_nodes clusters by fitness (ties: lower index)
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return fitness.data()[a] > fitness.data()[b];
  });
  std::vector<int> kept(order.begin(), order.begin() + target_nodes);
  std::sort(kept.begin(), kept.end());
  std::vector<int> cluster_pos(n, -1);
  for (int c = 0; c < target_nodes; ++c) cluster_pos[kept[c]] = c;

  AsapResult out;
  out.n_events = n;
  out.centers = kept;
  out.pooled = tape.rowmul(tape.gather(reps, kept),
                           reshape(tape, tape.gather(fitness, kept),
                                   {target_nodes}));

  // retained assignment triples
  std::vector<int> kept_rows;
  for (int t = 0; t < total; ++t) {
    if (cluster_pos[cl[t]] < 0) continue;
    kept_rows.push_back(t);
    out.member_event.push_back(mem[t]);
    out.member_cluster.push_back(cluster_pos[cl[t]]);
  }
  Tensor m_mat = reshape(tape, m_all, {total, 1});
  out.memberships = tape.gather(m_mat, kept_rows);

  // pooled graph: clusters sharing any member are connected
  std::vector<std::vector<int>> covering(n);
  for (std::size_t t = 0; t < out.member_event.size(); ++t)
    covering[out.member_event[t]].push_back(out.member_cluster[t]);
  std::set<std::pair<int, int>> pe;
  for (int ev = 0; ev < n; ++ev)
    for (int a : covering[ev])
      for (int b : covering[ev])
        if (a != b) pe.insert({a, b});
  out.pooled_graph.n_nodes = target_nodes;
  out.pooled_graph.edges.assign(pe.begin(), pe.end());

  // uncovered events fall back to the nearest kept center (weight 1)
  std::vector<int> uncovered;
  for (int ev = 0; ev < n; ++ev)
    if (covering[ev].empty()) uncovered.push_back(ev);
  if (!uncovered.empty()) {
    const int f = x.cols();
    for (int ev : uncovered) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < target_nodes; ++c) {
        const float* a = x.data().data() + std::int64_t(ev) * f;
        const float* b = x.data().data() + std::int64_t(kept[c]) * f;
        double d2 = 0;
        for (int j = 0; j < f; ++j)
          d2 += (double(a[j]) - b[j]) * (double(a[j]) - b[j]);
        if (d2 < best_d) {
          best_d = d2;
          best = c;
        }
      }
      out.member_event.push_back(ev);
      out.member_cluster.push_back(best);
    }
    Tensor ones = Tensor::full({static_cast<int>(uncovered.size()), 1}, 1.0f);
    out.memberships = tape.concat(out.memberships, ones, 0);
  }
  return out;
}

Tensor asap_unpool(Tape& tape, const Tensor& pooled_values,
                   const AsapResult& stage) {
  const int triples = static_cast<int>(stage.member_event.size());
  if (stage.memberships.size() != triples)
    throw DataError("asap_unpool: assignment triple count mismatch");
  Tensor weights = reshape(tape, stage.memberships, {triples});
  Tensor gathered = tape.gather(pooled_values, stage.member_cluster);
  Tensor num = tape.scatter_sum(tape.rowmul(gathered, weights),
                                stage.member_event, stage.n_events);
  Tensor den = tape.scatter_sum(reshape(tape, weights, {triples, 1}),
                                stage.member_event, stage.n_events);
  return tape.rowdiv(num, den, 1e-6f);
}

}  // namespace cyto
