#include "cytoset/models.hpp"

#include <algorithm>
#include <cmath>

namespace cyto {

const std::vector<std::string>& architecture_zoo() {
  static const std::vector<std::string> names = {
      "mlp",       "mlp-mean", "mlp-max",  "mlp-pma",    "pointnet",
      "pointnet-adapted",      "st",       "st-150i",    "st-no-att",
      "reluformer",            "st-fps",   "gcn",        "gat",
      "gin",       "gat-3",    "gin-3",    "gat-asap",   "gin-asap",
      "gat-st-fps",            "gin-st-fps"};
  return names;
}

bool architecture_needs_graph(const std::string& name) {
  static const std::vector<std::string> graphy = {
      "gcn",      "gat",      "gin",        "gat-3",      "gin-3",
      "gat-asap", "gin-asap", "gat-st-fps", "gin-st-fps"};
  return std::find(graphy.begin(), graphy.end(), name) != graphy.end();
}

/// reluFormer encoder block: the MAB skeleton with the softmax attention
/// replaced by single-head ReLU linear attention.
struct Model::ReluBlock {
  Tensor wq, wk, wv, wo;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor ff1_w, ff1_b, ff2_w, ff2_b;

  static std::shared_ptr<ReluBlock> make(ParamStore& store,
                                         const std::string& name, int dim,
                                         std::mt19937& rng) {
    auto b = std::make_shared<ReluBlock>();
    const float s = std::sqrt(1.0f / dim);
    auto w = [&](const std::string& suffix) {
      return store.add(name + suffix, Tensor::uniform({dim, dim}, -s, s, rng));
    };
    b->wq = w(".wq");
    b->wk = w(".wk");
    b->wv = w(".wv");
    b->wo = w(".wo");
    b->ln1_g = store.add(name + ".ln1.g", Tensor::full({dim}, 1.0f));
    b->ln1_b = store.add(name + ".ln1.b", Tensor::zeros({dim}));
    b->ln2_g = store.add(name + ".ln2.g", Tensor::full({dim}, 1.0f));
    b->ln2_b = store.add(name + ".ln2.b", Tensor::zeros({dim}));
    b->ff1_w = w(".ff1.w");
    b->ff1_b = store.add(name + ".ff1.b", Tensor::zeros({dim}));
    b->ff2_w = w(".ff2.w");
    b->ff2_b = store.add(name + ".ff2.b", Tensor::zeros({dim}));
    return b;
  }

  Tensor forward(Tape& t, const Tensor& x) const {
    Tensor att = relu_linear_attention(t, t.matmul(x, wq), t.matmul(x, wk),
                                       t.matmul(x, wv));
    Tensor h = t.layernorm(t.add(x, t.matmul(att, wo)), ln1_g, ln1_b);
    Tensor ff =
        t.linear(t.gelu(t.linear(h, ff1_w, ff1_b)), ff2_w, ff2_b);
    return t.layernorm(t.add(h, ff), ln2_g, ln2_b);
  }
};

Model Model::build(const ModelConfig& cfg) {
  const auto& zoo = architecture_zoo();
  if (std::find(zoo.begin(), zoo.end(), cfg.architecture) == zoo.end())
    throw DataError("unknown architecture '" + cfg.architecture + "'");
  if (cfg.input_dim < 1)
    throw DataError("model: input_dim must be set before build");
  if (cfg.hidden_dim % cfg.heads != 0)
    throw DataError("model: hidden_dim not divisible by heads");
  if (cfg.layers < 1) throw DataError("model: need at least one layer");

  Model m;
  m.cfg_ = cfg;
  if (cfg.architecture == "gat-3" || cfg.architecture == "gin-3")
    m.cfg_.k = 3;
  m.store_ = std::make_shared<ParamStore>();
  ParamStore& store = *m.store_;
  std::mt19937 rng(static_cast<std::uint32_t>(cfg.seed));
  const int d = cfg.hidden_dim;
  const std::string& a = cfg.architecture;
  const auto arch_gnn_kind = [&]() {
    return a.substr(0, 3) == "gat" ? GnnKind::gat
           : a.substr(0, 3) == "gin" ? GnnKind::gin
                                     : GnnKind::gcn;
  };

  if (a == "mlp" || a == "mlp-mean" || a == "mlp-max" || a == "mlp-pma") {
    m.kind_ = Kind::mlp;
    std::vector<int> dims{cfg.input_dim};
    for (int i = 0; i < cfg.layers; ++i) dims.push_back(d);
    m.trunk_ = MLPBlock::make(store, "trunk", dims, rng);
    int head_in = d;
    if (a != "mlp") {
      m.aggregate_ = aggregate_mode_from_name(a.substr(4));
      if (*m.aggregate_ == AggregateMode::pma)
        m.pma_ = PMA::make(store, "pma", d, rng);
      head_in = 2 * d;  // aggregate infused by concatenation
    }
    m.head_ = Linear::make(store, "head", head_in, 1, rng);
  } else if (a == "pointnet" || a == "pointnet-adapted") {
    m.kind_ = Kind::pointnet;
    m.pointnet_ = PointNet::make(store, "pointnet", cfg.input_dim,
                                 a == "pointnet-adapted", d, rng);
    m.head_ = Linear::make(store, "head", d, 1, rng);
  } else if (a == "st" || a == "st-150i" || a == "st-no-att" ||
             a == "st-fps") {
    m.kind_ = Kind::set;
    m.input_proj_ = Linear::make(store, "embed", cfg.input_dim, d, rng);
    for (int i = 0; i < cfg.layers; ++i) {
      const std::string name = "isab" + std::to_string(i);
      if (a == "st-fps")
        m.isabs_.push_back(ISAB::make(
            store, name, d, cfg.heads,
            InducingSource::fps(cfg.fps_ratio, cfg.fps_min_count), rng));
      else
        m.isabs_.push_back(ISAB::make(
            store, name, d, cfg.heads,
            InducingSource::learned(a == "st-150i" ? 150 : 16), rng,
            a == "st-no-att"));
    }
    m.head_ = Linear::make(store, "head", d, 1, rng);
  } else if (a == "reluformer") {
    m.kind_ = Kind::set;
    m.input_proj_ = Linear::make(store, "embed", cfg.input_dim, d, rng);
    for (int i = 0; i < cfg.layers; ++i)
      m.relu_blocks_.push_back(
          ReluBlock::make(store, "rf" + std::to_string(i), d, rng));
    m.head_ = Linear::make(store, "head", d, 1, rng);
  } else if (a == "gcn" || a == "gat" || a == "gin" || a == "gat-3" ||
             a == "gin-3") {
    m.kind_ = Kind::gnn;
    int in = cfg.input_dim;
    for (int i = 0; i < cfg.layers; ++i) {
      m.gnns_.push_back(GnnLayer::make(store, "gnn" + std::to_string(i),
                                       arch_gnn_kind(), in, d, rng));
      in = d;
    }
    m.head_ = Linear::make(store, "head", d, 1, rng);
  } else if (a == "gat-asap" || a == "gin-asap") {
    m.kind_ = Kind::asap;
    int in = cfg.input_dim;
    for (int i = 0; i < 4; ++i) {
      m.gnns_.push_back(GnnLayer::make(store, "gnn" + std::to_string(i),
                                       arch_gnn_kind(), in, d, rng));
      in = d;
    }
    m.pool1_ = AsapPool::make(store, "pool1", d, rng);
    m.pool2_ = AsapPool::make(store, "pool2", d, rng);
    m.head_ = Linear::make(store, "head", d, 1, rng);
  } else {  // gat-st-fps / gin-st-fps
    m.kind_ = Kind::gnn_st_fps;
    m.gnns_.push_back(
        GnnLayer::make(store, "gnn0", arch_gnn_kind(), cfg.input_dim, d,
                       rng));
    m.concat_proj_ =
        Linear::make(store, "concat_proj", d + cfg.input_dim, d, rng);
    for (int i = 0; i < 3; ++i)
      m.isabs_.push_back(ISAB::make(
          store, "isab" + std::to_string(i), d, cfg.heads,
          InducingSource::fps(cfg.fps_ratio, cfg.fps_min_count), rng));
    m.head_ = Linear::make(store, "head", d, 1, rng);
  }
  return m;
}

bool Model::needs_graph() const {
  return architecture_needs_graph(cfg_.architecture);
}

int Model::knn_k() const { return cfg_.k; }

Tensor Model::forward(Tape& tape, const Tensor& x, const EdgeList* graph,
                      LayerContext& ctx) {
  if (x.cols() != cfg_.input_dim)
    throw DataError("model '" + cfg_.architecture + "': input width " +
                    std::to_string(x.cols()) + " != configured " +
                    std::to_string(cfg_.input_dim));
  if (needs_graph() && !graph)
    throw DataError("model '" + cfg_.architecture + "' requires a graph");
  const int n = x.rows();

  switch (kind_) {
    case Kind::mlp: {
      Tensor h = trunk_->forward(tape, x, ctx);
      if (aggregate_) {
        Tensor g = global_aggregate(tape, h, *aggregate_,
                                    pma_ ? &*pma_ : nullptr, ctx);
        h = tape.concat(h, broadcast_rows(tape, g, n), 1);
      }
      last_activations_ = h.detached();
      return head_->forward(tape, h);
    }
    case Kind::pointnet: {
      Tensor h = pointnet_->forward(tape, x, ctx);
      last_activations_ = h.detached();
      return head_->forward(tape, h);
    }
    case Kind::set: {
      Tensor h = input_proj_->forward(tape, x);
      for (const ISAB& isab : isabs_) h = isab.forward(tape, h, ctx);
      for (const auto& blk : relu_blocks_) h = blk->forward(tape, h);
      last_activations_ = h.detached();
      return head_->forward(tape, h);
    }
    case Kind::gnn: {
      Tensor h = x;
      for (std::size_t i = 0; i < gnns_.size(); ++i) {
        h = gnns_[i].forward(tape, h, *graph, ctx);
        if (i + 1 < gnns_.size()) h = tape.gelu(h);
      }
      last_activations_ = h.detached();
      return head_->forward(tape, h);
    }
    case Kind::asap: {
      Tensor h = tape.gelu(gnns_[0].forward(tape, x, *graph, ctx));
      h = tape.gelu(gnns_[1].forward(tape, h, *graph, ctx));
      const int t1 = std::min(100, n - 1);
      AsapResult s1 = pool1_->forward(tape, h, *graph, t1, ctx);
      Tensor p = tape.gelu(
          gnns_[2].forward(tape, s1.pooled, s1.pooled_graph, ctx));
      p = tape.gelu(gnns_[3].forward(tape, p, s1.pooled_graph, ctx));
      const int t2 = std::min(50, t1 - 1);
      AsapResult s2 = pool2_->forward(tape, p, s1.pooled_graph, t2, ctx);
      Tensor feats =
          asap_unpool(tape, asap_unpool(tape, s2.pooled, s2), s1);
      last_activations_ = feats.detached();
      Tensor logits = head_->forward(tape, s2.pooled);
      return asap_unpool(tape, asap_unpool(tape, logits, s2), s1);
    }
    case Kind::gnn_st_fps: {
      Tensor local = tape.gelu(gnns_[0].forward(tape, x, *graph, ctx));
      Tensor h =
          concat_proj_->forward(tape, tape.concat(local, x, 1));
      for (const ISAB& isab : isabs_) h = isab.forward(tape, h, ctx);
      last_activations_ = h.detached();
      return head_->forward(tape, h);
    }
  }
  throw DataError("model: unreachable kind");
}

void Model::save(const std::string& path) const {
  store_->to_checkpoint().save(path);
}

void Model::load(const std::string& path) {
  store_->load_checkpoint(Checkpoint::load(path));
}

std::vector<float> masked_node_features(const FcmDataset& ds, int sample_idx,
                                        const std::vector<std::string>& mask,
                                        int* out_cols) {
  const auto& canon = ds.canonical_markers;
  std::vector<int> keep;
  for (std::size_t c = 0; c < canon.size(); ++c)
    if (std::find(mask.begin(), mask.end(), canon[c]) == mask.end())
      keep.push_back(static_cast<int>(c));
  for (const auto& mname : mask) {
    if (std::find(canon.begin(), canon.end(), mname) == canon.end())
      throw DataError("feature mask names unknown marker '" + mname + "'");
    if (ds.samples[sample_idx].marker_index(mname) < 0)
      throw DataError("sample " + ds.samples[sample_idx].sample_id +
                      " lacks masked marker '" + mname + "'");
  }
  if (keep.empty()) throw DataError("feature mask removes every marker");

  std::vector<float> full = ds.standardized_features(sample_idx);
  const int fc = static_cast<int>(canon.size());
  const int n = ds.samples[sample_idx].n_events();
  *out_cols = static_cast<int>(keep.size());
  if (keep.size() == canon.size()) return full;
  std::vector<float> out(static_cast<std::size_t>(n) * keep.size());
  for (int e = 0; e < n; ++e)
    for (std::size_t j = 0; j < keep.size(); ++j)
      out[e * keep.size() + j] =
          full[static_cast<std::size_t>(e) * fc + keep[j]];
  return out;
}

Tensor forward_sample(Model& model, Tape& tape, const FcmDataset& ds,
                      int sample_idx, const std::vector<std::string>& mask,
                      LayerContext& ctx,
                      std::unordered_map<int, EdgeList>* graph_cache) {
  int cols = 0;
  std::vector<float> feats = masked_node_features(ds, sample_idx, mask,
                                                  &cols);
  const int n = ds.samples[sample_idx].n_events();
  Tensor x = Tensor::from({n, cols}, std::move(feats));

  const EdgeList* graph = nullptr;
  EdgeList local;
  if (model.needs_graph()) {
    if (graph_cache) {
      auto it = graph_cache->find(sample_idx);
      if (it == graph_cache->end()) {
        int fullc = 0;
        std::vector<float> gfeat =
            ds.standardized_full_features(sample_idx, &fullc);
        it = graph_cache
                 ->emplace(sample_idx, EdgeList::from(knn_graph(
                                           gfeat.data(), n, fullc,
                                           model.knn_k())))
                 .first;
      }
      graph = &it->second;
    } else {
      int fullc = 0;
      std::vector<float> gfeat =
          ds.standardized_full_features(sample_idx, &fullc);
      local = EdgeList::from(knn_graph(gfeat.data(), n, fullc,
                                       model.knn_k()));
      graph = &local;
    }
  }
  return model.forward(tape, x, graph, ctx);
}

}  // namespace cyto
