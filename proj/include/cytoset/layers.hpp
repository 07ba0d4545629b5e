#pragma once

#include "cytoset/checkpoint.hpp"
#include "cytoset/geometry.hpp"
#include "cytoset/tensor.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace cyto {

/// Per-forward-pass state: train/eval mode, the RNG driving dropout and
/// train-time FPS picks, and an attention-allocation counter (total entries
/// of all attention matrices materialized so far).
struct LayerContext {
  bool train = false;
  std::mt19937* rng = nullptr;
  std::int64_t attention_elements = 0;
  std::uint64_t fps_eval_seed = 0;  // deterministic FPS first pick in eval
};

/// Named parameter registry. Layers register tensors here; the optimizer and
/// the checkpoint reader/writer address them by unique hierarchical name.
/// Non-trainable entries (batchnorm running stats) are checkpointed but never
/// updated by the optimizer.
struct Param {
  std::string name;
  Tensor value;
  float weight_decay = 0.0f;
  bool trainable = true;
};

class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor value, float weight_decay = 0.0f,
             bool trainable = true);
  Param* find(const std::string& name);
  std::vector<Param>& all() { return params_; }
  const std::vector<Param>& all() const { return params_; }
  std::int64_t total_size() const;

  Checkpoint to_checkpoint() const;
  /// Copies values from a checkpoint into the registered tensors; every
  /// registered name must be present with a matching shape.
  void load_checkpoint(const Checkpoint& ck);

 private:
  std::vector<Param> params_;
  std::unordered_map<std::string, int> by_name_;
};

struct LayerConfig {
  int hidden_dim = 32;
  int heads = 4;
};

/// Records an identity with a new shape (same element count).
Tensor reshape(Tape& tape, const Tensor& x, std::vector<int> shape);

/// Repeats a 1×d row n times (differentiable broadcast).
Tensor broadcast_rows(Tape& tape, const Tensor& row, int n);

class Linear {
 public:
  static Linear make(ParamStore& store, const std::string& name, int in_dim,
                     int out_dim, std::mt19937& rng, float weight_decay = 0.0f);
  Tensor forward(Tape& tape, const Tensor& x) const;
  int out_dim() const { return w_.shape[1]; }

 private:
  Tensor w_, b_;
};

/// linear -> GELU -> batchnorm, repeated per layer.
class MLPBlock {
 public:
  static MLPBlock make(ParamStore& store, const std::string& name,
                       std::vector<int> dims, std::mt19937& rng);
  Tensor forward(Tape& tape, const Tensor& x, LayerContext& ctx) const;
  int out_dim() const { return layers_.back().out_dim(); }

 private:
  std::vector<Linear> layers_;
  std::vector<Tensor> bn_gamma_, bn_beta_;
  std::vector<std::shared_ptr<std::vector<float>>> bn_mean_, bn_var_;
  std::vector<Tensor> bn_mean_param_, bn_var_param_;  // checkpoint handles
};

/// Multihead attention block: out = LN(H + rFF(H)), H = LN(X + MH(X, Y, Y)).
/// The no-attention ablation replaces MH by (X W_Q + X W_K + X W_V) W_O.
class MAB {
 public:
  static MAB make(ParamStore& store, const std::string& name, int dim,
                  int heads, std::mt19937& rng, bool no_attention = false,
                  float weight_decay = 0.0f);
  Tensor forward(Tape& tape, const Tensor& x, const Tensor& y,
                 LayerContext& ctx) const;
  /// The raw attention weights of one head (rows sum to 1); test hook.
  Tensor attention_weights(Tape& tape, const Tensor& x, const Tensor& y,
                           int head) const;

 private:
  Tensor multihead(Tape& tape, const Tensor& x, const Tensor& y,
                   LayerContext& ctx) const;
  int dim_ = 0, heads_ = 0;
  bool no_attention_ = false;
  Tensor wq_, wk_, wv_, wo_;
  Tensor ln1_g_, ln1_b_, ln2_g_, ln2_b_;
  Tensor ff1_w_, ff1_b_, ff2_w_, ff2_b_;
};

/// Where an ISAB's inducing points come from.
struct InducingSource {
  enum class Kind { learned, fps_sampled };
  Kind kind = Kind::learned;
  int m = 16;             // learned: number of inducing points
  double ratio = 0.0005;  // fps_sampled
  int min_count = 16;     // fps_sampled
  static InducingSource learned(int m) { return {Kind::learned, m, 0, 0}; }
  static InducingSource fps(double ratio, int min_count) {
    return {Kind::fps_sampled, 0, ratio, min_count};
  }
};

/// ISAB_m(X) = MAB(X, H) with H = MAB(I, X). FPS-sampled inducing points are
/// re-selected from the layer's input on every forward pass.
class ISAB {
 public:
  static ISAB make(ParamStore& store, const std::string& name, int dim,
                   int heads, InducingSource src, std::mt19937& rng,
                   bool no_attention = false);
  Tensor forward(Tape& tape, const Tensor& x, LayerContext& ctx) const;
  const Tensor& inducing_points() const { return inducing_; }

 private:
  InducingSource src_;
  bool no_attention_ = false;
  Tensor inducing_;  // learned only
  MAB mab0_, mab1_;
};

/// Linear attention with phi = ReLU, computed in the rearranged
/// O(n d^2) order phi(Q)[phi(K)^T V] / phi(Q)[phi(K)^T 1]; denominator
/// floored at 1e-6.
Tensor relu_linear_attention(Tape& tape, const Tensor& q, const Tensor& k,
                             const Tensor& v);

enum class AggregateMode { mean, max, pma };
AggregateMode aggregate_mode_from_name(const std::string& name);

/// PMA with one trainable seed vector and one attention head over rFF(X).
class PMA {
 public:
  static PMA make(ParamStore& store, const std::string& name, int dim,
                  std::mt19937& rng);
  Tensor forward(Tape& tape, const Tensor& x, LayerContext& ctx) const;

 private:
  Tensor seed_;
  Tensor ff_w_, ff_b_, ff2_w_, ff2_b_;
  MAB mab_;
};

/// Column-wise set summary, 1×d. The PMA parameters live in `pma` when the
/// mode needs them.
Tensor global_aggregate(Tape& tape, const Tensor& x, AggregateMode mode,
                        const PMA* pma, LayerContext& ctx);

/// Per-event encoder + max-pooled global vector, concatenated per event and
/// passed through a segmentation trunk; the caller adds the logit head.
class PointNet {
 public:
  static PointNet make(ParamStore& store, const std::string& name, int in_dim,
                       bool adapted, int out_dim, std::mt19937& rng);
  Tensor forward(Tape& tape, const Tensor& x, LayerContext& ctx) const;
  int concat_width() const { return concat_width_; }

 private:
  bool adapted_ = false;
  int concat_width_ = 0;
  Linear enc1_, enc2_, global_, seg1_, seg2_;
};

/// Generic directed edge list (dst is a neighbor of src).
struct EdgeList {
  int n_nodes = 0;
  std::vector<std::pair<int, int>> edges;
  static EdgeList from(const KnnGraph& g) { return {g.n_nodes, g.edges}; }
};

enum class GnnKind { gcn, gat, gin };

/// One message-passing layer; GAT carries weight decay 0.2 and dropout 0.2
/// on its attention coefficients (train mode).
class GnnLayer {
 public:
  static GnnLayer make(ParamStore& store, const std::string& name,
                       GnnKind kind, int in_dim, int out_dim,
                       std::mt19937& rng);
  Tensor forward(Tape& tape, const Tensor& x, const EdgeList& graph,
                 LayerContext& ctx) const;
  /// GAT attention coefficients per aggregation edge (test hook); segments
  /// returns the receiving node of each coefficient.
  Tensor gat_coefficients(Tape& tape, const Tensor& x, const EdgeList& graph,
                          std::vector<int>* segments) const;

 private:
  GnnKind kind_ = GnnKind::gcn;
  Tensor w_, b_;           // gcn/gat projection
  Tensor a_src_, a_dst_;   // gat attention vectors
  Tensor eps_;             // gin
  Linear gin1_, gin2_;     // gin MLP
};

/// ASAP-style pooling: 1-hop ego-network clusters scored by a membership
/// attention, cluster fitness by a sigmoid-squashed linear score, top
/// `target_nodes` clusters kept. Soft assignments are retained for unpooling.
struct AsapResult {
  int n_events = 0;               // input rows of this stage
  Tensor pooled;                  // target × d
  EdgeList pooled_graph;          // clusters sharing a member are connected
  std::vector<int> member_event;  // assignment triples: event row ...
  std::vector<int> member_cluster;  // ... pooled cluster column ...
  Tensor memberships;               // ... soft weight (|triples| × 1)
  std::vector<int> centers;       // input row of each kept cluster's center
};

class AsapPool {
 public:
  static AsapPool make(ParamStore& store, const std::string& name, int dim,
                       std::mt19937& rng);
  AsapResult forward(Tape& tape, const Tensor& x, const EdgeList& graph,
                     int target_nodes, LayerContext& ctx) const;

 private:
  Tensor w_, a_src_, a_dst_, fit_w_, fit_b_;
};

/// Distributes pooled per-cluster values back to events through the stage's
/// soft assignment, renormalizing each event's weights to sum to 1. Events
/// covered by no kept cluster inherit their nearest kept center's value.
/// Applying stages in reverse order composes the assignment chain. The
/// nearest-center fallback is already encoded in the stage's triples.
Tensor asap_unpool(Tape& tape, const Tensor& pooled_values,
                   const AsapResult& stage);

}  // namespace cyto
