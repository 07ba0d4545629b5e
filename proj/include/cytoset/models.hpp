#pragma once

#include "cytoset/dataset.hpp"
#include "cytoset/layers.hpp"

#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace cyto {

/// Declarative model description. `input_dim` is the node-feature width the
/// model is built for (canonical markers minus any mask) and must be set
/// before build.
struct ModelConfig {
  std::string architecture = "st";
  int layers = 4;
  int hidden_dim = 32;
  int heads = 4;
  int k = 10;  // kNN neighbors; the "-3" variants force 3
  double fps_ratio = 0.0005;
  int fps_min_count = 16;
  std::uint64_t seed = 0;
  int input_dim = 0;
};

/// All 20 architecture names, in the catalog order.
const std::vector<std::string>& architecture_zoo();
bool architecture_needs_graph(const std::string& name);

/// A built network: ordered stages plus a single linear logit head.
class Model {
 public:
  static Model build(const ModelConfig& cfg);

  /// Per-event logits (n×1). `graph` is required for graph architectures
  /// and ignored otherwise.
  Tensor forward(Tape& tape, const Tensor& x, const EdgeList* graph,
                 LayerContext& ctx);

  /// Pre-head per-event activations captured by the latest forward call.
  const Tensor& last_activations() const { return last_activations_; }

  bool needs_graph() const;
  int knn_k() const;
  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return *store_; }
  const ParamStore& params() const { return *store_; }

  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  enum class Kind { mlp, pointnet, set, gnn, asap, gnn_st_fps };
  struct ReluBlock;  // reluFormer encoder block

  ModelConfig cfg_;
  Kind kind_ = Kind::mlp;
  std::shared_ptr<ParamStore> store_;

  std::optional<MLPBlock> trunk_;
  std::optional<AggregateMode> aggregate_;
  std::optional<PMA> pma_;
  std::optional<PointNet> pointnet_;
  std::optional<Linear> input_proj_;
  std::vector<ISAB> isabs_;
  std::vector<std::shared_ptr<ReluBlock>> relu_blocks_;
  std::vector<GnnLayer> gnns_;
  std::optional<AsapPool> pool1_, pool2_;
  std::optional<Linear> concat_proj_;
  std::optional<Linear> head_;

  Tensor last_activations_;
};

/// Node-feature matrix for one sample: standardized canonical markers with
/// the masked ones removed. Errors name unknown mask entries.
std::vector<float> masked_node_features(const FcmDataset& ds, int sample_idx,
                                        const std::vector<std::string>& mask,
                                        int* out_cols);

/// Whole-sample forward pass. Graphs are built over ALL of the sample's own
/// features (masked markers included) and memoized in `graph_cache` when
/// one is supplied (keyed by sample index).
Tensor forward_sample(Model& model, Tape& tape, const FcmDataset& ds,
                      int sample_idx, const std::vector<std::string>& mask,
                      LayerContext& ctx,
                      std::unordered_map<int, EdgeList>* graph_cache);

}  // namespace cyto
