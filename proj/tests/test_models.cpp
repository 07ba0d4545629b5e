#include "doctest.h"

#include "cytoset/models.hpp"
#include "cytoset/synth.hpp"

#include <cmath>

using namespace cyto;

namespace {

FcmDataset tiny_dataset(int n_events = 64, int n_features = 5) {
  SynthConfig cfg;
  cfg.n_events = n_events;
  cfg.n_features = n_features;
  cfg.n_healthy_clusters = 2;
  cfg.blast_fraction = 0.05;
  return generate_dataset(cfg, 4, 21);
}

Tensor targets_for(const FcmSample& s) {
  Tensor t = Tensor::zeros({s.n_events(), 1});
  for (int e = 0; e < s.n_events(); ++e)
    t.data()[e] = s.labels[e] ? 0.95f : 0.05f;
  return t;
}

}  // namespace

TEST_CASE("the zoo lists 20 architectures and flags the graph ones") {
  CHECK(architecture_zoo().size() == 20);
  CHECK(architecture_needs_graph("gin-st-fps"));
  CHECK(architecture_needs_graph("gat-3"));
  CHECK_FALSE(architecture_needs_graph("st"));
  CHECK_FALSE(architecture_needs_graph("mlp-pma"));
}

TEST_CASE("every architecture builds, runs forward, and backpropagates") {
  FcmDataset ds = tiny_dataset();
  const int idx = ds.sample_indices(Split::train)[0];
  const FcmSample& sample = ds.samples[idx];
  std::unordered_map<int, EdgeList> cache3, cache10;

  for (const std::string& arch : architecture_zoo()) {
    CAPTURE(arch);
    ModelConfig cfg;
    cfg.architecture = arch;
    cfg.input_dim = static_cast<int>(ds.canonical_markers.size());
    cfg.fps_ratio = 0.1;
    cfg.fps_min_count = 4;
    cfg.seed = 3;
    Model model = Model::build(cfg);

    LayerContext ctx;
    Tape tape;
    Tensor logits = forward_sample(model, tape, ds, idx, {}, ctx,
                                   model.knn_k() == 3 ? &cache3 : &cache10);
    REQUIRE(logits.shape == std::vector<int>{sample.n_events(), 1});
    for (float v : logits.data()) REQUIRE(std::isfinite(v));
    CHECK(model.last_activations().rows() == sample.n_events());

    Tensor loss = tape.reduce_mean(
        tape.bce_logits(logits, targets_for(sample)), -1);
    REQUIRE(std::isfinite(loss.item()));
    tape.backward(loss);
    // at least one trainable parameter received a finite, nonzero gradient
    bool any_nonzero = false;
    for (auto& p : model.params().all()) {
      if (!p.trainable) continue;
      Tensor g = tape.grad(p.value);
      for (float v : g.data()) {
        REQUIRE(std::isfinite(v));
        if (v != 0.0f) any_nonzero = true;
      }
    }
    CHECK(any_nonzero);
  }
}

TEST_CASE("identical config and seed build bitwise-identical parameters") {
  ModelConfig cfg;
  cfg.architecture = "st";
  cfg.input_dim = 7;
  cfg.seed = 11;
  Model a = Model::build(cfg), b = Model::build(cfg);
  REQUIRE(a.params().all().size() == b.params().all().size());
  for (std::size_t i = 0; i < a.params().all().size(); ++i) {
    CHECK(a.params().all()[i].name == b.params().all()[i].name);
    CHECK(a.params().all()[i].value.data() ==
          b.params().all()[i].value.data());
  }
}

TEST_CASE("bad configs are rejected") {
  ModelConfig cfg;
  cfg.architecture = "transformer-xl";
  cfg.input_dim = 4;
  CHECK_THROWS_AS(Model::build(cfg), DataError);
  cfg.architecture = "st";
  cfg.hidden_dim = 30;  // not divisible by 4 heads
  CHECK_THROWS_AS(Model::build(cfg), DataError);
  cfg.hidden_dim = 32;
  cfg.input_dim = 0;
  CHECK_THROWS_AS(Model::build(cfg), DataError);
}

TEST_CASE("the -3 variants force k=3") {
  ModelConfig cfg;
  cfg.architecture = "gin-3";
  cfg.input_dim = 4;
  CHECK(Model::build(cfg).knn_k() == 3);
  cfg.architecture = "gin";
  CHECK(Model::build(cfg).knn_k() == 10);
}

TEST_CASE("plain mlp logits ignore the rest of the sample") {
  FcmDataset ds = tiny_dataset();
  const int idx = ds.sample_indices(Split::train)[0];
  ModelConfig cfg;
  cfg.architecture = "mlp";
  cfg.input_dim = static_cast<int>(ds.canonical_markers.size());
  cfg.seed = 5;
  Model model = Model::build(cfg);

  LayerContext ctx;
  std::vector<float> feats = ds.standardized_features(idx);
  const int n = ds.samples[idx].n_events();
  const int f = static_cast<int>(ds.canonical_markers.size());
  Tensor x = Tensor::from({n, f}, feats);
  Tape t1;
  Tensor out = model.forward(t1, x, nullptr, ctx);

  // scramble every event except row 0
  Tensor x2 = x;
  x2.store = std::make_shared<std::vector<float>>(*x.store);
  for (std::size_t i = f; i < x2.data().size(); ++i) x2.data()[i] *= -1.3f;
  Tape t2;
  Tensor out2 = model.forward(t2, x2, nullptr, ctx);
  CHECK(out.data()[0] == doctest::Approx(out2.data()[0]).epsilon(1e-6));
}

TEST_CASE("global-context architectures react to the rest of the sample") {
  FcmDataset ds = tiny_dataset();
  const int idx = ds.sample_indices(Split::train)[0];
  ModelConfig cfg;
  cfg.architecture = "mlp-mean";
  cfg.input_dim = static_cast<int>(ds.canonical_markers.size());
  cfg.seed = 5;
  Model model = Model::build(cfg);

  LayerContext ctx;
  const int n = ds.samples[idx].n_events();
  const int f = cfg.input_dim;
  Tensor x = Tensor::from({n, f}, ds.standardized_features(idx));
  Tape t1;
  Tensor out = model.forward(t1, x, nullptr, ctx);
  Tensor x2 = x;
  x2.store = std::make_shared<std::vector<float>>(*x.store);
  for (std::size_t i = f; i < x2.data().size(); ++i) x2.data()[i] *= -1.3f;
  Tape t2;
  Tensor out2 = model.forward(t2, x2, nullptr, ctx);
  CHECK(std::abs(out.data()[0] - out2.data()[0]) > 1e-6);
}

TEST_CASE("feature mask drops node inputs but keeps the graph complete") {
  FcmDataset ds = tiny_dataset();
  const int idx = ds.sample_indices(Split::train)[0];
  const std::vector<std::string> mask{ds.canonical_markers[0],
                                      ds.canonical_markers[2]};
  int cols = 0;
  std::vector<float> feats = masked_node_features(ds, idx, mask, &cols);
  CHECK(cols == static_cast<int>(ds.canonical_markers.size()) - 2);
  // masked columns really removed: remaining columns match the unmasked ones
  std::vector<float> full = ds.standardized_features(idx);
  const int fc = static_cast<int>(ds.canonical_markers.size());
  CHECK(feats[0] == full[1]);  // first kept canonical marker is index 1
  CHECK(feats[1] == full[3]);
  CHECK(feats[cols] == full[fc + 1]);

  ModelConfig cfg;
  cfg.architecture = "gin";
  cfg.input_dim = cols;
  cfg.seed = 1;
  Model model = Model::build(cfg);
  LayerContext ctx;
  std::unordered_map<int, EdgeList> cache;
  Tape tape(false);
  Tensor out = forward_sample(model, tape, ds, idx, mask, ctx, &cache);
  CHECK(out.rows() == ds.samples[idx].n_events());
  // graph was built over ALL features (the full marker set), not cols
  CHECK(cache.at(idx).n_nodes == ds.samples[idx].n_events());

  CHECK_THROWS_AS(masked_node_features(ds, idx, {"NOPE"}, &cols), DataError);
  CHECK_THROWS_AS(masked_node_features(ds, idx, ds.canonical_markers, &cols),
                  DataError);
}

TEST_CASE("st-fps handles a single-event sample") {
  ModelConfig cfg;
  cfg.architecture = "st-fps";
  cfg.input_dim = 3;
  cfg.seed = 2;
  Model model = Model::build(cfg);
  LayerContext ctx;
  Tape tape(false);
  std::mt19937 rng(1);
  Tensor x = Tensor::uniform({1, 3}, -1, 1, rng);
  Tensor out = model.forward(tape, x, nullptr, ctx);
  CHECK(out.shape == std::vector<int>{1, 1});
  CHECK(std::isfinite(out.data()[0]));
}

TEST_CASE("model checkpoints round-trip through save/load") {
  ModelConfig cfg;
  cfg.architecture = "gin-st-fps";
  cfg.input_dim = 5;
  cfg.seed = 8;
  Model a = Model::build(cfg);
  const std::string path = "/tmp/cytoset_model_test.ckpt";
  a.save(path);
  cfg.seed = 99;  // different init, then overwritten by load
  Model b = Model::build(cfg);
  b.load(path);
  for (std::size_t i = 0; i < a.params().all().size(); ++i)
    CHECK(a.params().all()[i].value.data() ==
          b.params().all()[i].value.data());
  std::remove(path.c_str());
}
