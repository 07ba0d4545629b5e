#include "doctest.h"

#include "cytoset/synth.hpp"
#include "cytoset/training.hpp"

#include <cmath>
#include <cstdio>
#include <set>

using namespace cyto;

namespace {

FcmDataset separable_dataset(std::uint64_t seed = 13) {
  SynthConfig cfg;
  cfg.n_events = 300;
  cfg.n_features = 5;
  cfg.n_healthy_clusters = 2;
  cfg.blast_fraction = 0.1;
  cfg.population_shift_scale = 0.0;
  cfg.blast_offset_lo = 8.0f;
  cfg.blast_offset_hi = 10.0f;
  return generate_dataset(cfg, 8, seed);
}

Model mlp_model(const FcmDataset& ds, std::uint64_t seed = 7) {
  ModelConfig cfg;
  cfg.architecture = "mlp";
  cfg.input_dim = static_cast<int>(ds.canonical_markers.size());
  cfg.layers = 2;
  cfg.seed = seed;
  return Model::build(cfg);
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.seed = 3;
  // only two parameter updates per epoch at this scale, so a larger step
  cfg.lr = 0.01;
  cfg.lr_min = 0.002;
  return cfg;
}

}  // namespace

TEST_CASE("cosine schedule hits the pinned values in both modes") {
  TrainConfig cfg;  // lr 1e-3, lr_min 2e-4, T = 10
  cfg.cosine_restart = true;
  CHECK(cosine_lr(0, cfg) == doctest::Approx(0.001));
  CHECK(cosine_lr(5, cfg) == doctest::Approx(0.0006));
  CHECK(cosine_lr(10, cfg) == doctest::Approx(0.001));  // restart
  CHECK(cosine_lr(15, cfg) == doctest::Approx(0.0006));

  cfg.cosine_restart = false;
  CHECK(cosine_lr(0, cfg) == doctest::Approx(0.001));
  CHECK(cosine_lr(5, cfg) == doctest::Approx(0.0006));
  CHECK(cosine_lr(10, cfg) == doctest::Approx(0.0002));  // clamped
  CHECK(cosine_lr(37, cfg) == doctest::Approx(0.0002));
}

TEST_CASE("adamw: zero gradient leaves only the decoupled decay") {
  ParamStore store;
  std::mt19937 rng(1);
  Tensor decayed = store.add("w", Tensor::uniform({2, 3}, -1, 1, rng), 0.2f);
  Tensor plain = store.add("b", Tensor::uniform({1, 3}, -1, 1, rng), 0.0f);
  const std::vector<float> w0 = decayed.data();
  const std::vector<float> b0 = plain.data();

  Tape tape;  // nothing recorded: every gradient is zero
  AdamW opt;
  opt.step(store, tape, 0.001);
  for (std::size_t i = 0; i < w0.size(); ++i)
    CHECK(decayed.data()[i] ==
          doctest::Approx(w0[i] * (1.0 - 0.0002)).epsilon(1e-7));
  CHECK(plain.data() == b0);  // wd = 0: bitwise unchanged
}

TEST_CASE("adamw: two hand-traced steps with a constant unit gradient") {
  // theta0 = 0.5, g = 1 each step, lr = 0.1: bias correction makes both
  // steps move by ~lr, so theta2 ~ 0.3.
  ParamStore store;
  Tensor p = store.add("w", Tensor::from({1, 1}, {0.5f}));
  AdamW opt;
  for (int step = 0; step < 2; ++step) {
    Tape tape;
    Tensor loss = tape.reduce_sum(p, -1);  // d loss / d w = 1
    tape.backward(loss);
    opt.step(store, tape, 0.1);
  }
  // m1 = 0.1, v1 = 1e-3, mhat = vhat = 1 -> step ~ 0.1/(1 + 1e-8)
  // m2 = 0.19, v2 = 1.999e-3, mhat = vhat = 1 again
  CHECK(p.data()[0] == doctest::Approx(0.3).epsilon(1e-6));
}

TEST_CASE("make_batch: clamping, distinctness, jitter and smoothing") {
  FcmDataset ds = separable_dataset();
  const int idx = ds.sample_indices(Split::train)[0];
  const int n = ds.samples[idx].n_events();

  TrainConfig cfg;
  cfg.jitter_scale = 0.0;
  std::mt19937 rng(5);

  // n < events_per_sample: every event is used, in natural order
  std::vector<BatchSample> full = make_batch(ds, {idx}, cfg, rng);
  REQUIRE(full.size() == 1);
  REQUIRE(static_cast<int>(full[0].rows.size()) == n);
  for (int i = 0; i < n; ++i) CHECK(full[0].rows[i] == i);

  // zero jitter: features equal the standardized sample exactly
  std::vector<float> z = ds.standardized_features(idx);
  CHECK(full[0].x.data() == z);

  // label smoothing eps = 0.1 -> targets in {0.05, 0.95}
  for (int e = 0; e < n; ++e) {
    const float t = full[0].targets.data()[e];
    CHECK((t == 0.05f || t == 0.95f));
    CHECK((t > 0.5f) == (ds.samples[idx].labels[e] != 0));
  }

  // subsampling draws distinct rows without replacement
  cfg.events_per_sample = 77;
  std::vector<BatchSample> sub = make_batch(ds, {idx}, cfg, rng);
  REQUIRE(sub[0].rows.size() == 77);
  std::set<int> uniq(sub[0].rows.begin(), sub[0].rows.end());
  CHECK(uniq.size() == 77);
  for (int r : uniq) CHECK((0 <= r && r < n));

  // nonzero jitter perturbs the features
  cfg.events_per_sample = 1 << 20;
  cfg.jitter_scale = 0.01;
  std::vector<BatchSample> jit = make_batch(ds, {idx}, cfg, rng);
  CHECK(jit[0].x.data() != z);
}

TEST_CASE("training separates an easy dataset within 30 epochs") {
  FcmDataset ds = separable_dataset();
  Model model = mlp_model(ds);
  TrainConfig cfg = quick_config();
  cfg.log_path = "/tmp/cytoset_train_log.jsonl";
  cfg.checkpoint_path = "/tmp/cytoset_train_best.ckpt";
  TrainReport report = train(model, ds, cfg);

  REQUIRE(static_cast<int>(report.epochs.size()) == cfg.epochs);
  CHECK(report.best_val_f1 >= 0.99);
  CHECK(report.best_epoch >= 0);

  // the logged lr follows the cosine schedule exactly
  for (const EpochLog& e : report.epochs)
    CHECK(e.lr == doctest::Approx(cosine_lr(e.epoch, cfg)).epsilon(1e-12));

  // the model holds the best checkpoint: re-evaluating reproduces the
  // logged validation F1
  MetricsReport val = evaluate(model, ds, Split::val);
  CHECK(std::abs(val.mean_f1 - report.best_val_f1) < 1e-6);

  // ... and the saved checkpoint restores the same parameters
  Model fresh = mlp_model(ds, 999);
  fresh.load(report.checkpoint_path);
  MetricsReport val2 = evaluate(fresh, ds, Split::val);
  CHECK(std::abs(val2.mean_f1 - report.best_val_f1) < 1e-6);

  std::remove(cfg.log_path.c_str());
  std::remove(cfg.checkpoint_path.c_str());
}

TEST_CASE("fixed seeds reproduce the training run bitwise") {
  FcmDataset ds = separable_dataset();
  TrainConfig cfg = quick_config();
  cfg.epochs = 6;
  Model a = mlp_model(ds), b = mlp_model(ds);
  TrainReport ra = train(a, ds, cfg);
  TrainReport rb = train(b, ds, cfg);
  REQUIRE(ra.epochs.size() == rb.epochs.size());
  for (std::size_t i = 0; i < ra.epochs.size(); ++i) {
    CHECK(ra.epochs[i].train_loss == rb.epochs[i].train_loss);
    CHECK(ra.epochs[i].val_mean_f1 == rb.epochs[i].val_mean_f1);
  }
  CHECK(ra.best_epoch == rb.best_epoch);
  for (std::size_t i = 0; i < a.params().all().size(); ++i)
    CHECK(a.params().all()[i].value.data() ==
          b.params().all()[i].value.data());
}

TEST_CASE("a tiny-lr step decreases the loss on its own batch") {
  FcmDataset ds = separable_dataset();
  for (int trial = 0; trial < 10; ++trial) {
    Model model = mlp_model(ds, 100 + trial);
    TrainConfig cfg;
    cfg.jitter_scale = 0.0;
    std::mt19937 rng(trial);
    std::vector<BatchSample> batch =
        make_batch(ds, ds.sample_indices(Split::train), cfg, rng);

    auto batch_loss = [&](Tape& tape) {
      LayerContext ctx;  // eval-mode forward keeps the comparison exact
      Tensor total;
      for (const BatchSample& b : batch) {
        Tensor logits = model.forward(tape, b.x, nullptr, ctx);
        Tensor l = tape.reduce_mean(tape.bce_logits(logits, b.targets), -1);
        total = total.size() == 0 ? l : tape.add(total, l);
      }
      return tape.scale(total, 1.0f / batch.size());
    };

    Tape t1;
    Tensor before = batch_loss(t1);
    t1.backward(before);
    AdamW opt;
    opt.step(model.params(), t1, 1e-5);
    Tape t2(false);
    Tensor after = batch_loss(t2);
    CAPTURE(trial);
    CHECK(after.item() < before.item());
  }
}

TEST_CASE("a diverging run aborts with a located numeric error") {
  FcmDataset ds = separable_dataset();
  Model model = mlp_model(ds);
  TrainConfig cfg = quick_config();
  cfg.epochs = 8;
  cfg.lr = 1e25;  // guarantees overflow within a few updates
  cfg.lr_min = 1e25;
  try {
    train(model, ds, cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch") != std::string::npos);
    CHECK(msg.find("batch") != std::string::npos);
  }
}
