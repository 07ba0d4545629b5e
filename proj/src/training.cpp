#include "cytoset/training.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace cyto {

double cosine_lr(int t, const TrainConfig& cfg) {
  if (t < 0) throw DataError("cosine_lr: negative epoch");
  const int T = cfg.cosine_T;
  if (!cfg.cosine_restart && t >= T) return cfg.lr_min;
  const double phase = double(t % T) / T;
  return cfg.lr_min +
         0.5 * (cfg.lr - cfg.lr_min) * (1.0 + std::cos(M_PI * phase));
}

AdamW::AdamW(double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(ParamStore& params, Tape& tape, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (Param& p : params.all()) {
    if (!p.trainable) continue;
    Tensor g = tape.grad(p.value);
    auto& [m, v] = state_[p.value.store.get()];
    if (m.empty()) {
      m.assign(p.value.size(), 0.0f);
      v.assign(p.value.size(), 0.0f);
    }
    auto& theta = p.value.data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g.data()[i];
      m[i] = static_cast<float>(beta1_ * m[i] + (1.0 - beta1_) * gi);
      v[i] = static_cast<float>(beta2_ * v[i] + (1.0 - beta2_) * gi * gi);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      const double decay = lr * p.weight_decay * theta[i];  // decoupled
      theta[i] = static_cast<float>(theta[i] -
                                    lr * mhat / (std::sqrt(vhat) + eps_) -
                                    decay);
    }
  }
}

std::vector<BatchSample> make_batch(const FcmDataset& ds,
                                    const std::vector<int>& sample_indices,
                                    const TrainConfig& cfg,
                                    std::mt19937& rng) {
  std::vector<BatchSample> out;
  for (int idx : sample_indices) {
    const FcmSample& s = ds.samples[idx];
    if (s.n_events() < 1)
      throw DataError("make_batch: sample " + s.sample_id + " is empty");
    if (!s.has_labels())
      throw DataError("make_batch: sample " + s.sample_id + " is unlabeled");
    const int n = s.n_events();
    const int take = std::min(n, cfg.events_per_sample);

    BatchSample b;
    b.sample_idx = idx;
    if (take == n) {
      b.rows.resize(n);
      for (int i = 0; i < n; ++i) b.rows[i] = i;
    } else {
      // partial Fisher-Yates: first `take` entries are a uniform
      // without-replacement draw
      std::vector<int> pool(n);
      for (int i = 0; i < n; ++i) pool[i] = i;
      for (int i = 0; i < take; ++i) {
        std::uniform_int_distribution<int> pick(i, n - 1);
        std::swap(pool[i], pool[pick(rng)]);
      }
      b.rows.assign(pool.begin(), pool.begin() + take);
    }

    int cols = 0;
    std::vector<float> full =
        masked_node_features(ds, idx, cfg.feature_mask, &cols);
    std::vector<float> feats(static_cast<std::size_t>(take) * cols);
    for (int i = 0; i < take; ++i)
      std::copy_n(full.begin() + std::int64_t(b.rows[i]) * cols, cols,
                  feats.begin() + std::int64_t(i) * cols);
    if (cfg.jitter_scale > 0) {
      std::normal_distribution<float> noise(
          0.0f, static_cast<float>(cfg.jitter_scale));
      for (auto& f : feats) f += noise(rng);
    }
    b.x = Tensor::from({take, cols}, std::move(feats));

    const float lo = static_cast<float>(cfg.label_smoothing_eps / 2);
    const float hi = 1.0f - lo;
    b.targets = Tensor::zeros({take, 1});
    for (int i = 0; i < take; ++i)
      b.targets.data()[i] = s.labels[b.rows[i]] ? hi : lo;
    out.push_back(std::move(b));
  }
  return out;
}

namespace {

/// Graph over the chosen rows, built on the un-jittered standardized full
/// feature space. Whole-sample graphs are memoized across epochs.
const EdgeList& training_graph(
    const FcmDataset& ds, const BatchSample& b, int k,
    std::unordered_map<int, EdgeList>& whole_cache, EdgeList& scratch) {
  const int n = ds.samples[b.sample_idx].n_events();
  const bool whole = static_cast<int>(b.rows.size()) == n;
  if (whole) {
    auto it = whole_cache.find(b.sample_idx);
    if (it == whole_cache.end()) {
      int cols = 0;
      std::vector<float> g =
          ds.standardized_full_features(b.sample_idx, &cols);
      it = whole_cache
               .emplace(b.sample_idx,
                        EdgeList::from(knn_graph(g.data(), n, cols, k)))
               .first;
    }
    return it->second;
  }
  int cols = 0;
  std::vector<float> g = ds.standardized_full_features(b.sample_idx, &cols);
  std::vector<float> sub(b.rows.size() * static_cast<std::size_t>(cols));
  for (std::size_t i = 0; i < b.rows.size(); ++i)
    std::copy_n(g.begin() + std::int64_t(b.rows[i]) * cols, cols,
                sub.begin() + std::int64_t(i) * cols);
  scratch = EdgeList::from(
      knn_graph(sub.data(), static_cast<int>(b.rows.size()), cols, k));
  return scratch;
}

}  // namespace

TrainReport train(Model& model, const FcmDataset& ds,
                  const TrainConfig& cfg) {
  const std::vector<int> train_idx = ds.sample_indices(Split::train);
  if (train_idx.empty() || ds.sample_indices(Split::val).empty())
    throw DataError("train: needs non-empty train and val splits");

  std::mt19937 rng(static_cast<std::uint32_t>(cfg.seed));
  AdamW opt;
  TrainReport report;
  Checkpoint best;
  std::unordered_map<int, EdgeList> graph_cache, eval_cache;
  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path);
    if (!log) throw DataError("train: cannot open log " + cfg.log_path);
  }

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg);
    std::vector<int> order = train_idx;
    std::shuffle(order.begin(), order.end(), rng);

    double epoch_loss = 0;
    int n_batches = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
      const std::vector<int> chunk(
          order.begin() + at,
          order.begin() + std::min(order.size(),
                                   at + static_cast<std::size_t>(
                                            cfg.batch_size)));
      std::vector<BatchSample> batch = make_batch(ds, chunk, cfg, rng);
      Tape tape;
      LayerContext ctx;
      ctx.train = true;
      ctx.rng = &rng;
      Tensor total;
      for (const BatchSample& b : batch) {
        const EdgeList* graph = nullptr;
        EdgeList scratch;
        if (model.needs_graph())
          graph = &training_graph(ds, b, model.knn_k(), graph_cache,
                                  scratch);
        Tensor logits = model.forward(tape, b.x, graph, ctx);
        Tensor loss =
            tape.reduce_mean(tape.bce_logits(logits, b.targets), -1);
        total = total.size() == 0 ? loss : tape.add(total, loss);
      }
      Tensor batch_loss =
          tape.scale(total, 1.0f / static_cast<float>(batch.size()));
      const double lval = batch_loss.item();
      if (!std::isfinite(lval))
        throw NumericError("train: non-finite loss at epoch " +
                           std::to_string(epoch) + " batch " +
                           std::to_string(n_batches));
      tape.backward(batch_loss);
      opt.step(model.params(), tape, lr);
      epoch_loss += lval;
      ++n_batches;
    }

    MetricsReport val =
        evaluate(model, ds, Split::val, cfg.feature_mask, &eval_cache);
    EpochLog el{epoch, lr, epoch_loss / std::max(1, n_batches),
                val.mean_f1};
    report.epochs.push_back(el);
    if (log) {
      nlohmann::json j = {{"epoch", el.epoch},
                          {"lr", el.lr},
                          {"train_loss", el.train_loss},
                          {"val_mean_f1", el.val_mean_f1}};
      log << j.dump() << "\n" << std::flush;
    }
    if (el.val_mean_f1 > report.best_val_f1) {
      report.best_val_f1 = el.val_mean_f1;
      report.best_epoch = epoch;
      best = model.params().to_checkpoint();
    }
  }

  // leave the model holding the best-epoch parameters
  model.params().load_checkpoint(best);
  if (!cfg.checkpoint_path.empty()) {
    best.save(cfg.checkpoint_path);
    report.checkpoint_path = cfg.checkpoint_path;
  }
  return report;
}

}  // namespace cyto
