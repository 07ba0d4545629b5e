// cytoset: command-line driver for the set-learning toolkit.
//
// Commands: synth, ingest, train, eval, cross-eval, mask-eval, zoo,
// pca-export, gradcheck. Exit codes: 0 success, 1 usage error, 2 data
// error, 3 numerical failure. Flag > config-file > default precedence;
// every run writes its fully-resolved configuration into --out.

#include "cytoset/gradcheck.hpp"
#include "cytoset/metrics.hpp"
#include "cytoset/synth.hpp"
#include "cytoset/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace cyto;

namespace {

// ---------------------------------------------------------------- plumbing

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw DataError("config: cannot open " + path);
  try {
    json j;
    is >> j;
    if (!j.is_object()) throw DataError("config: " + path + " is not an object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("config: invalid JSON in " + path + ": " + e.what());
  }
}

/// Applies a config-file value to `var` unless the flag was given on the
/// command line (flag > file > default).
template <typename T>
void merge_key(CLI::App* cmd, const json& file, const std::string& key,
               T& var) {
  if (!file.contains(key)) return;
  if (cmd->count("--" + key) > 0) return;
  try {
    var = file.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw DataError("config: key '" + key + "' has the wrong type");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

fs::path prepare_out(const std::string& out) {
  if (out.empty()) throw CLI::ValidationError("--out", "output directory required");
  fs::create_directories(out);
  return fs::path(out);
}

// Options shared by every command that builds a model.
struct ModelOpts {
  std::string arch = "st";
  int layers = 4;
  int hidden = 32;
  int heads = 4;
  int k = 10;
  double fps_ratio = 0.0005;
  int fps_min_count = 16;

  void attach(CLI::App* cmd) {
    cmd->add_option("--arch", arch, "architecture name (see `zoo`)");
    cmd->add_option("--layers", layers, "trunk depth");
    cmd->add_option("--hidden", hidden, "hidden width");
    cmd->add_option("--heads", heads, "attention heads");
    cmd->add_option("--k", k, "kNN neighbors for graph architectures");
    cmd->add_option("--fps-ratio", fps_ratio, "FPS inducing-point ratio");
    cmd->add_option("--fps-min-count", fps_min_count,
                    "FPS inducing-point floor");
  }
  void merge(CLI::App* cmd, const json& file) {
    merge_key(cmd, file, "arch", arch);
    merge_key(cmd, file, "layers", layers);
    merge_key(cmd, file, "hidden", hidden);
    merge_key(cmd, file, "heads", heads);
    merge_key(cmd, file, "k", k);
    merge_key(cmd, file, "fps-ratio", fps_ratio);
    merge_key(cmd, file, "fps-min-count", fps_min_count);
  }
  ModelConfig resolve(int input_dim, std::uint64_t seed) const {
    ModelConfig mc;
    mc.architecture = arch;
    mc.layers = layers;
    mc.hidden_dim = hidden;
    mc.heads = heads;
    mc.k = k;
    mc.fps_ratio = fps_ratio;
    mc.fps_min_count = fps_min_count;
    mc.seed = seed;
    mc.input_dim = input_dim;
    return mc;
  }
  json to_json() const {
    return {{"arch", arch},           {"layers", layers},
            {"hidden", hidden},       {"heads", heads},
            {"k", k},                 {"fps-ratio", fps_ratio},
            {"fps-min-count", fps_min_count}};
  }
};

void write_metrics(const fs::path& out, const MetricsReport& report) {
  write_text(out / "metrics.json", report.to_json() + "\n");
  write_text(out / "metrics.txt", report.to_table());
  std::cout << report.to_table();
}

int mask_input_dim(const FcmDataset& ds,
                   const std::vector<std::string>& mask) {
  return static_cast<int>(ds.canonical_markers.size() - mask.size());
}

// ---------------------------------------------------------------- commands

struct SynthCmd {
  std::string out, config;
  int samples = 40;
  int events = 5000;
  int features = 10;
  int clusters = 4;
  double blast_fraction = 0.01;
  double shift = 1.0;
  std::uint64_t seed = 0;

  CLI::App* cmd = nullptr;
  void attach(CLI::App& app) {
    cmd = app.add_subcommand("synth", "generate a synthetic dataset");
    cmd->add_option("--config", config, "JSON config file");
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--samples", samples, "number of samples");
    cmd->add_option("--events", events, "events per sample");
    cmd->add_option("--features", features, "markers per sample");
    cmd->add_option("--clusters", clusters, "healthy clusters");
    cmd->add_option("--blast-fraction", blast_fraction, "positive fraction");
    cmd->add_option("--shift", shift, "population shift scale");
    cmd->add_option("--seed", seed, "RNG seed");
  }

  int run() {
    const json file = load_config_file(config);
    merge_key(cmd, file, "out", out);
    merge_key(cmd, file, "samples", samples);
    merge_key(cmd, file, "events", events);
    merge_key(cmd, file, "features", features);
    merge_key(cmd, file, "clusters", clusters);
    merge_key(cmd, file, "blast-fraction", blast_fraction);
    merge_key(cmd, file, "shift", shift);
    merge_key(cmd, file, "seed", seed);
    const fs::path dir = prepare_out(out);

    SynthConfig sc;
    sc.n_events = events;
    sc.n_features = features;
    sc.n_healthy_clusters = clusters;
    sc.blast_fraction = blast_fraction;
    sc.population_shift_scale = shift;
    FcmDataset ds = generate_dataset(sc, samples, seed);

    json manifest;
    manifest["canonical_markers"] = ds.canonical_markers;
    manifest["label_column"] = "label";
    auto& arr = manifest["samples"] = json::array();
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "sample_%03zu.csv", i);
      std::ofstream os(dir / name);
      if (!os) throw DataError("cannot write " + (dir / name).string());
      write_csv_sample(ds.samples[i], os);
      arr.push_back({{"path", name},
                     {"id", ds.samples[i].sample_id},
                     {"split", split_name(ds.split[i])}});
    }
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");

    json resolved = {{"command", "synth"},
                     {"samples", samples},
                     {"events", events},
                     {"features", features},
                     {"clusters", clusters},
                     {"blast-fraction", blast_fraction},
                     {"shift", shift},
                     {"seed", seed}};
    write_text(dir / "config.json", resolved.dump(2) + "\n");
    std::cout << "wrote " << samples << " samples to " << dir.string()
              << "\n";
    return 0;
  }
};

struct IngestCmd {
  std::string out, config, data;
  std::uint64_t seed = 0;

  CLI::App* cmd = nullptr;
  void attach(CLI::App& app) {
    cmd = app.add_subcommand("ingest", "load and summarize a dataset");
    cmd->add_option("--config", config, "JSON config file");
    cmd->add_option("--data", data, "dataset manifest path");
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--seed", seed, "split seed");
  }

  int run() {
    const json file = load_config_file(config);
    merge_key(cmd, file, "data", data);
    merge_key(cmd, file, "out", out);
    merge_key(cmd, file, "seed", seed);
    if (data.empty()) throw CLI::ValidationError("--data", "manifest required");
    const fs::path dir = prepare_out(out);

    FcmDataset ds = build_dataset(data, seed);
    json summary;
    summary["n_samples"] = ds.samples.size();
    summary["canonical_markers"] = ds.canonical_markers;
    for (Split s : {Split::train, Split::val, Split::test})
      summary["split_sizes"][split_name(s)] = ds.sample_indices(s).size();
    auto& arr = summary["samples"] = json::array();
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      long positives = -1;
      if (ds.samples[i].has_labels()) {
        positives = 0;
        for (auto l : ds.samples[i].labels) positives += l != 0;
      }
      arr.push_back({{"id", ds.samples[i].sample_id},
                     {"events", ds.samples[i].n_events()},
                     {"markers", ds.samples[i].n_features()},
                     {"positives", positives},
                     {"split", split_name(ds.split[i])}});
    }
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    json resolved = {{"command", "ingest"}, {"data", data}, {"seed", seed}};
    write_text(dir / "config.json", resolved.dump(2) + "\n");
    std::cout << summary.dump(2) << "\n";
    return 0;
  }
};

struct TrainCmd {
  std::string out, config, data;
  ModelOpts model;
  std::vector<std::string> mask;
  int epochs = 150;
  int batch = 4;
  int events_per_sample = 50000;
  double lr = 1e-3, lr_min = 2e-4;
  int cosine_T = 10;
  bool clamp_schedule = false;
  double jitter = 0.01, label_smoothing = 0.1;
  std::uint64_t seed = 0;

  CLI::App* cmd = nullptr;
  void attach(CLI::App& app) {
    cmd = app.add_subcommand("train", "train one model");
    cmd->add_option("--config", config, "JSON config file");
    cmd->add_option("--data", data, "dataset manifest path");
    cmd->add_option("--out", out, "output directory");
    model.attach(cmd);
    cmd->add_option("--mask", mask, "markers removed from node inputs");
    cmd->add_option("--epochs", epochs, "training epochs");
    cmd->add_option("--batch", batch, "samples per batch");
    cmd->add_option("--events-per-sample", events_per_sample,
                    "subsample cap per sample per epoch");
    cmd->add_option("--lr", lr, "peak learning rate");
    cmd->add_option("--lr-min", lr_min, "cosine floor");
    cmd->add_option("--cosine-T", cosine_T, "cosine period (epochs)");
    cmd->add_flag("--clamp-schedule", clamp_schedule,
                  "hold lr-min after the first cycle instead of restarting");
    cmd->add_option("--jitter", jitter, "feature jitter sigma");
    cmd->add_option("--label-smoothing", label_smoothing, "epsilon");
    cmd->add_option("--seed", seed, "RNG seed");
  }

  TrainConfig resolve_training() const {
    TrainConfig tc;
    tc.batch_size = batch;
    tc.events_per_sample = events_per_sample;
    tc.epochs = epochs;
    tc.lr = lr;
    tc.lr_min = lr_min;
    tc.cosine_T = cosine_T;
    tc.cosine_restart = !clamp_schedule;
    tc.jitter_scale = jitter;
    tc.label_smoothing_eps = label_smoothing;
    tc.seed = seed;
    tc.feature_mask = mask;
    return tc;
  }

  void merge(const json& file) {
    merge_key(cmd, file, "data", data);
    merge_key(cmd, file, "out", out);
    model.merge(cmd, file);
    merge_key(cmd, file, "mask", mask);
    merge_key(cmd, file, "epochs", epochs);
    merge_key(cmd, file, "batch", batch);
    merge_key(cmd, file, "events-per-sample", events_per_sample);
    merge_key(cmd, file, "lr", lr);
    merge_key(cmd, file, "lr-min", lr_min);
    merge_key(cmd, file, "cosine-T", cosine_T);
    merge_key(cmd, file, "clamp-schedule", clamp_schedule);
    merge_key(cmd, file, "jitter", jitter);
    merge_key(cmd, file, "label-smoothing", label_smoothing);
    merge_key(cmd, file, "seed", seed);
  }

  json resolved_json(const char* command) const {
    json j = {{"command", command}, {"data", data}, {"seed", seed}};
    const json mj = model.to_json();
    for (auto& [k, v] : mj.items()) j[k] = v;
    j["mask"] = mask;
    j["epochs"] = epochs;
    j["batch"] = batch;
    j["events-per-sample"] = events_per_sample;
    j["lr"] = lr;
    j["lr-min"] = lr_min;
    j["cosine-T"] = cosine_T;
    j["clamp-schedule"] = clamp_schedule;
    j["jitter"] = jitter;
    j["label-smoothing"] = label_smoothing;
    return j;
  }

  int run() {
    merge(load_config_file(config));
    if (data.empty()) throw CLI::ValidationError("--data", "manifest required");
    const fs::path dir = prepare_out(out);

    FcmDataset ds = build_dataset(data, seed);
    Model m = Model::build(model.resolve(mask_input_dim(ds, mask), seed));
    TrainConfig tc = resolve_training();
    tc.checkpoint_path = (dir / "model.ckpt").string();
    tc.log_path = (dir / "train_log.jsonl").string();
    write_text(dir / "config.json", resolved_json("train").dump(2) + "\n");

    TrainReport report = train(m, ds, tc);
    json rj;
    rj["best_epoch"] = report.best_epoch;
    rj["best_val_f1"] = report.best_val_f1;
    rj["checkpoint"] = report.checkpoint_path;
    auto& arr = rj["epochs"] = json::array();
    for (const EpochLog& e : report.epochs)
      arr.push_back({{"epoch", e.epoch},
                     {"lr", e.lr},
                     {"train_loss", e.train_loss},
                     {"val_mean_f1", e.val_mean_f1}});
    write_text(dir / "train_report.json", rj.dump(2) + "\n");
    std::printf("best epoch %d  val mean F1 %.4f\n", report.best_epoch,
                report.best_val_f1);
    return 0;
  }
};

struct EvalCmd {
  std::string out, config, data, other, checkpoint, split = "test";
  std::vector<std::string> mask;
  int mask_top = 0;
  std::uint64_t seed = 0;
  ModelOpts model;
  int sample = 0;  // pca-export only
  enum class Mode { eval, cross, masked, pca } mode;

  CLI::App* cmd = nullptr;
  void attach(CLI::App& app, Mode m) {
    mode = m;
    const char* names[] = {"eval", "cross-eval", "mask-eval", "pca-export"};
    const char* helps[] = {"evaluate a checkpoint on one split",
                           "evaluate on a second dataset with the training "
                           "standardization",
                           "evaluate with markers masked from node inputs",
                           "export a 2-D PCA of pre-head activations"};
    cmd = app.add_subcommand(names[int(m)], helps[int(m)]);
    cmd->add_option("--config", config, "JSON config file");
    cmd->add_option("--data", data, "training dataset manifest");
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--checkpoint", checkpoint, "trained parameters");
    cmd->add_option("--seed", seed, "split/model seed");
    model.attach(cmd);
    if (m == Mode::cross)
      cmd->add_option("--other", other, "target dataset manifest");
    if (m == Mode::pca)
      cmd->add_option("--sample", sample, "sample index to project");
    else
      cmd->add_option("--split", split, "train|val|test");
    if (m == Mode::masked || m == Mode::eval) {
      cmd->add_option("--mask", mask, "markers removed from node inputs");
      if (m == Mode::masked)
        cmd->add_option("--mask-top", mask_top,
                        "mask the N most discriminative markers");
    }
  }

  int run() {
    const json file = load_config_file(config);
    merge_key(cmd, file, "data", data);
    merge_key(cmd, file, "out", out);
    merge_key(cmd, file, "checkpoint", checkpoint);
    merge_key(cmd, file, "seed", seed);
    model.merge(cmd, file);
    if (mode == Mode::cross) merge_key(cmd, file, "other", other);
    if (mode == Mode::pca)
      merge_key(cmd, file, "sample", sample);
    else
      merge_key(cmd, file, "split", split);
    if (mode == Mode::masked || mode == Mode::eval)
      merge_key(cmd, file, "mask", mask);
    if (data.empty()) throw CLI::ValidationError("--data", "manifest required");
    if (checkpoint.empty())
      throw CLI::ValidationError("--checkpoint", "checkpoint required");
    const fs::path dir = prepare_out(out);

    FcmDataset ds = build_dataset(data, seed);
    if (mode == Mode::masked && mask_top > 0) {
      if (!mask.empty())
        throw CLI::ValidationError("--mask-top",
                                   "use either --mask or --mask-top");
      mask = most_discriminative_markers(ds, mask_top);
    }
    Model m = Model::build(model.resolve(mask_input_dim(ds, mask), seed));
    m.load(checkpoint);

    json resolved = {{"command", cmd->get_name()},
                     {"data", data},
                     {"checkpoint", checkpoint},
                     {"seed", seed}};
    const json mj = model.to_json();
    for (auto& [k, v] : mj.items()) resolved[k] = v;

    if (mode == Mode::pca) {
      resolved["sample"] = sample;
      if (sample < 0 || sample >= static_cast<int>(ds.samples.size()))
        throw DataError("pca-export: sample index out of range");
      PcaProjection p = pca_features_export(m, ds, sample);
      std::ofstream os(dir / "pca.csv");
      if (!os) throw DataError("cannot write " + (dir / "pca.csv").string());
      os << "pc1,pc2,label\n";
      const bool labeled = !p.labels.empty();
      for (std::size_t i = 0; i * 2 < p.xy.size(); ++i)
        os << p.xy[2 * i] << "," << p.xy[2 * i + 1] << ","
           << (labeled ? int(p.labels[i]) : -1) << "\n";
      write_text(dir / "config.json", resolved.dump(2) + "\n");
      std::cout << "wrote " << (dir / "pca.csv").string() << "\n";
      return 0;
    }

    resolved["split"] = split;
    resolved["mask"] = mask;
    const Split sp = split_from_name(split);
    MetricsReport report;
    if (mode == Mode::cross) {
      resolved["other"] = other;
      if (other.empty())
        throw CLI::ValidationError("--other", "target manifest required");
      FcmDataset target = build_dataset(other, seed);
      report = cross_lab_eval(m, ds, target, sp, mask);
    } else {
      report = evaluate(m, ds, sp, mask);
    }
    write_text(dir / "config.json", resolved.dump(2) + "\n");
    write_metrics(dir, report);
    return 0;
  }
};

struct ZooCmd {
  std::string out, config, data;
  int epochs = 10;
  std::uint64_t seed = 0;

  CLI::App* cmd = nullptr;
  void attach(CLI::App& app) {
    cmd = app.add_subcommand(
        "zoo", "train and evaluate every architecture, one table");
    cmd->add_option("--config", config, "JSON config file");
    cmd->add_option("--data", data, "dataset manifest path");
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--epochs", epochs, "epochs per architecture");
    cmd->add_option("--seed", seed, "RNG seed");
  }

  int run() {
    const json file = load_config_file(config);
    merge_key(cmd, file, "data", data);
    merge_key(cmd, file, "out", out);
    merge_key(cmd, file, "epochs", epochs);
    merge_key(cmd, file, "seed", seed);
    if (data.empty()) throw CLI::ValidationError("--data", "manifest required");
    const fs::path dir = prepare_out(out);

    FcmDataset ds = build_dataset(data, seed);
    const int input_dim = static_cast<int>(ds.canonical_markers.size());

    std::ostringstream table;
    char line[160];
    std::snprintf(line, sizeof line, "%-16s %10s %10s %10s %10s\n",
                  "architecture", "val F1", "test F1", "test p", "test r");
    table << line;
    json results = json::array();
    for (const std::string& arch : architecture_zoo()) {
      ModelOpts mo;
      mo.arch = arch;
      Model m = Model::build(mo.resolve(input_dim, seed));
      TrainConfig tc;
      tc.epochs = epochs;
      tc.seed = seed;
      TrainReport tr = train(m, ds, tc);
      MetricsReport test = evaluate(m, ds, Split::test);
      std::snprintf(line, sizeof line, "%-16s %10.4f %10.4f %10.4f %10.4f\n",
                    arch.c_str(), tr.best_val_f1, test.mean_f1, test.mean_p,
                    test.mean_r);
      table << line;
      std::cout << line << std::flush;
      results.push_back({{"arch", arch},
                         {"best_val_f1", tr.best_val_f1},
                         {"test_mean_f1", test.mean_f1},
                         {"test_mean_p", test.mean_p},
                         {"test_mean_r", test.mean_r}});
    }
    write_text(dir / "zoo_table.txt", table.str());
    write_text(dir / "zoo_results.json", results.dump(2) + "\n");
    json resolved = {{"command", "zoo"},
                     {"data", data},
                     {"epochs", epochs},
                     {"seed", seed}};
    write_text(dir / "config.json", resolved.dump(2) + "\n");
    return 0;
  }
};

struct GradcheckCmd {
  int instances = 20;
  std::uint64_t seed = 0;

  CLI::App* cmd = nullptr;
  void attach(CLI::App& app) {
    cmd = app.add_subcommand("gradcheck",
                             "verify every op and layer gradient");
    cmd->add_option("--instances", instances, "random instances per case");
    cmd->add_option("--seed", seed, "RNG seed");
  }

  int run() {
    bool ok = true;
    for (const GradCheckResult& r : run_gradient_suite(instances, seed)) {
      std::printf("%-30s max err %.3e  %s\n", r.name.c_str(), r.max_error,
                  r.pass ? "PASS" : "FAIL");
      ok = ok && r.pass;
    }
    if (!ok) throw NumericError("gradcheck: at least one case failed");
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cytoset: per-event blast classification toolkit"};
  app.require_subcommand(1);

  SynthCmd synth;
  IngestCmd ingest;
  TrainCmd train_cmd;
  EvalCmd eval_cmd, cross_cmd, mask_cmd, pca_cmd;
  ZooCmd zoo;
  GradcheckCmd gradcheck;
  synth.attach(app);
  ingest.attach(app);
  train_cmd.attach(app);
  eval_cmd.attach(app, EvalCmd::Mode::eval);
  cross_cmd.attach(app, EvalCmd::Mode::cross);
  mask_cmd.attach(app, EvalCmd::Mode::masked);
  zoo.attach(app);
  pca_cmd.attach(app, EvalCmd::Mode::pca);
  gradcheck.attach(app);

  try {
    app.parse(argc, argv);
    if (synth.cmd->parsed()) return synth.run();
    if (ingest.cmd->parsed()) return ingest.run();
    if (train_cmd.cmd->parsed()) return train_cmd.run();
    if (eval_cmd.cmd->parsed()) return eval_cmd.run();
    if (cross_cmd.cmd->parsed()) return cross_cmd.run();
    if (mask_cmd.cmd->parsed()) return mask_cmd.run();
    if (zoo.cmd->parsed()) return zoo.run();
    if (pca_cmd.cmd->parsed()) return pca_cmd.run();
    if (gradcheck.cmd->parsed()) return gradcheck.run();
    return 1;
  } catch (const CLI::CallForHelp& e) {
    app.exit(e);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
