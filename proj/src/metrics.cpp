#include "cytoset/metrics.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cyto {
namespace {

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

void mean_std(const std::vector<double>& v, double* mean, double* sd) {
  if (v.empty()) {
    *mean = *sd = 0.0;
    return;
  }
  double s = 0;
  for (double x : v) s += x;
  *mean = s / v.size();
  double q = 0;
  for (double x : v) q += (x - *mean) * (x - *mean);
  *sd = std::sqrt(q / v.size());
}

}  // namespace

SampleMetrics sample_metrics(const std::vector<std::uint8_t>& labels,
                             const std::vector<std::uint8_t>& predictions) {
  if (labels.size() != predictions.size())
    throw DataError("sample_metrics: " + std::to_string(labels.size()) +
                    " labels vs " + std::to_string(predictions.size()) +
                    " predictions");
  SampleMetrics m;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool l = labels[i] != 0, p = predictions[i] != 0;
    m.tp += l && p;
    m.fp += !l && p;
    m.fn += l && !p;
  }
  m.has_positives = m.tp + m.fn > 0;
  m.precision = m.tp + m.fp > 0 ? double(m.tp) / (m.tp + m.fp) : 0.0;
  m.recall = m.has_positives ? double(m.tp) / (m.tp + m.fn) : 0.0;
  m.f1 = m.precision + m.recall > 0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  return m;
}

void MetricsReport::aggregate() {
  std::vector<double> ps, rs, f1s;
  excluded_no_positive = 0;
  for (const auto& m : per_sample) {
    if (!m.has_positives) {
      ++excluded_no_positive;
      continue;
    }
    ps.push_back(m.precision);
    rs.push_back(m.recall);
    f1s.push_back(m.f1);
  }
  mean_std(ps, &mean_p, &std_p);
  mean_std(rs, &mean_r, &std_r);
  mean_std(f1s, &mean_f1, &std_f1);
  median_p = median_of(ps);
  median_r = median_of(rs);
  median_f1 = median_of(f1s);
}

std::string MetricsReport::to_table() const {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %10s %10s %10s\n", "sample",
                "precision", "recall", "F1");
  out << line;
  for (std::size_t i = 0; i < per_sample.size(); ++i) {
    const auto& m = per_sample[i];
    std::snprintf(line, sizeof line, "%-10d %10.4f %10.4f %10.4f%s\n",
                  sample_indices[i], m.precision, m.recall, m.f1,
                  m.has_positives ? "" : "  (no positives, excluded)");
    out << line;
  }
  std::snprintf(line, sizeof line,
                "avg  p %.4f +- %.4f  r %.4f +- %.4f  F1 %.4f +- %.4f\n",
                mean_p, std_p, mean_r, std_r, mean_f1, std_f1);
  out << line;
  std::snprintf(line, sizeof line, "med  p %.4f  r %.4f  F1 %.4f\n",
                median_p, median_r, median_f1);
  out << line;
  return out.str();
}

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["conventions"] = {
      {"zero_predicted_positives", "precision = 0"},
      {"no_positive_samples", "excluded from aggregation"},
      {"threshold", 0.5}};
  j["excluded_no_positive"] = excluded_no_positive;
  j["aggregate"] = {{"mean_precision", mean_p}, {"std_precision", std_p},
                    {"mean_recall", mean_r},    {"std_recall", std_r},
                    {"mean_f1", mean_f1},       {"std_f1", std_f1},
                    {"median_precision", median_p},
                    {"median_recall", median_r},
                    {"median_f1", median_f1}};
  auto& arr = j["per_sample"] = nlohmann::json::array();
  for (std::size_t i = 0; i < per_sample.size(); ++i) {
    const auto& m = per_sample[i];
    arr.push_back({{"sample", sample_indices[i]},
                   {"precision", m.precision},
                   {"recall", m.recall},
                   {"f1", m.f1},
                   {"tp", m.tp},
                   {"fp", m.fp},
                   {"fn", m.fn},
                   {"has_positives", m.has_positives}});
  }
  return j.dump(2);
}

MetricsReport evaluate(Model& model, const FcmDataset& ds, Split split,
                       const std::vector<std::string>& feature_mask,
                       std::unordered_map<int, EdgeList>* graph_cache) {
  const std::vector<int> idxs = ds.sample_indices(split);
  if (idxs.empty())
    throw DataError(std::string("evaluate: split '") + split_name(split) +
                    "' is empty");
  MetricsReport report;
  for (int idx : idxs) {
    const FcmSample& s = ds.samples[idx];
    if (!s.has_labels())
      throw DataError("evaluate: sample " + s.sample_id + " has no labels");
    LayerContext ctx;  // eval mode
    Tape tape(false);
    Tensor logits =
        forward_sample(model, tape, ds, idx, feature_mask, ctx, graph_cache);
    std::vector<std::uint8_t> preds(s.n_events());
    for (int e = 0; e < s.n_events(); ++e)
      preds[e] = logits.data()[e] >= 0.0f;  // sigmoid(z) >= 0.5 <=> z >= 0
    report.sample_indices.push_back(idx);
    report.per_sample.push_back(sample_metrics(s.labels, preds));
  }
  report.aggregate();
  return report;
}

FcmDataset with_source_standardization(const FcmDataset& source,
                                       const FcmDataset& target) {
  FcmDataset out = target;
  out.canonical_markers = source.canonical_markers;
  out.feature_mean = source.feature_mean;
  out.feature_std = source.feature_std;
  for (const auto& s : out.samples)
    for (const auto& m : out.canonical_markers)
      if (s.marker_index(m) < 0)
        throw DataError("cross-lab eval: sample " + s.sample_id +
                        " missing canonical marker " + m);
  return out;
}

MetricsReport cross_lab_eval(Model& model, const FcmDataset& train_ds,
                             const FcmDataset& other, Split split,
                             const std::vector<std::string>& feature_mask) {
  FcmDataset restd = with_source_standardization(train_ds, other);
  return evaluate(model, restd, split, feature_mask, nullptr);
}

std::vector<std::string> most_discriminative_markers(const FcmDataset& ds,
                                                     int count) {
  const int fc = static_cast<int>(ds.canonical_markers.size());
  count = std::clamp(count, 0, fc);
  std::vector<double> sum_p(fc, 0), sum_n(fc, 0), sq(fc, 0);
  std::int64_t np = 0, nn = 0;
  for (int idx : ds.sample_indices(Split::train)) {
    const FcmSample& s = ds.samples[idx];
    if (!s.has_labels())
      throw DataError("discriminative ranking needs labeled train samples");
    std::vector<float> z = ds.standardized_features(idx);
    for (int e = 0; e < s.n_events(); ++e) {
      const bool pos = s.labels[e] != 0;
      for (int c = 0; c < fc; ++c) {
        const double v = z[static_cast<std::size_t>(e) * fc + c];
        (pos ? sum_p : sum_n)[c] += v;
        sq[c] += v * v;
      }
      (pos ? np : nn) += 1;
    }
  }
  if (np == 0 || nn == 0)
    throw DataError("discriminative ranking needs both classes present");
  std::vector<std::pair<double, int>> score(fc);
  for (int c = 0; c < fc; ++c) {
    const double mp = sum_p[c] / np, mn = sum_n[c] / nn;
    const double total = np + nn;
    const double mean = (sum_p[c] + sum_n[c]) / total;
    const double sd = std::sqrt(std::max(1e-12, sq[c] / total - mean * mean));
    score[c] = {-std::abs(mp - mn) / sd, c};  // negative: sort ascending
  }
  std::sort(score.begin(), score.end());
  std::vector<std::string> out;
  for (int i = 0; i < count; ++i)
    out.push_back(ds.canonical_markers[score[i].second]);
  return out;
}

PcaProjection pca_features_export(Model& model, const FcmDataset& ds,
                                  int sample_idx) {
  const int n = ds.samples[sample_idx].n_events();
  if (n < 2) throw DataError("pca export needs at least 2 events");
  LayerContext ctx;
  Tape tape(false);
  forward_sample(model, tape, ds, sample_idx, {}, ctx, nullptr);
  const Tensor& act = model.last_activations();
  const int d = act.cols();

  Eigen::MatrixXd x(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      x(i, j) = act.data()[static_cast<std::int64_t>(i) * d + j];
  Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  Eigen::MatrixXd cov = (x.transpose() * x) / double(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  // eigenvalues ascending: take the last two columns, descending order
  PcaProjection out;
  out.xy.resize(static_cast<std::size_t>(n) * 2);
  for (int comp = 0; comp < 2; ++comp) {
    Eigen::VectorXd v = es.eigenvectors().col(d - 1 - comp);
    int big = 0;
    for (int j = 1; j < d; ++j)
      if (std::abs(v(j)) > std::abs(v(big))) big = j;
    if (v(big) < 0) v = -v;  // sign convention
    Eigen::VectorXd proj = x * v;
    for (int i = 0; i < n; ++i)
      out.xy[static_cast<std::size_t>(i) * 2 + comp] =
          static_cast<float>(proj(i));
  }
  out.labels = ds.samples[sample_idx].labels;
  return out;
}

}  // namespace cyto
