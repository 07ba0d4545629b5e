#include "cytoset/dataset.hpp"

#include "cytoset/fcs.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace cyto {
namespace {

using nlohmann::json;

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

float parse_cell(const std::string& cell, int row, const std::string& col) {
  const std::string t = trim(cell);
  if (t.empty())
    throw DataError("csv: empty cell at row " + std::to_string(row) +
                    " column " + col);
  std::size_t used = 0;
  float v;
  try {
    v = std::stof(t, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != t.size())
    throw DataError("csv: non-numeric cell '" + t + "' at row " +
                    std::to_string(row) + " column " + col);
  return v;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  const std::string t = trim(name);
  if (t == "train") return Split::train;
  if (t == "val" || t == "validation") return Split::val;
  if (t == "test") return Split::test;
  throw DataError("unknown split name '" + name + "'");
}

FcmSample load_csv_sample(std::istream& in,
                          const std::optional<std::string>& label_column) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("csv: empty input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header = split_line(line);
  for (auto& h : header) h = trim(h);

  int label_col = -1;
  if (label_column) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == trim(*label_column)) label_col = static_cast<int>(i);
    if (label_col < 0)
      throw DataError("csv: label column '" + *label_column +
                      "' not in header");
  }

  FcmSample sample;
  for (std::size_t i = 0; i < header.size(); ++i)
    if (static_cast<int>(i) != label_col) sample.markers.push_back(header[i]);

  int row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    ++row;
    std::vector<std::string> cells = split_line(line);
    if (cells.size() != header.size())
      throw DataError("csv: row " + std::to_string(row) + " has " +
                      std::to_string(cells.size()) + " cells, header has " +
                      std::to_string(header.size()));
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const float v = parse_cell(cells[i], row, header[i]);
      if (static_cast<int>(i) == label_col)
        sample.labels.push_back(v != 0.0f ? 1 : 0);
      else
        sample.events.push_back(v);
    }
  }
  if (row == 0) throw DataError("csv: no data rows");
  sample.sample_id = "csv-sample";
  sample.validate();
  return sample;
}

FcmSample load_csv_file(const std::string& path,
                        const std::optional<std::string>& label_column) {
  std::ifstream is(path);
  if (!is) throw DataError("csv: cannot open " + path);
  FcmSample s = load_csv_sample(is, label_column);
  auto slash = path.find_last_of('/');
  s.sample_id = slash == std::string::npos ? path : path.substr(slash + 1);
  return s;
}

void write_csv_sample(const FcmSample& sample, std::ostream& out,
                      const std::string& label_column) {
  for (std::size_t i = 0; i < sample.markers.size(); ++i)
    out << (i ? "," : "") << sample.markers[i];
  if (sample.has_labels()) out << "," << label_column;
  out << "\n";
  const int f = sample.n_features();
  for (int e = 0; e < sample.n_events(); ++e) {
    for (int c = 0; c < f; ++c) out << (c ? "," : "") << sample.at(e, c);
    if (sample.has_labels()) out << "," << int(sample.labels[e]);
    out << "\n";
  }
}

std::vector<int> FcmDataset::sample_indices(Split s) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < split.size(); ++i)
    if (split[i] == s) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<float> FcmDataset::standardized_features(int sample_idx) const {
  const FcmSample& s = samples[sample_idx];
  const int n = s.n_events();
  const int fc = static_cast<int>(canonical_markers.size());
  std::vector<float> out(static_cast<std::size_t>(n) * fc);
  for (int c = 0; c < fc; ++c) {
    const int src = s.marker_index(canonical_markers[c]);
    if (src < 0)
      throw DataError("sample " + s.sample_id + " missing canonical marker " +
                      canonical_markers[c]);
    const float mu = feature_mean[c];
    const float inv = 1.0f / feature_std[c];
    for (int e = 0; e < n; ++e)
      out[static_cast<std::size_t>(e) * fc + c] = (s.at(e, src) - mu) * inv;
  }
  return out;
}

std::vector<float> FcmDataset::standardized_full_features(
    int sample_idx, int* out_cols) const {
  const FcmSample& s = samples[sample_idx];
  const int n = s.n_events();
  const int f = s.n_features();
  *out_cols = f;
  std::vector<float> out(s.events.size());
  for (int c = 0; c < f; ++c) {
    float mu, sd;
    int canon = -1;
    for (std::size_t k = 0; k < canonical_markers.size(); ++k)
      if (s.marker_index(canonical_markers[k]) == c)
        canon = static_cast<int>(k);
    if (canon >= 0) {
      mu = feature_mean[canon];
      sd = feature_std[canon];
    } else {
      double m = 0;
      for (int e = 0; e < n; ++e) m += s.at(e, c);
      m /= n;
      double v = 0;
      for (int e = 0; e < n; ++e) {
        const double d = s.at(e, c) - m;
        v += d * d;
      }
      mu = static_cast<float>(m);
      sd = static_cast<float>(std::sqrt(v / n));
    }
    const float inv = sd > 1e-12f ? 1.0f / sd : 1.0f;
    for (int e = 0; e < n; ++e)
      out[static_cast<std::size_t>(e) * f + c] = (s.at(e, c) - mu) * inv;
  }
  return out;
}

FcmDataset assemble_dataset(std::vector<FcmSample> samples,
                            std::vector<std::string> canonical_markers,
                            std::optional<std::vector<Split>> explicit_split,
                            std::uint64_t seed) {
  const int n = static_cast<int>(samples.size());
  if (n < 1) throw DataError("dataset: no samples");
  FcmDataset ds;
  ds.samples = std::move(samples);
  ds.canonical_markers = std::move(canonical_markers);

  for (const auto& s : ds.samples)
    for (const auto& m : ds.canonical_markers)
      if (s.marker_index(m) < 0)
        throw DataError("sample " + s.sample_id +
                        " missing canonical marker " + m);

  if (explicit_split) {
    if (static_cast<int>(explicit_split->size()) != n)
      throw DataError("dataset: explicit split length mismatch");
    ds.split = std::move(*explicit_split);
  } else {
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::mt19937 rng(static_cast<std::uint32_t>(seed));
    std::shuffle(order.begin(), order.end(), rng);
    const int n_train = (n + 1) / 2;
    const int n_val = n / 4;
    ds.split.assign(n, Split::test);
    for (int i = 0; i < n_train; ++i) ds.split[order[i]] = Split::train;
    for (int i = n_train; i < n_train + n_val; ++i)
      ds.split[order[i]] = Split::val;
  }

  // Standardization statistics over all train-split events.
  const int fc = static_cast<int>(ds.canonical_markers.size());
  std::vector<double> sum(fc, 0.0), sumsq(fc, 0.0);
  std::int64_t count = 0;
  for (int i = 0; i < n; ++i) {
    if (ds.split[i] != Split::train) continue;
    const FcmSample& s = ds.samples[i];
    for (int c = 0; c < fc; ++c) {
      const int src = s.marker_index(ds.canonical_markers[c]);
      for (int e = 0; e < s.n_events(); ++e) {
        const double v = s.at(e, src);
        sum[c] += v;
        sumsq[c] += v * v;
      }
    }
    count += s.n_events();
  }
  if (count == 0) throw DataError("dataset: train split has no events");
  ds.feature_mean.resize(fc);
  ds.feature_std.resize(fc);
  for (int c = 0; c < fc; ++c) {
    const double mu = sum[c] / count;
    const double var = std::max(0.0, sumsq[c] / count - mu * mu);
    ds.feature_mean[c] = static_cast<float>(mu);
    ds.feature_std[c] =
        static_cast<float>(std::sqrt(var) > 1e-12 ? std::sqrt(var) : 1.0);
  }
  return ds;
}

FcmDataset build_dataset(const std::string& manifest_path,
                         std::uint64_t seed) {
  std::ifstream is(manifest_path);
  if (!is) throw DataError("manifest: cannot open " + manifest_path);
  json m;
  try {
    is >> m;
  } catch (const json::exception& e) {
    throw DataError("manifest: invalid JSON: " + std::string(e.what()));
  }
  if (!m.contains("canonical_markers") || !m.contains("samples"))
    throw DataError("manifest: needs 'canonical_markers' and 'samples'");

  std::string dir;
  auto slash = manifest_path.find_last_of('/');
  if (slash != std::string::npos) dir = manifest_path.substr(0, slash + 1);

  std::vector<std::string> canonical =
      m["canonical_markers"].get<std::vector<std::string>>();
  std::optional<std::string> label_column;
  if (m.contains("label_column") && !m["label_column"].is_null())
    label_column = m["label_column"].get<std::string>();

  std::vector<FcmSample> samples;
  std::vector<Split> splits;
  bool any_split = false, all_split = true;
  for (const auto& entry : m["samples"]) {
    std::string path = entry.at("path").get<std::string>();
    if (!path.empty() && path[0] != '/') path = dir + path;
    FcmSample s;
    if (path.size() > 4 && path.substr(path.size() - 4) == ".fcs")
      s = parse_fcs_file(path);
    else
      s = load_csv_file(path, label_column);
    if (entry.contains("id")) s.sample_id = entry["id"].get<std::string>();
    // optional arcsinh transform per marker, applied before standardization
    if (m.contains("arcsinh_cofactors")) {
      for (auto& [marker, cof] : m["arcsinh_cofactors"].items()) {
        const int col = s.marker_index(marker);
        if (col < 0) continue;
        const float c = cof.get<float>();
        const int f = s.n_features();
        for (int e = 0; e < s.n_events(); ++e)
          s.events[static_cast<std::size_t>(e) * f + col] =
              std::asinh(s.at(e, col) / c);
      }
    }
    samples.push_back(std::move(s));
    if (entry.contains("split")) {
      any_split = true;
      splits.push_back(split_from_name(entry["split"].get<std::string>()));
    } else {
      all_split = false;
      splits.push_back(Split::test);
    }
  }
  if (any_split && !all_split)
    throw DataError("manifest: either all samples or none carry a split");
  return assemble_dataset(std::move(samples), std::move(canonical),
                          any_split ? std::optional(splits) : std::nullopt,
                          seed);
}

}  // namespace cyto
