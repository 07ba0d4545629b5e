#include "cytoset/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace cyto {
namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 over the pair
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string marker_name(int i) {
  static const char* names[] = {"CD10", "CD19", "CD45", "CD20",  "CD34",
                                "CD38", "CD58", "FSC-A", "SSC-A", "SYTO-41"};
  if (i < 10) return names[i];
  return "M" + std::to_string(i);
}

struct MixtureLayout {
  std::vector<std::vector<float>> means;    // healthy clusters then blast
  std::vector<std::vector<float>> sigmas;   // per-axis stddev
  std::vector<double> healthy_weights;
};

// Cluster geometry depends only on the config seed; per-sample randomness
// is the joint shift and the event draws.
MixtureLayout make_layout(const SynthConfig& cfg) {
  std::mt19937 rng(static_cast<std::uint32_t>(mix_seed(cfg.seed, 0xC10C)));
  const int f = cfg.n_features;
  MixtureLayout lay;
  std::uniform_real_distribution<float> mean_d(-8.0f, 8.0f);
  std::uniform_real_distribution<float> sigma_d(0.5f, 1.5f);
  for (int k = 0; k < cfg.n_healthy_clusters; ++k) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      std::vector<float> m(f);
      for (auto& v : m) v = mean_d(rng);
      bool ok = true;
      for (const auto& prev : lay.means) {
        double d2 = 0;
        for (int j = 0; j < f; ++j)
          d2 += (m[j] - prev[j]) * (m[j] - prev[j]);
        if (std::sqrt(d2) < 6.0) { ok = false; break; }
      }
      if (ok) { lay.means.push_back(std::move(m)); break; }
    }
    if (static_cast<int>(lay.means.size()) != k + 1)
      throw DataError("synth: could not place well-separated clusters; "
                      "reduce n_healthy_clusters");
    std::vector<float> s(f);
    for (auto& v : s) v = sigma_d(rng);
    lay.sigmas.push_back(std::move(s));
  }

  // Blast cluster sits adjacent to healthy cluster 0 (offset 2-4 sigma).
  // Most of the offset lives on the primary axes; the rest is weak so that
  // masking the primaries leaves only a faint per-event signal.
  const auto& host_sigma = lay.sigmas[0];
  std::vector<float> blast_mean = lay.means[0];
  std::uniform_real_distribution<float> off_d(cfg.blast_offset_lo,
                                              cfg.blast_offset_hi);
  std::uniform_real_distribution<float> weak_d(0.5f, 0.9f);
  std::bernoulli_distribution sign_d(0.5);
  const int primaries = std::min(cfg.primary_features, f);
  for (int j = 0; j < f; ++j) {
    const float mag = j < primaries ? off_d(rng) : weak_d(rng);
    blast_mean[j] += (sign_d(rng) ? 1.0f : -1.0f) * mag * host_sigma[j];
  }
  lay.means.push_back(std::move(blast_mean));
  std::vector<float> bs(f);
  for (auto& v : bs) v = sigma_d(rng) * 0.7f;
  lay.sigmas.push_back(std::move(bs));

  std::uniform_real_distribution<double> w_d(0.5, 1.5);
  double total = 0;
  for (int k = 0; k < cfg.n_healthy_clusters; ++k) {
    lay.healthy_weights.push_back(w_d(rng));
    total += lay.healthy_weights.back();
  }
  for (auto& w : lay.healthy_weights) w /= total;
  return lay;
}

}  // namespace

void SynthConfig::validate() const {
  if (n_events < 1 || n_features < 1 || n_healthy_clusters < 1)
    throw DataError("synth: counts must be positive");
  if (blast_fraction < 0.0001 || blast_fraction > 0.5)
    throw DataError("synth: blast_fraction must be in [0.0001, 0.5], got " +
                    std::to_string(blast_fraction));
  const long blast = std::lround(blast_fraction * n_events);
  if (std::max(1L, blast) >= n_events)
    throw DataError("synth: blast count would swallow the whole sample");
}

FcmSample generate_sample(const SynthConfig& cfg, std::uint64_t sample_seed) {
  cfg.validate();
  const MixtureLayout lay = make_layout(cfg);
  const int f = cfg.n_features;
  std::mt19937 rng(
      static_cast<std::uint32_t>(mix_seed(cfg.seed, sample_seed)));

  // Joint translation, mostly along the healthy-to-blast offset axis so a
  // fixed per-event boundary degrades as the scale grows: one sample's
  // shifted healthy host region approaches another's blast region, and only
  // in-sample context (the rest of the mixture moves identically) can
  // disambiguate. A small isotropic term keeps the shift full-rank.
  std::vector<float> shift(f, 0.0f);
  if (cfg.population_shift_scale > 0) {
    const auto& host = lay.means[0];
    const auto& blast = lay.means[cfg.n_healthy_clusters];
    double off_norm2 = 0;
    for (int j = 0; j < f; ++j)
      off_norm2 += (blast[j] - host[j]) * (blast[j] - host[j]);
    const double off_norm = std::max(1e-12, std::sqrt(off_norm2));
    std::uniform_real_distribution<float> t_d(
        -static_cast<float>(cfg.population_shift_scale),
        static_cast<float>(cfg.population_shift_scale));
    const float t = t_d(rng);
    std::normal_distribution<float> n01(0.0f, 1.0f);
    std::vector<float> noise(f);
    double norm2 = 0;
    for (auto& v : noise) {
      v = n01(rng);
      norm2 += v * v;
    }
    const double noise_radius = 0.05 * cfg.population_shift_scale;
    const double ns = noise_radius / std::max(1e-12, std::sqrt(norm2));
    for (int j = 0; j < f; ++j)
      shift[j] = static_cast<float>(t * (blast[j] - host[j]) / off_norm +
                                    noise[j] * ns);
  }

  const int blast_count = std::max(
      1, static_cast<int>(std::lround(cfg.blast_fraction * cfg.n_events)));
  const int healthy_count = cfg.n_events - blast_count;

  // component id per event: healthy clusters by weight, blasts last, then
  // one global shuffle so labels are not position-coded
  std::vector<int> comp;
  comp.reserve(cfg.n_events);
  int assigned = 0;
  for (int k = 0; k < cfg.n_healthy_clusters; ++k) {
    int cnt = k + 1 == cfg.n_healthy_clusters
                  ? healthy_count - assigned
                  : static_cast<int>(lay.healthy_weights[k] * healthy_count);
    cnt = std::max(0, cnt);
    assigned += cnt;
    comp.insert(comp.end(), cnt, k);
  }
  comp.insert(comp.end(), blast_count, cfg.n_healthy_clusters);
  std::shuffle(comp.begin(), comp.end(), rng);

  FcmSample sample;
  sample.sample_id = "synth-" + std::to_string(sample_seed);
  for (int j = 0; j < f; ++j) sample.markers.push_back(marker_name(j));
  sample.events.resize(static_cast<std::size_t>(cfg.n_events) * f);
  sample.labels.resize(cfg.n_events);
  std::normal_distribution<float> n01(0.0f, 1.0f);
  for (int e = 0; e < cfg.n_events; ++e) {
    const int k = comp[e];
    sample.labels[e] = k == cfg.n_healthy_clusters ? 1 : 0;
    for (int j = 0; j < f; ++j)
      sample.events[static_cast<std::size_t>(e) * f + j] =
          lay.means[k][j] + shift[j] + n01(rng) * lay.sigmas[k][j];
  }
  return sample;
}

FcmDataset generate_dataset(const SynthConfig& cfg, int n_samples,
                            std::uint64_t seed) {
  if (n_samples < 4)
    throw DataError("synth: need at least 4 samples for a 50/25/25 split");
  SynthConfig local = cfg;
  local.seed = seed;
  std::vector<FcmSample> samples;
  samples.reserve(n_samples);
  for (int i = 0; i < n_samples; ++i)
    samples.push_back(generate_sample(local, static_cast<std::uint64_t>(i)));
  std::vector<std::string> canonical = samples[0].markers;
  return assemble_dataset(std::move(samples), std::move(canonical),
                          std::nullopt, seed);
}

}  // namespace cyto
