// Seeded synthetic identity datasets with a controllable domain gap and
// easy/hard intra-identity spread.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcnmt/core.hpp"
#include "mcnmt/encoder.hpp"

namespace mcnmt {

enum class Domain { source, target };

inline std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

inline Domain domain_from_string(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw ConfigError("unknown domain '" + s + "'");
}

struct AffineTransform {
  Matrix matrix;
  Vector offset;

  static AffineTransform identity(std::size_t dim) {
    AffineTransform t{Matrix(dim, dim), Vector(dim, 0.0)};
    for (std::size_t i = 0; i < dim; ++i) t.matrix(i, i) = 1.0;
    return t;
  }

  Vector apply(std::span<const double> x) const {
    Vector y(offset);
    for (std::size_t r = 0; r < matrix.rows; ++r)
      for (std::size_t c = 0; c < matrix.cols; ++c) y[r] += matrix(r, c) * x[c];
    return y;
  }
};

/// Random orthogonal matrix (Gram-Schmidt on a Gaussian matrix).
inline Matrix random_rotation(std::size_t dim, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix q(dim, dim);
  for (std::size_t r = 0; r < dim; ++r) {
    Vector v(dim);
    for (;;) {
      for (double& x : v) x = normal(rng);
      for (std::size_t p = 0; p < r; ++p) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dim; ++c) dot += v[c] * q(p, c);
        for (std::size_t c = 0; c < dim; ++c) v[c] -= dot * q(p, c);
      }
      const double norm = l2_norm(v);
      if (norm > 1e-8) {
        for (std::size_t c = 0; c < dim; ++c) q(r, c) = v[c] / norm;
        break;
      }
    }
  }
  return q;
}

/// Per-identity sample counts for the evaluation splits; whatever remains of
/// samples_per_identity goes to train.
struct SplitSpec {
  std::size_t query = 0;
  std::size_t gallery = 0;
  std::size_t val_query = 0;
  std::size_t val_gallery = 0;
};

struct DomainSpec {
  Domain domain = Domain::source;
  std::size_t identity_count = 0;
  std::size_t samples_per_identity = 0;
  std::size_t input_dim = 0;
  int first_identity = 0;
  double intra_easy_sigma = 0.0;
  double intra_hard_sigma = 0.0;
  double hard_fraction = 0.0;
  /// Identity centers are rejection-sampled on the unit sphere until every
  /// pair is at least this far apart (0 disables the check).
  double min_center_distance = 0.0;
  AffineTransform domain_transform;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  SplitSpec splits;

  std::size_t hard_per_identity() const {
    return static_cast<std::size_t>(std::llround(hard_fraction * static_cast<double>(samples_per_identity)));
  }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) { throw ConfigError(field + ": " + why); };
    if (identity_count == 0) fail("identity_count", "must be positive");
    if (samples_per_identity == 0) fail("samples_per_identity", "must be positive");
    if (input_dim == 0) fail("input_dim", "must be positive");
    if (!(intra_easy_sigma >= 0.0)) fail("intra_easy_sigma", "must be >= 0");
    if (!(intra_hard_sigma >= 0.0)) fail("intra_hard_sigma", "must be >= 0");
    if (!(noise_sigma >= 0.0)) fail("noise_sigma", "must be >= 0");
    if (!(hard_fraction >= 0.0 && hard_fraction <= 1.0)) fail("hard_fraction", "must lie in [0,1]");
    if (hard_fraction > 0.0 && intra_hard_sigma < intra_easy_sigma)
      fail("intra_hard_sigma", "must be at least intra_easy_sigma");
    if (!(min_center_distance >= 0.0 && min_center_distance < 2.0)) fail("min_center_distance", "must lie in [0,2)");
    const auto& m = domain_transform.matrix;
    if (m.rows != input_dim || m.cols != input_dim || m.data.size() != input_dim * input_dim)
      fail("domain_transform", "matrix must be input_dim x input_dim");
    if (domain_transform.offset.size() != input_dim) fail("domain_transform", "offset must have input_dim entries");
    if (!all_finite(m.data) || !all_finite(domain_transform.offset)) fail("domain_transform", "must be finite");
    if (splits.query + splits.gallery + splits.val_query + splits.val_gallery > samples_per_identity)
      fail("splits", "per-identity split counts exceed samples_per_identity");
    if (splits.query > 0 && splits.gallery == 0) fail("splits", "query identities need gallery samples");
    if (splits.val_query > 0 && splits.val_gallery == 0) fail("splits", "validation queries need validation gallery");
  }
};

struct Sample {
  Vector x;
  int identity = 0;
  bool hard = false;
  Domain domain = Domain::source;
};

struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> query;
  std::vector<std::size_t> gallery;
  std::vector<std::size_t> val_query;
  std::vector<std::size_t> val_gallery;
};

/// Inputs only. Training and pseudo-labeling code receive target data in this
/// form so they cannot read identities.
struct UnlabeledSet {
  std::vector<Vector> inputs;
};

struct LabeledSet {
  std::vector<Vector> inputs;
  std::vector<int> labels;
};

struct SyntheticDataset {
  DomainSpec spec;
  std::vector<Sample> samples;
  Splits splits;

  Domain domain() const { return spec.domain; }

  std::vector<Vector> inputs(std::span<const std::size_t> idx) const {
    std::vector<Vector> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(samples.at(i).x);
    return out;
  }
  std::vector<int> identities(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(samples.at(i).identity);
    return out;
  }
  UnlabeledSet unlabeled(std::span<const std::size_t> idx) const { return {inputs(idx)}; }
  LabeledSet labeled(std::span<const std::size_t> idx) const { return {inputs(idx), identities(idx)}; }

  std::size_t distinct_identities(std::span<const std::size_t> idx) const {
    auto ids = identities(idx);
    std::sort(ids.begin(), ids.end());
    return static_cast<std::size_t>(std::unique(ids.begin(), ids.end()) - ids.begin());
  }
};

/// Deterministic in `spec`: centers come from one stream, each identity's
/// samples and split assignment from a stream of its own, so identities can be
/// generated independently and in any order.
inline SyntheticDataset generate(const DomainSpec& spec) {
  spec.validate();
  SyntheticDataset ds;
  ds.spec = spec;
  const std::size_t dim = spec.input_dim;
  std::normal_distribution<double> normal(0.0, 1.0);

  Rng center_rng = make_stream(spec.seed, "centers");
  std::vector<Vector> centers;
  constexpr int kMaxAttempts = 100000;
  for (std::size_t id = 0; id < spec.identity_count; ++id) {
    Vector c(dim);
    for (int attempt = 0;; ++attempt) {
      if (attempt == kMaxAttempts)
        throw ConfigError("min_center_distance: cannot place " + std::to_string(spec.identity_count) + " centers");
      for (double& v : c) v = normal(center_rng);
      const double norm = l2_norm(c);
      if (norm < 1e-12) continue;
      for (double& v : c) v /= norm;
      bool ok = true;
      for (const auto& other : centers)
        if (euclidean_distance(c, other) < spec.min_center_distance) {
          ok = false;
          break;
        }
      if (ok) break;
    }
    centers.push_back(c);
  }

  const std::size_t per = spec.samples_per_identity;
  const std::size_t hard = spec.hard_per_identity();
  ds.samples.reserve(spec.identity_count * per);
  for (std::size_t id = 0; id < spec.identity_count; ++id) {
    Rng rng = make_stream(spec.seed, "identity", id);
    for (std::size_t k = 0; k < per; ++k) {
      const bool is_hard = k < hard;
      const double sigma = is_hard ? spec.intra_hard_sigma : spec.intra_easy_sigma;
      Vector x = centers[id];
      for (double& v : x) v += sigma * normal(rng);
      x = spec.domain_transform.apply(x);
      for (double& v : x) v += spec.noise_sigma * normal(rng);
      ds.samples.push_back(Sample{std::move(x), spec.first_identity + static_cast<int>(id), is_hard, spec.domain});
    }
    std::vector<std::size_t> slots(per);
    for (std::size_t k = 0; k < per; ++k) slots[k] = id * per + k;
    std::shuffle(slots.begin(), slots.end(), rng);
    std::size_t pos = 0;
    auto take = [&](std::vector<std::size_t>& dst, std::size_t count) {
      for (std::size_t k = 0; k < count; ++k) dst.push_back(slots[pos++]);
    };
    take(ds.splits.query, spec.splits.query);
    take(ds.splits.gallery, spec.splits.gallery);
    take(ds.splits.val_query, spec.splits.val_query);
    take(ds.splits.val_gallery, spec.splits.val_gallery);
    take(ds.splits.train, per - pos);
  }
  for (auto* s : {&ds.splits.train, &ds.splits.query, &ds.splits.gallery, &ds.splits.val_query,
                  &ds.splits.val_gallery})
    std::sort(s->begin(), s->end());
  return ds;
}

/// min between-identity distance minus max within-identity distance over
/// `idx`. Positive means identities are perfectly separable by a threshold.
inline double separation_margin(const SyntheticDataset& ds, std::span<const std::size_t> idx) {
  double within = 0.0, between = INFINITY;
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = a + 1; b < idx.size(); ++b) {
      const auto& sa = ds.samples[idx[a]];
      const auto& sb = ds.samples[idx[b]];
      const double d = euclidean_distance(sa.x, sb.x);
      if (sa.identity == sb.identity)
        within = std::max(within, d);
      else
        between = std::min(between, d);
    }
  return between - within;
}

// ---------------------------------------------------------------------------
// Benchmark presets.

struct Benchmark {
  SyntheticDataset source;
  SyntheticDataset target;
};

inline std::vector<std::string> benchmark_presets() { return {"default-shift", "no-shift", "small-shift"}; }

/// Source and target specs for a preset. Identity ranges are disjoint: source
/// ids start at 0, target ids right after the last source id.
inline std::pair<DomainSpec, DomainSpec> benchmark_specs(const std::string& preset, std::uint64_t seed) {
  const auto presets = benchmark_presets();
  if (std::find(presets.begin(), presets.end(), preset) == presets.end())
    throw ConfigError("unknown benchmark preset '" + preset + "'");

  DomainSpec src;
  src.domain = Domain::source;
  src.identity_count = 30;
  src.samples_per_identity = 20;
  src.input_dim = 8;
  src.first_identity = 0;
  src.intra_easy_sigma = 0.04;
  src.intra_hard_sigma = 0.25;
  src.hard_fraction = 0.3;
  src.min_center_distance = 0.8;
  src.domain_transform = AffineTransform::identity(src.input_dim);
  src.noise_sigma = 0.0;
  src.seed = derive_seed(seed, "source-domain");

  DomainSpec tgt = src;
  tgt.domain = Domain::target;
  tgt.first_identity = static_cast<int>(src.identity_count);
  tgt.seed = derive_seed(seed, "target-domain");
  tgt.splits = SplitSpec{2, 4, 1, 3};

  if (preset == "small-shift") {
    src.identity_count = tgt.identity_count = 12;
    src.samples_per_identity = tgt.samples_per_identity = 16;
    tgt.first_identity = 12;
  }
  if (preset != "no-shift") {
    Rng rng = make_stream(seed, "domain-transform");
    tgt.domain_transform.matrix = random_rotation(tgt.input_dim, rng);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double offset_scale = preset == "small-shift" ? 0.5 : 1.5;
    for (double& v : tgt.domain_transform.offset) v = offset_scale * normal(rng);
    tgt.noise_sigma = 0.02;
  }
  return {src, tgt};
}

inline Benchmark make_benchmark(const std::string& preset, std::uint64_t seed) {
  auto [src, tgt] = benchmark_specs(preset, seed);
  return Benchmark{generate(src), generate(tgt)};
}

// ---------------------------------------------------------------------------
// JSON dump / load.

inline constexpr int kDatasetFormatVersion = 1;

inline nlohmann::json to_json(const DomainSpec& s) {
  return {{"domain", to_string(s.domain)},
          {"identity_count", s.identity_count},
          {"samples_per_identity", s.samples_per_identity},
          {"input_dim", s.input_dim},
          {"first_identity", s.first_identity},
          {"intra_easy_sigma", s.intra_easy_sigma},
          {"intra_hard_sigma", s.intra_hard_sigma},
          {"hard_fraction", s.hard_fraction},
          {"min_center_distance", s.min_center_distance},
          {"domain_transform", {{"matrix", s.domain_transform.matrix.data}, {"offset", s.domain_transform.offset}}},
          {"noise_sigma", s.noise_sigma},
          {"seed", s.seed},
          {"splits",
           {{"query", s.splits.query},
            {"gallery", s.splits.gallery},
            {"val_query", s.splits.val_query},
            {"val_gallery", s.splits.val_gallery}}}};
}

/// Reads a spec. Missing transform means identity; missing splits mean all
/// samples go to train. Unknown keys are rejected.
inline DomainSpec domain_spec_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {
      "domain",           "identity_count", "samples_per_identity", "input_dim",
      "first_identity",   "intra_easy_sigma", "intra_hard_sigma",   "hard_fraction",
      "min_center_distance", "domain_transform", "noise_sigma",     "seed",
      "splits"};
  try {
    if (!j.is_object()) throw ConfigError("dataset spec must be a JSON object");
    for (const auto& [key, value] : j.items())
      if (std::find(known.begin(), known.end(), key) == known.end())
        throw ConfigError("dataset spec: unknown key '" + key + "'");
    DomainSpec s;
    s.domain = domain_from_string(j.value("domain", std::string("source")));
    s.identity_count = j.at("identity_count").get<std::size_t>();
    s.samples_per_identity = j.at("samples_per_identity").get<std::size_t>();
    s.input_dim = j.at("input_dim").get<std::size_t>();
    s.first_identity = j.value("first_identity", 0);
    s.intra_easy_sigma = j.value("intra_easy_sigma", 0.0);
    s.intra_hard_sigma = j.value("intra_hard_sigma", 0.0);
    s.hard_fraction = j.value("hard_fraction", 0.0);
    s.min_center_distance = j.value("min_center_distance", 0.0);
    s.noise_sigma = j.value("noise_sigma", 0.0);
    s.seed = j.value("seed", std::uint64_t{0});
    s.domain_transform = AffineTransform::identity(s.input_dim);
    if (j.contains("domain_transform")) {
      const auto& t = j.at("domain_transform");
      s.domain_transform.matrix.data = t.at("matrix").get<std::vector<double>>();
      s.domain_transform.offset = t.at("offset").get<Vector>();
    }
    if (j.contains("splits")) {
      const auto& sp = j.at("splits");
      s.splits = SplitSpec{sp.value("query", std::size_t{0}), sp.value("gallery", std::size_t{0}),
                           sp.value("val_query", std::size_t{0}), sp.value("val_gallery", std::size_t{0})};
    }
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed dataset spec: ") + e.what());
  }
}

inline nlohmann::json to_json(const SyntheticDataset& ds) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : ds.samples)
    samples.push_back({{"x", s.x}, {"identity", s.identity}, {"hard", s.hard}, {"domain", to_string(s.domain)}});
  return {{"format_version", kDatasetFormatVersion},
          {"spec", to_json(ds.spec)},
          {"samples", std::move(samples)},
          {"splits",
           {{"train", ds.splits.train},
            {"query", ds.splits.query},
            {"gallery", ds.splits.gallery},
            {"val_query", ds.splits.val_query},
            {"val_gallery", ds.splits.val_gallery}}}};
}

inline SyntheticDataset dataset_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kDatasetFormatVersion)
      throw ConfigError("unsupported dataset format_version");
    SyntheticDataset ds;
    ds.spec = domain_spec_from_json(j.at("spec"));
    for (const auto& s : j.at("samples")) {
      Sample smp{s.at("x").get<Vector>(), s.at("identity").get<int>(), s.at("hard").get<bool>(),
                 domain_from_string(s.at("domain").get<std::string>())};
      if (smp.x.size() != ds.spec.input_dim) throw ShapeError("dataset sample has the wrong dimension");
      ds.samples.push_back(std::move(smp));
    }
    const auto& sp = j.at("splits");
    ds.splits.train = sp.at("train").get<std::vector<std::size_t>>();
    ds.splits.query = sp.at("query").get<std::vector<std::size_t>>();
    ds.splits.gallery = sp.at("gallery").get<std::vector<std::size_t>>();
    ds.splits.val_query = sp.at("val_query").get<std::vector<std::size_t>>();
    ds.splits.val_gallery = sp.at("val_gallery").get<std::vector<std::size_t>>();
    for (auto* s : {&ds.splits.train, &ds.splits.query, &ds.splits.gallery, &ds.splits.val_query,
                    &ds.splits.val_gallery})
      for (std::size_t i : *s)
        if (i >= ds.samples.size()) throw ConfigError("dataset split index out of range");
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed dataset: ") + e.what());
  }
}

inline void save_dataset(const SyntheticDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << to_json(ds).dump() << '\n';
}

inline SyntheticDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("dataset " + path + " is not valid JSON: " + e.what());
  }
  return dataset_from_json(j);
}

}  // namespace mcnmt
