// DBSCAN, recursive inlier/outlier peeling into confidence tiers, and
// pairwise F-score of a pseudo labeling against ground truth.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcnmt/core.hpp"
#include "mcnmt/encoder.hpp"

namespace mcnmt {

struct ClusterResult {
  std::vector<int> assignments;  // cluster id or kOutlier
  std::size_t cluster_count = 0;
  double eps = 0.0;
  std::size_t min_pts = 0;

  std::size_t outlier_count() const {
    return static_cast<std::size_t>(std::count(assignments.begin(), assignments.end(), kOutlier));
  }
};

/// DBSCAN with an exact O(N^2) neighbour scan. Neighbourhoods are closed balls
/// (distance <= eps) and include the point itself; a point is core when its
/// neighbourhood has at least min_pts members. Clusters are connected
/// components of core points; a border point joins the cluster of its nearest
/// core neighbour (lowest index on ties), which keeps the result independent of
/// input order. Clusters left with fewer than min_pts members are dissolved.
/// Surviving cluster ids are contiguous, numbered by their lowest member index.
inline ClusterResult dbscan(std::span<const Vector> points, double eps, std::size_t min_pts) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw ConfigError("dbscan: eps must be positive and finite");
  if (min_pts < 1) throw ConfigError("dbscan: min_pts must be at least 1");
  ClusterResult res;
  res.eps = eps;
  res.min_pts = min_pts;
  const std::size_t n = points.size();
  res.assignments.assign(n, kOutlier);
  if (n == 0) return res;
  for (const auto& p : points) {
    if (p.size() != points[0].size()) throw ShapeError("dbscan: points differ in dimension");
    if (!all_finite(p)) throw NumericError("dbscan: non-finite embedding entry");
  }

  // compare distances, not squares: eps is usually a measured pair distance
  // and squaring can push that pair out of its own ball
  std::vector<std::vector<std::size_t>> neighbours(n);
  for (std::size_t i = 0; i < n; ++i) {
    neighbours[i].push_back(i);
    for (std::size_t j = i + 1; j < n; ++j)
      if (euclidean_distance(points[i], points[j]) <= eps) {
        neighbours[i].push_back(j);
        neighbours[j].push_back(i);
      }
  }
  std::vector<char> core(n, 0);
  for (std::size_t i = 0; i < n; ++i) core[i] = neighbours[i].size() >= min_pts;

  std::vector<int> label(n, kOutlier);
  int next = 0;
  std::vector<std::size_t> stack;
  for (std::size_t seed = 0; seed < n; ++seed) {
    if (!core[seed] || label[seed] != kOutlier) continue;
    label[seed] = next;
    stack.assign(1, seed);
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      for (std::size_t nb : neighbours[cur])
        if (core[nb] && label[nb] == kOutlier) {
          label[nb] = next;
          stack.push_back(nb);
        }
    }
    ++next;
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (core[i]) continue;
    std::size_t best = kNoIndex;
    double best_d = 0.0;
    for (std::size_t nb : neighbours[i]) {
      if (!core[nb]) continue;
      const double d = euclidean_distance(points[i], points[nb]);
      if (best == kNoIndex || d < best_d || (d == best_d && nb < best)) {
        best = nb;
        best_d = d;
      }
    }
    if (best != kNoIndex) label[i] = label[best];
  }

  std::vector<std::size_t> sizes(static_cast<std::size_t>(next), 0);
  for (int l : label)
    if (l != kOutlier) ++sizes[static_cast<std::size_t>(l)];
  std::vector<int> remap(static_cast<std::size_t>(next), kOutlier);
  int kept = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int l = label[i];
    if (l == kOutlier || sizes[static_cast<std::size_t>(l)] < min_pts) continue;
    if (remap[static_cast<std::size_t>(l)] == kOutlier) remap[static_cast<std::size_t>(l)] = kept++;
    res.assignments[i] = remap[static_cast<std::size_t>(l)];
  }
  res.cluster_count = static_cast<std::size_t>(kept);
  return res;
}

/// Distance at quantile q in [0,1] over all unordered pairs (lower nearest
/// rank). Used to put the density radius on the scale of the embeddings.
inline double distance_quantile(std::span<const Vector> points, double q) {
  if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("distance quantile must lie in [0,1]");
  std::vector<double> d;
  d.reserve(points.size() * (points.size() - (points.empty() ? 0 : 1)) / 2);
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t j = i + 1; j < points.size(); ++j) d.push_back(euclidean_distance(points[i], points[j]));
  if (d.empty()) throw ConfigError("distance quantile needs at least two points");
  const auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(d.size() - 1)));
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
  return d[k];
}

/// Geometric tightening eps_k = eps0 * ratio^(k-1) for peeling rounds
/// k = 1..rounds.
inline Vector geometric_eps_schedule(double eps0, double ratio, std::size_t rounds) {
  if (!(eps0 > 0.0)) throw ConfigError("eps schedule: eps0 must be positive");
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("eps schedule: ratio must lie in (0,1]");
  Vector eps(rounds);
  double e = eps0;
  for (std::size_t k = 0; k < rounds; ++k, e *= ratio) eps[k] = e;
  return eps;
}

struct GranularityPartition {
  std::size_t n = 0;
  Vector eps_schedule;
  std::size_t min_pts = 0;
  /// tiers[0] is T_1 (highest confidence) ... tiers[n-1] is T_n.
  std::vector<std::vector<std::size_t>> tiers;
  /// Per target sample: cluster id from the last peeling round in which it was
  /// still an inlier (the final round for T_1). Ids are unique across rounds.
  /// kOutlier for T_n.
  std::vector<int> pseudo_labels;
  /// Per target sample: cluster id from the first round, kOutlier for T_n.
  /// Every sample of T_1..T_{n-1} carries one.
  std::vector<int> base_labels;
  /// Per T_n sample: the first-round cluster whose centroid is nearest. These
  /// are the low-confidence labels T_n is trained with. kOutlier elsewhere, or
  /// when the first round found no cluster.
  std::vector<int> outlier_labels;
  std::vector<std::string> log;

  const std::vector<std::size_t>& tier(std::size_t i) const { return tiers.at(i - 1); }

  /// Labels a tier is trained with: pseudo labels for T_1..T_{n-1},
  /// nearest-centroid labels for T_n.
  std::vector<int> tier_labels(std::size_t i) const {
    const auto& source = i == n ? outlier_labels : pseudo_labels;
    std::vector<int> out;
    out.reserve(tier(i).size());
    for (std::size_t idx : tier(i)) out.push_back(source[idx]);
    return out;
  }

  std::size_t tier_of(std::size_t sample) const {
    for (std::size_t t = 0; t < tiers.size(); ++t)
      if (std::binary_search(tiers[t].begin(), tiers[t].end(), sample)) return t + 1;
    return 0;
  }
};

/// Peels `points` into n tiers. Round 1 clusters everything and its outliers
/// become T_n; round k clusters the survivors of round k-1 with eps_schedule[k-1]
/// and its outliers become T_{n-k+1}; after n-1 rounds the survivors are T_1.
inline GranularityPartition partition_embeddings(std::span<const Vector> points, std::size_t n,
                                                 std::span<const double> eps_schedule, std::size_t min_pts) {
  if (n < 2) throw ConfigError("granularity level n must be at least 2");
  if (eps_schedule.size() < n - 1)
    throw ConfigError("eps schedule needs " + std::to_string(n - 1) + " entries for n = " + std::to_string(n));

  GranularityPartition part;
  part.n = n;
  part.eps_schedule.assign(eps_schedule.begin(), eps_schedule.begin() + static_cast<std::ptrdiff_t>(n - 1));
  part.min_pts = min_pts;
  part.tiers.assign(n, {});
  part.pseudo_labels.assign(points.size(), kOutlier);
  part.base_labels.assign(points.size(), kOutlier);
  part.outlier_labels.assign(points.size(), kOutlier);

  std::vector<std::size_t> survivors(points.size());
  for (std::size_t i = 0; i < survivors.size(); ++i) survivors[i] = i;
  int label_offset = 0;
  std::vector<Vector> round1_centroids;

  for (std::size_t round = 1; round < n; ++round) {
    const std::size_t tier_index = n - round + 1;  // 1-based tier receiving this round's outliers
    if (survivors.empty()) {
      part.log.push_back("round " + std::to_string(round) + ": no inliers left, tiers T_1..T_" +
                         std::to_string(tier_index) + " stay empty");
      break;
    }
    std::vector<Vector> subset;
    subset.reserve(survivors.size());
    for (std::size_t idx : survivors) subset.push_back(points[idx]);
    const auto clusters = dbscan(subset, part.eps_schedule[round - 1], min_pts);

    std::vector<std::size_t> inliers;
    for (std::size_t k = 0; k < survivors.size(); ++k) {
      const std::size_t idx = survivors[k];
      const int c = clusters.assignments[k];
      if (c == kOutlier) {
        part.tiers[tier_index - 1].push_back(idx);
      } else {
        inliers.push_back(idx);
        part.pseudo_labels[idx] = label_offset + c;
        if (round == 1) part.base_labels[idx] = c;
      }
    }
    if (round == 1) {
      round1_centroids.assign(clusters.cluster_count, Vector(points.empty() ? 0 : points[0].size(), 0.0));
      std::vector<std::size_t> counts(clusters.cluster_count, 0);
      for (std::size_t k = 0; k < survivors.size(); ++k) {
        const int c = clusters.assignments[k];
        if (c == kOutlier) continue;
        auto& centroid = round1_centroids[static_cast<std::size_t>(c)];
        for (std::size_t d = 0; d < centroid.size(); ++d) centroid[d] += subset[k][d];
        ++counts[static_cast<std::size_t>(c)];
      }
      for (std::size_t c = 0; c < counts.size(); ++c)
        for (double& v : round1_centroids[c]) v /= static_cast<double>(counts[c]);
    }
    part.log.push_back("round " + std::to_string(round) + ": eps " + std::to_string(part.eps_schedule[round - 1]) +
                       ", " + std::to_string(clusters.cluster_count) + " clusters, " +
                       std::to_string(survivors.size() - inliers.size()) + " outliers -> T_" +
                       std::to_string(tier_index));
    label_offset += static_cast<int>(clusters.cluster_count);
    survivors = std::move(inliers);
  }
  part.tiers[0].insert(part.tiers[0].end(), survivors.begin(), survivors.end());
  for (auto& t : part.tiers) std::sort(t.begin(), t.end());

  if (!round1_centroids.empty()) {
    for (std::size_t idx : part.tiers[n - 1]) {
      std::size_t best = 0;
      double best_d = squared_distance(points[idx], round1_centroids[0]);
      for (std::size_t c = 1; c < round1_centroids.size(); ++c) {
        const double d = squared_distance(points[idx], round1_centroids[c]);
        if (d < best_d) {
          best = c;
          best_d = d;
        }
      }
      part.outlier_labels[idx] = static_cast<int>(best);
    }
  }
  return part;
}

/// Embeds the target inputs with `model` and peels them into n tiers.
inline GranularityPartition partition_granularity(std::span<const Vector> target_inputs, const EncoderParams& model,
                                                  std::size_t n, std::span<const double> eps_schedule,
                                                  std::size_t min_pts) {
  const auto emb = embed_all(model, target_inputs);
  return partition_embeddings(emb, n, eps_schedule, min_pts);
}

// ---------------------------------------------------------------------------
// Pseudo-label quality.

/// Pairwise F-score between a pseudo labeling and the true identities.
/// Samples whose pseudo label is kOutlier are left out of the pair universe.
/// Returns 0 when either precision or recall has an empty denominator.
inline double pairwise_fscore(std::span<const int> pseudo, std::span<const int> truth) {
  if (pseudo.size() != truth.size()) throw ShapeError("pairwise_fscore: labelings differ in length");
  std::map<int, double> cluster_sizes, identity_sizes;
  std::map<std::pair<int, int>, double> joint;
  for (std::size_t i = 0; i < pseudo.size(); ++i) {
    if (pseudo[i] == kOutlier) continue;
    cluster_sizes[pseudo[i]] += 1;
    identity_sizes[truth[i]] += 1;
    joint[{pseudo[i], truth[i]}] += 1;
  }
  auto pairs = [](double c) { return c * (c - 1) / 2; };
  double same_cluster = 0, same_identity = 0, both = 0;
  for (const auto& [k, c] : cluster_sizes) same_cluster += pairs(c);
  for (const auto& [k, c] : identity_sizes) same_identity += pairs(c);
  for (const auto& [k, c] : joint) both += pairs(c);
  if (same_cluster == 0 || same_identity == 0) return 0.0;
  const double precision = both / same_cluster;
  const double recall = both / same_identity;
  if (precision + recall == 0) return 0.0;
  return 2 * precision * recall / (precision + recall);
}

/// Unweighted mean of per-tier pairwise F-scores over the tiers that hold
/// pseudo labels (T_1..T_{n-1}, skipping empty ones). `truth` is indexed like
/// the partitioned sample set. Returns 0 if no tier qualifies.
inline double average_tier_fscore(const GranularityPartition& part, std::span<const int> truth) {
  if (truth.size() != part.pseudo_labels.size()) throw ShapeError("average_tier_fscore: truth has the wrong length");
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 1; i < part.n; ++i) {
    const auto& t = part.tier(i);
    if (t.empty()) continue;
    std::vector<int> p, y;
    for (std::size_t idx : t) {
      p.push_back(part.pseudo_labels[idx]);
      y.push_back(truth[idx]);
    }
    sum += pairwise_fscore(p, y);
    ++counted;
  }
  return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
}

// ---------------------------------------------------------------------------
// Partition dump.

inline nlohmann::json to_json(const GranularityPartition& p) {
  return {{"n", p.n},
          {"eps_schedule", p.eps_schedule},
          {"min_pts", p.min_pts},
          {"tiers", p.tiers},
          {"pseudo_labels", p.pseudo_labels},
          {"base_labels", p.base_labels},
          {"outlier_labels", p.outlier_labels},
          {"log", p.log}};
}

inline GranularityPartition partition_from_json(const nlohmann::json& j) {
  try {
    GranularityPartition p;
    p.n = j.at("n").get<std::size_t>();
    p.eps_schedule = j.at("eps_schedule").get<Vector>();
    p.min_pts = j.at("min_pts").get<std::size_t>();
    p.tiers = j.at("tiers").get<std::vector<std::vector<std::size_t>>>();
    p.pseudo_labels = j.at("pseudo_labels").get<std::vector<int>>();
    p.base_labels = j.at("base_labels").get<std::vector<int>>();
    p.outlier_labels = j.at("outlier_labels").get<std::vector<int>>();
    if (j.contains("log")) p.log = j.at("log").get<std::vector<std::string>>();
    if (p.n < 2 || p.tiers.size() != p.n) throw ConfigError("partition: tier count does not match n");
    const std::size_t total = p.pseudo_labels.size();
    if (p.base_labels.size() != total || p.outlier_labels.size() != total)
      throw ShapeError("partition: label arrays differ in length");
    std::vector<char> seen(total, 0);
    for (const auto& t : p.tiers)
      for (std::size_t idx : t) {
        if (idx >= total || seen[idx]) throw ConfigError("partition: tiers are not a partition of the sample set");
        seen[idx] = 1;
      }
    if (std::find(seen.begin(), seen.end(), 0) != seen.end())
      throw ConfigError("partition: tiers do not cover the sample set");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed partition: ") + e.what());
  }
}

}  // namespace mcnmt
