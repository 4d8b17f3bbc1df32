// Batch-hard triplet loss on Euclidean distances and P x K batch sampling.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mcnmt/core.hpp"

namespace mcnmt {

/// A P x K batch drawn from a labeled pool. `indices` point into the pool the
/// batch was sampled from; labels[i] is the label of pool[indices[i]]. Samples
/// are grouped by label, K consecutive entries per label.
struct PKBatch {
  std::vector<std::size_t> indices;
  std::vector<int> labels;
  std::size_t P = 0;
  std::size_t K = 0;

  std::size_t size() const { return indices.size(); }
};

/// Draws P distinct labels uniformly without replacement, then K samples of
/// each: without replacement when the label has at least K samples, with
/// replacement otherwise.
inline PKBatch sample_pk_batch(std::span<const int> labels, std::size_t P, std::size_t K, Rng& rng) {
  if (P == 0 || K == 0) throw ConfigError("P and K must be positive");
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(i);
  if (by_label.size() < P)
    throw InsufficientIdentitiesError("P x K sampling needs " + std::to_string(P) + " distinct labels, pool has " +
                                      std::to_string(by_label.size()));

  std::vector<int> ids;
  ids.reserve(by_label.size());
  for (const auto& [label, members] : by_label) ids.push_back(label);
  // Partial Fisher-Yates: the first P entries become the chosen labels.
  for (std::size_t i = 0; i < P; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }

  PKBatch batch;
  batch.P = P;
  batch.K = K;
  batch.indices.reserve(P * K);
  batch.labels.reserve(P * K);
  for (std::size_t i = 0; i < P; ++i) {
    auto members = by_label[ids[i]];
    if (members.size() >= K) {
      for (std::size_t k = 0; k < K; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, members.size() - 1);
        std::swap(members[k], members[pick(rng)]);
        batch.indices.push_back(members[k]);
      }
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
      for (std::size_t k = 0; k < K; ++k) batch.indices.push_back(members[pick(rng)]);
    }
    for (std::size_t k = 0; k < K; ++k) batch.labels.push_back(ids[i]);
  }
  return batch;
}

/// Symmetric matrix of Euclidean distances, row-major N x N.
struct DistanceMatrix {
  std::size_t n = 0;
  std::vector<double> d;

  double operator()(std::size_t i, std::size_t j) const { return d[i * n + j]; }
};

inline DistanceMatrix pairwise_distances(std::span<const Vector> points) {
  DistanceMatrix m;
  m.n = points.size();
  m.d.assign(m.n * m.n, 0.0);
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = i + 1; j < m.n; ++j) {
      const double v = euclidean_distance(points[i], points[j]);
      m.d[i * m.n + j] = v;
      m.d[j * m.n + i] = v;
    }
  return m;
}

struct TripletLossResult {
  double loss = 0.0;                  // mean over valid anchors
  std::vector<double> per_anchor_loss;  // 0 for skipped anchors
  std::vector<double> violation;      // d_ap - d_an + margin before the hinge; NaN for skipped anchors
  std::vector<std::size_t> hardest_positive;  // kNoIndex for skipped anchors
  std::vector<std::size_t> hardest_negative;
  std::vector<Vector> upstream_grads;  // d loss / d embedding
  std::size_t valid_anchors = 0;
};

/// Batch-hard triplet loss: for each anchor the farthest same-label sample and
/// the nearest different-label sample, hinge max(d_ap - d_an + margin, 0),
/// averaged over anchors that have at least one positive. Ties go to the
/// lowest index; the hinge subgradient at exactly zero is zero.
inline TripletLossResult triplet_loss_batch_hard(std::span<const Vector> embeddings, std::span<const int> labels,
                                                 double margin) {
  const std::size_t n = embeddings.size();
  if (labels.size() != n) throw ShapeError("triplet loss: embeddings and labels differ in length");
  if (n == 0) throw ShapeError("triplet loss: empty batch");
  const std::size_t dim = embeddings[0].size();
  for (const auto& e : embeddings)
    if (e.size() != dim) throw ShapeError("triplet loss: embeddings differ in length");
  if (std::all_of(labels.begin(), labels.end(), [&](int l) { return l == labels[0]; }))
    throw NoNegativesError("triplet loss: batch holds a single label, no negatives exist");

  const auto dist = pairwise_distances(embeddings);
  TripletLossResult res;
  res.per_anchor_loss.assign(n, 0.0);
  res.violation.assign(n, std::nan(""));
  res.hardest_positive.assign(n, kNoIndex);
  res.hardest_negative.assign(n, kNoIndex);
  res.upstream_grads.assign(n, Vector(dim, 0.0));

  for (std::size_t a = 0; a < n; ++a) {
    std::size_t p = kNoIndex, q = kNoIndex;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      if (labels[j] == labels[a]) {
        if (p == kNoIndex || dist(a, j) > dist(a, p)) p = j;
      } else {
        if (q == kNoIndex || dist(a, j) < dist(a, q)) q = j;
      }
    }
    res.hardest_positive[a] = p;
    res.hardest_negative[a] = q;
    if (p == kNoIndex) continue;
    ++res.valid_anchors;
    const double v = dist(a, p) - dist(a, q) + margin;
    res.violation[a] = v;
    res.per_anchor_loss[a] = std::max(v, 0.0);
  }
  if (res.valid_anchors == 0) return res;

  const double scale = 1.0 / static_cast<double>(res.valid_anchors);
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    total += res.per_anchor_loss[a];
    if (!(res.per_anchor_loss[a] > 0.0)) continue;
    // d|x - y|/dx = (x - y) / |x - y|, taken as 0 at coincident points.
    auto accumulate = [&](std::size_t other, double sign) {
      const double d = dist(a, other);
      if (d <= 0.0) return;
      const double c = sign * scale / d;
      for (std::size_t k = 0; k < dim; ++k) {
        const double diff = c * (embeddings[a][k] - embeddings[other][k]);
        res.upstream_grads[a][k] += diff;
        res.upstream_grads[other][k] -= diff;
      }
    };
    accumulate(res.hardest_positive[a], +1.0);
    accumulate(res.hardest_negative[a], -1.0);
  }
  res.loss = total * scale;
  return res;
}

}  // namespace mcnmt
