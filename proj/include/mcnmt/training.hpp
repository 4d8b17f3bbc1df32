// SGD on batch-hard triplet loss over P x K batches.
#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "mcnmt/core.hpp"
#include "mcnmt/encoder.hpp"
#include "mcnmt/losses.hpp"

namespace mcnmt {

struct TrainOptions {
  std::size_t P = 16;
  std::size_t K = 4;
  double margin = 0.5;
  double learning_rate = 0.05;
};

struct TrainStats {
  std::size_t steps = 0;
  double mean_loss = 0.0;  // mean batch loss over the steps taken
  std::size_t P_used = 0;
};

/// One SGD step on the triplet loss of a single batch. Returns the batch loss.
inline double triplet_sgd_step(EncoderParams& model, std::span<const Vector> inputs, std::span<const int> labels,
                               double margin, double learning_rate) {
  std::vector<Vector> emb;
  emb.reserve(inputs.size());
  for (const auto& x : inputs) emb.push_back(forward(model, x).values);
  const auto res = triplet_loss_batch_hard(emb, labels, margin);
  if (res.loss > 0.0) model = sgd_step(model, backward(model, inputs, res.upstream_grads), learning_rate);
  return res.loss;
}

/// Runs `steps` P x K steps on a labeled pool. Only labels with at least two
/// samples take part (a singleton label has no positive pair); P is clamped to
/// the number of such labels. Fewer than two usable labels means no step is
/// taken and steps == 0 in the result.
inline TrainStats train_triplet(EncoderParams& model, std::span<const Vector> inputs, std::span<const int> labels,
                                std::size_t steps, const TrainOptions& opt, Rng& rng) {
  if (inputs.size() != labels.size()) throw ShapeError("train_triplet: inputs and labels differ in length");
  TrainStats stats;
  if (steps == 0) return stats;

  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];
  std::vector<std::size_t> pool;
  std::vector<int> pool_labels;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (counts[labels[i]] >= 2) {
      pool.push_back(i);
      pool_labels.push_back(labels[i]);
    }
  std::size_t usable = 0;
  for (const auto& [l, c] : counts) usable += c >= 2;
  if (usable < 2) return stats;
  stats.P_used = std::min(opt.P, usable);

  std::vector<Vector> batch_inputs;
  double loss_sum = 0.0;
  for (std::size_t s = 0; s < steps; ++s) {
    const auto batch = sample_pk_batch(pool_labels, stats.P_used, opt.K, rng);
    batch_inputs.clear();
    for (std::size_t k : batch.indices) batch_inputs.push_back(inputs[pool[k]]);
    loss_sum += triplet_sgd_step(model, batch_inputs, batch.labels, opt.margin, opt.learning_rate);
    ++stats.steps;
  }
  stats.mean_loss = loss_sum / static_cast<double>(stats.steps);
  return stats;
}

}  // namespace mcnmt
