#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "mcnmt/losses.hpp"
#include "mcnmt/synthdata.hpp"
#include "oracles.hpp"

using namespace mcnmt;

namespace {

std::vector<Vector> random_points(std::size_t n, std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Vector> pts(n, Vector(dim));
  for (auto& p : pts)
    for (double& v : p) v = normal(rng);
  return pts;
}

}  // namespace

TEST(PairwiseDistances, IdenticalVectorsGiveZeros) {
  const std::vector<Vector> pts(4, Vector{0.5, -1.0, 2.0});
  const auto m = pairwise_distances(pts);
  for (double v : m.d) EXPECT_EQ(v, 0.0);
}

TEST(PairwiseDistances, ThreeFourFive) {
  const auto m = pairwise_distances(std::vector<Vector>{{0.0, 0.0}, {3.0, 4.0}});
  EXPECT_DOUBLE_EQ(m(0, 1), 5.0);
  EXPECT_DOUBLE_EQ(m(1, 0), 5.0);
  EXPECT_EQ(m(0, 0), 0.0);
}

TEST(PairwiseDistances, MatchesDirectFormula) {
  std::mt19937_64 rng(4);
  const auto pts = random_points(25, 7, rng);
  const auto m = pairwise_distances(pts);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = 0; j < pts.size(); ++j) {
      EXPECT_NEAR(m(i, j), oracle::dist(pts[i], pts[j]), 1e-15);
      EXPECT_EQ(m(i, j), m(j, i));
    }
}

TEST(TripletLoss, InactiveHingeGivesZero) {
  // labels {0,0,1,1}: positives 1 apart, negatives 2 apart
  const std::vector<Vector> e{{0.0, 0.0}, {1.0, 0.0}, {0.0, 2.0}, {1.0, 2.0}};
  const auto r = triplet_loss_batch_hard(e, std::vector<int>{0, 0, 1, 1}, 0.5);
  EXPECT_EQ(r.loss, 0.0);
  for (const auto& g : r.upstream_grads)
    for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(TripletLoss, HandEvaluatedViolation) {
  // anchor 0: positive at distance 2, negative at distance 1, margin 0.5
  const std::vector<Vector> e{{0.0}, {2.0}, {-1.0}, {-1.5}};
  const auto r = triplet_loss_batch_hard(e, std::vector<int>{0, 0, 1, 1}, 0.5);
  EXPECT_DOUBLE_EQ(r.per_anchor_loss[0], 1.5);
  EXPECT_EQ(r.hardest_positive[0], 1u);
  EXPECT_EQ(r.hardest_negative[0], 2u);
}

TEST(TripletLoss, LossIsMeanOfNonNegativeAnchorLosses) {
  std::mt19937_64 rng(7);
  const auto e = random_points(12, 4, rng);
  std::vector<int> labels{0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3};
  const auto r = triplet_loss_batch_hard(e, labels, 0.5);
  double sum = 0.0;
  for (double v : r.per_anchor_loss) {
    EXPECT_GE(v, 0.0);
    sum += v;
  }
  EXPECT_NEAR(r.loss, sum / 12.0, 1e-15);
  const auto want = oracle::triplet_violation(e, labels, 0.5);
  for (std::size_t a = 0; a < e.size(); ++a) EXPECT_NEAR(r.violation[a], want[a], 1e-15);
}

TEST(TripletLoss, SingletonAnchorsAreSkipped) {
  const std::vector<Vector> e{{0.0}, {0.1}, {1.0}};
  const auto r = triplet_loss_batch_hard(e, std::vector<int>{0, 0, 1}, 0.5);
  EXPECT_EQ(r.valid_anchors, 2u);
  EXPECT_TRUE(std::isnan(r.violation[2]));
  EXPECT_EQ(r.per_anchor_loss[2], 0.0);
}

TEST(TripletLoss, SingleLabelIsNoNegativesError) {
  const std::vector<Vector> e{{0.0}, {1.0}};
  EXPECT_THROW(triplet_loss_batch_hard(e, std::vector<int>{3, 3}, 0.5), NoNegativesError);
}

TEST(TripletLoss, TiesGoToLowestIndex) {
  const std::vector<Vector> e{{0.0}, {1.0}, {-1.0}, {2.0}, {-2.0}};
  const auto r = triplet_loss_batch_hard(e, std::vector<int>{0, 0, 0, 1, 1}, 0.5);
  EXPECT_EQ(r.hardest_positive[0], 1u);
  EXPECT_EQ(r.hardest_negative[0], 3u);
}

TEST(TripletLoss, InvariantUnderJointPermutation) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto e = random_points(16, 5, rng);
    std::vector<int> labels(16);
    for (std::size_t i = 0; i < 16; ++i) labels[i] = static_cast<int>(i % 4);
    std::vector<std::size_t> perm(16);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Vector> pe;
    std::vector<int> pl;
    for (std::size_t i : perm) {
      pe.push_back(e[i]);
      pl.push_back(labels[i]);
    }
    EXPECT_NEAR(triplet_loss_batch_hard(e, labels, 0.5).loss, triplet_loss_batch_hard(pe, pl, 0.5).loss, 1e-14);
  }
}

TEST(TripletLoss, InvariantUnderRotation) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto e = random_points(12, 6, rng);
    std::vector<int> labels(12);
    for (std::size_t i = 0; i < 12; ++i) labels[i] = static_cast<int>(i % 3);
    Rng rot_rng(static_cast<std::uint64_t>(trial));
    const auto rot = random_rotation(6, rot_rng);
    std::vector<Vector> re;
    for (const auto& v : e) {
      Vector w(6, 0.0);
      for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t c = 0; c < 6; ++c) w[r] += rot(r, c) * v[c];
      re.push_back(w);
    }
    EXPECT_NEAR(triplet_loss_batch_hard(e, labels, 0.5).loss, triplet_loss_batch_hard(re, labels, 0.5).loss, 1e-12);
  }
}

TEST(TripletLoss, GradientMatchesFiniteDifferencesOnEmbeddings) {
  std::mt19937_64 rng(10);
  int checked = 0;
  for (int trial = 0; trial < 30 && checked < 10; ++trial) {
    auto e = random_points(8, 3, rng);
    const std::vector<int> labels{0, 0, 1, 1, 2, 2, 3, 3};
    const auto base = triplet_loss_batch_hard(e, labels, 0.5);
    const double h = 1e-5;
    bool clean = true;
    std::vector<std::pair<double, double>> pairs;
    for (std::size_t i = 0; i < e.size(); ++i)
      for (std::size_t d = 0; d < 3; ++d) {
        const double keep = e[i][d];
        e[i][d] = keep + h;
        const auto up = triplet_loss_batch_hard(e, labels, 0.5);
        e[i][d] = keep - h;
        const auto down = triplet_loss_batch_hard(e, labels, 0.5);
        e[i][d] = keep;
        for (const auto* r : {&up, &down})
          if (r->hardest_positive != base.hardest_positive || r->hardest_negative != base.hardest_negative)
            clean = false;
        pairs.emplace_back(base.upstream_grads[i][d], (up.loss - down.loss) / (2 * h));
      }
    for (double v : base.violation)
      if (std::abs(v) < 1e-3) clean = false;
    if (!clean) continue;
    ++checked;
    for (const auto& [a, n] : pairs) EXPECT_LT(oracle::relative_error(a, n), 1e-4);
  }
  EXPECT_GE(checked, 10);
}

TEST(TripletLoss, ZeroWhenPositiveCloserByMargin) {
  const std::vector<Vector> e{{0.0}, {0.1}, {5.0}, {5.1}};
  const auto r = triplet_loss_batch_hard(e, std::vector<int>{0, 0, 1, 1}, 0.5);
  for (double v : r.per_anchor_loss) EXPECT_EQ(v, 0.0);
}

TEST(PKBatch, SixteenByFourBatch) {
  std::vector<int> labels;
  for (int id = 0; id < 30; ++id)
    for (int k = 0; k < 10; ++k) labels.push_back(id);
  Rng rng(1);
  const auto b = sample_pk_batch(labels, 16, 4, rng);
  EXPECT_EQ(b.size(), 64u);
  std::map<int, int> per;
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_EQ(labels[b.indices[i]], b.labels[i]);
    ++per[b.labels[i]];
  }
  EXPECT_EQ(per.size(), 16u);
  for (const auto& [l, c] : per) EXPECT_EQ(c, 4);
  // K <= group size: drawn without replacement
  std::set<std::size_t> distinct(b.indices.begin(), b.indices.end());
  EXPECT_EQ(distinct.size(), 64u);
}

TEST(PKBatch, MinimalCase) {
  Rng rng(5);
  const auto b = sample_pk_batch(std::vector<int>{7}, 1, 1, rng);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b.indices[0], 0u);
  EXPECT_EQ(b.labels[0], 7);
}

TEST(PKBatch, DeterministicGivenSeed) {
  std::vector<int> labels;
  for (int id = 0; id < 10; ++id)
    for (int k = 0; k < 3; ++k) labels.push_back(id);
  Rng a(42), b(42);
  const auto x = sample_pk_batch(labels, 2, 2, a);
  const auto y = sample_pk_batch(labels, 2, 2, b);
  EXPECT_EQ(x.indices, y.indices);
  EXPECT_EQ(x.labels, y.labels);
}

TEST(PKBatch, SmallGroupsSampledWithReplacement) {
  Rng rng(3);
  const auto b = sample_pk_batch(std::vector<int>{0, 0, 1}, 2, 4, rng);
  EXPECT_EQ(b.size(), 8u);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(std::vector<int>({0, 0, 1})[b.indices[i]], b.labels[i]);
}

TEST(PKBatch, TooFewLabelsIsError) {
  Rng rng(3);
  EXPECT_THROW(sample_pk_batch(std::vector<int>{0, 0, 1, 1}, 3, 2, rng), InsufficientIdentitiesError);
}
