#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

#include "mcnmt/clustering.hpp"
#include "mcnmt/pipeline.hpp"
#include "oracles.hpp"

using namespace mcnmt;

namespace {

// A few Gaussian blobs plus uniform background.
std::vector<Vector> blobs(std::mt19937_64& rng, std::size_t n, std::size_t dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uni(-4.0, 4.0);
  std::uniform_int_distribution<int> k_dist(1, 5);
  const int k = k_dist(rng);
  std::vector<Vector> centers(static_cast<std::size_t>(k), Vector(dim));
  for (auto& c : centers)
    for (double& v : c) v = uni(rng);
  std::vector<Vector> pts;
  std::uniform_int_distribution<int> pick(0, k);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = pick(rng);
    Vector p(dim);
    for (std::size_t d = 0; d < dim; ++d)
      p[d] = c == k ? uni(rng) : centers[static_cast<std::size_t>(c)][d] + 0.4 * normal(rng);
    pts.push_back(p);
  }
  return pts;
}

void expect_partition(const GranularityPartition& part, std::size_t total) {
  std::vector<int> seen(total, 0);
  for (const auto& t : part.tiers)
    for (std::size_t i : t) {
      ASSERT_LT(i, total);
      ++seen[i];
    }
  for (int s : seen) EXPECT_EQ(s, 1);
}

}  // namespace

TEST(Dbscan, SinglePointIsOutlier) {
  const auto r = dbscan(std::vector<Vector>{{0.0, 0.0}}, 1.0, 4);
  EXPECT_EQ(r.assignments, (std::vector<int>{kOutlier}));
  EXPECT_EQ(r.cluster_count, 0u);
}

TEST(Dbscan, TwoCoincidentGroupsAndAnIsolatedPoint) {
  std::vector<Vector> pts;
  for (int i = 0; i < 5; ++i) pts.push_back({0.0, 0.0});
  for (int i = 0; i < 5; ++i) pts.push_back({10.0, 10.0});
  pts.push_back({-20.0, 5.0});
  const auto r = dbscan(pts, 0.01, 4);
  EXPECT_EQ(r.cluster_count, 2u);
  EXPECT_EQ(r.outlier_count(), 1u);
  EXPECT_EQ(oracle::canonical(r.assignments), oracle::dbscan(pts, 0.01, 4));
  EXPECT_EQ(r.assignments[10], kOutlier);
}

TEST(Dbscan, EmptyInputIsEmptyResult) {
  const auto r = dbscan(std::vector<Vector>{}, 1.0, 4);
  EXPECT_TRUE(r.assignments.empty());
}

TEST(Dbscan, RejectsBadArguments) {
  const std::vector<Vector> pts{{0.0}, {1.0}};
  EXPECT_THROW(dbscan(pts, 0.0, 4), ConfigError);
  EXPECT_THROW(dbscan(pts, 1.0, 0), ConfigError);
  EXPECT_THROW(dbscan(std::vector<Vector>{{0.0}, {std::nan("")}}, 1.0, 1), NumericError);
}

TEST(Dbscan, RadiusTakenFromAPairDistanceContainsThatPair) {
  // find a pair whose squared distance rounds above the square of its distance
  std::mt19937_64 rng(31);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Vector> pair;
  double eps = 0.0;
  for (int tries = 0; tries < 100000 && pair.empty(); ++tries) {
    Vector a(8), b(8);
    for (std::size_t d = 0; d < 8; ++d) {
      a[d] = normal(rng);
      b[d] = normal(rng);
    }
    const double e = euclidean_distance(a, b);
    if (squared_distance(a, b) > e * e) {
      pair = {a, b};
      eps = e;
    }
  }
  ASSERT_FALSE(pair.empty());
  EXPECT_EQ(dbscan(pair, eps, 2).assignments, (std::vector<int>{0, 0}));
}

TEST(Dbscan, MatchesBruteForceOracle) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> n_dist(1, 120), d_dist(1, 16), mp(1, 6);
  for (int trial = 0; trial < 40; ++trial) {
    const auto pts = blobs(rng, n_dist(rng), d_dist(rng));
    const double eps = pts.size() > 1 ? distance_quantile(pts, 0.05) + 1e-9 : 1.0;
    const std::size_t min_pts = mp(rng);
    const auto r = dbscan(pts, eps, min_pts);
    ASSERT_EQ(oracle::canonical(r.assignments), oracle::dbscan(pts, eps, min_pts)) << "trial " << trial;
    // contract: ids contiguous and every cluster at least min_pts strong
    std::vector<std::size_t> sizes(r.cluster_count, 0);
    for (int a : r.assignments)
      if (a != kOutlier) ++sizes.at(static_cast<std::size_t>(a));
    for (std::size_t s : sizes) EXPECT_GE(s, min_pts);
  }
}

TEST(Dbscan, InvariantUnderInputPermutation) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pts = blobs(rng, 80, 4);
    const double eps = distance_quantile(pts, 0.05);
    const auto r = dbscan(pts, eps, 4);
    std::vector<std::size_t> perm(pts.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Vector> shuffled;
    for (std::size_t i : perm) shuffled.push_back(pts[i]);
    const auto s = dbscan(shuffled, eps, 4);
    std::vector<int> back(pts.size());
    for (std::size_t k = 0; k < perm.size(); ++k) back[perm[k]] = s.assignments[k];
    EXPECT_EQ(oracle::canonical(back), oracle::canonical(r.assignments));
  }
}

TEST(Partition, SinglePeel) {
  std::vector<Vector> pts;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> tiny(0.0, 1e-3);
  for (int i = 0; i < 20; ++i) pts.push_back({tiny(rng), tiny(rng)});
  pts.push_back({10.0, 0.0});
  pts.push_back({0.0, 10.0});
  pts.push_back({-10.0, -10.0});
  const auto part = partition_embeddings(pts, 2, Vector{0.1}, 4);
  std::vector<std::size_t> blob(20);
  std::iota(blob.begin(), blob.end(), std::size_t{0});
  EXPECT_EQ(part.tier(1), blob);
  EXPECT_EQ(part.tier(2), (std::vector<std::size_t>{20, 21, 22}));
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(part.pseudo_labels[i], 0);
  for (std::size_t i = 20; i < 23; ++i) EXPECT_EQ(part.pseudo_labels[i], kOutlier);
}

TEST(Partition, RejectsBadLevelsAndShortSchedules) {
  const std::vector<Vector> pts{{0.0}, {1.0}};
  EXPECT_THROW(partition_embeddings(pts, 1, Vector{0.1}, 1), ConfigError);
  EXPECT_THROW(partition_embeddings(pts, 4, Vector{0.1, 0.1}, 1), ConfigError);
}

TEST(Partition, TiersAlwaysPartitionTheInput) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> n_dist(0, 60), d_dist(1, 8), lvl(2, 6), mp(1, 5);
  std::uniform_real_distribution<double> ratio(0.5, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const auto pts = blobs(rng, n_dist(rng), d_dist(rng));
    const std::size_t n = lvl(rng);
    const double eps0 = pts.size() > 1 ? distance_quantile(pts, 0.1) + 1e-6 : 1.0;
    const auto part = partition_embeddings(pts, n, geometric_eps_schedule(eps0, ratio(rng), n - 1), mp(rng));
    ASSERT_EQ(part.tiers.size(), n);
    expect_partition(part, pts.size());
    for (std::size_t t = 1; t < n; ++t)
      for (std::size_t i : part.tier(t)) EXPECT_NE(part.pseudo_labels[i], kOutlier);
    for (std::size_t i : part.tier(n)) EXPECT_EQ(part.pseudo_labels[i], kOutlier);
  }
}

TEST(Partition, MatchesStraightLinePeelingOnSyntheticTarget) {
  const auto bench = make_benchmark("default-shift", 4);
  RunConfig cfg;
  const auto m_src = train_source(bench.source.labeled(bench.source.splits.train), cfg, 4);
  const auto emb = embed_all(m_src, bench.target.inputs(bench.target.splits.train));
  const auto eps = eps_schedule_for(cfg, emb, 3);
  const auto part = partition_embeddings(emb, 3, eps, cfg.min_pts);

  // Re-execution: round 1 over everything, round 2 over round-1 inliers.
  std::vector<std::size_t> t1, t2, t3;
  const auto r1 = dbscan(emb, eps[0], cfg.min_pts);
  std::vector<std::size_t> in1;
  for (std::size_t i = 0; i < emb.size(); ++i) (r1.assignments[i] == kOutlier ? t3 : in1).push_back(i);
  std::vector<Vector> sub;
  for (std::size_t i : in1) sub.push_back(emb[i]);
  const auto r2 = dbscan(sub, eps[1], cfg.min_pts);
  std::vector<int> t1_labels;
  for (std::size_t k = 0; k < in1.size(); ++k) {
    if (r2.assignments[k] == kOutlier) {
      t2.push_back(in1[k]);
    } else {
      t1.push_back(in1[k]);
      t1_labels.push_back(r2.assignments[k]);
    }
  }
  std::sort(t2.begin(), t2.end());
  EXPECT_EQ(part.tier(1), t1);
  EXPECT_EQ(part.tier(2), t2);
  EXPECT_EQ(part.tier(3), t3);
  EXPECT_FALSE(t1.empty());
  EXPECT_FALSE(t2.empty());
  EXPECT_FALSE(t3.empty());

  std::vector<int> got;
  for (std::size_t i : t1) got.push_back(part.pseudo_labels[i]);
  EXPECT_EQ(oracle::canonical(got), oracle::canonical(t1_labels));
  std::vector<int> got2, want2;
  for (std::size_t i : t2) {
    got2.push_back(part.pseudo_labels[i]);
    want2.push_back(r1.assignments[i]);
  }
  EXPECT_EQ(oracle::canonical(got2), oracle::canonical(want2));
  for (std::size_t i : in1) EXPECT_EQ(part.base_labels[i], r1.assignments[i]);
}

TEST(Partition, JsonRoundTripAndValidation) {
  std::mt19937_64 rng(3);
  const auto pts = blobs(rng, 50, 3);
  const auto part = partition_embeddings(pts, 3, geometric_eps_schedule(distance_quantile(pts, 0.1), 0.8, 2), 3);
  const auto back = partition_from_json(to_json(part));
  EXPECT_EQ(back.tiers, part.tiers);
  EXPECT_EQ(back.pseudo_labels, part.pseudo_labels);
  EXPECT_EQ(back.outlier_labels, part.outlier_labels);
  auto broken = to_json(part);
  broken["tiers"][0].push_back(part.tiers[1].empty() ? 0 : part.tiers[1][0]);
  EXPECT_THROW(partition_from_json(broken), ConfigError);
}

TEST(FScore, PerfectLabelingIsOne) {
  EXPECT_DOUBLE_EQ(pairwise_fscore(std::vector<int>{5, 5, 9, 9, 2}, std::vector<int>{0, 0, 1, 1, 2}), 1.0);
}

TEST(FScore, OneClusterOverTwoIdentitiesIsHalf) {
  // 6 pairs: 2 same-identity, all 6 same-cluster; P = 2/6, R = 2/2
  EXPECT_DOUBLE_EQ(pairwise_fscore(std::vector<int>{0, 0, 0, 0}, std::vector<int>{1, 1, 2, 2}), 0.5);
}

TEST(FScore, AllDistinctIdentitiesGiveZero) {
  EXPECT_EQ(pairwise_fscore(std::vector<int>{0, 0, 1}, std::vector<int>{1, 2, 3}), 0.0);
}

TEST(FScore, OutliersLeaveThePairUniverse) {
  EXPECT_DOUBLE_EQ(pairwise_fscore(std::vector<int>{0, 0, kOutlier}, std::vector<int>{1, 1, 1}), 1.0);
  EXPECT_THROW(pairwise_fscore(std::vector<int>{0}, std::vector<int>{0, 1}), ShapeError);
}

TEST(FScore, InvariantUnderRelabelingAndMatchesPairEnumeration) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> lab(0, 4), out(0, 9);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> p(30), t(30);
    for (std::size_t i = 0; i < 30; ++i) {
      p[i] = out(rng) == 0 ? kOutlier : lab(rng);
      t[i] = lab(rng);
    }
    double sc = 0, si = 0, both = 0;
    for (std::size_t i = 0; i < 30; ++i)
      for (std::size_t j = i + 1; j < 30; ++j) {
        if (p[i] == kOutlier || p[j] == kOutlier) continue;
        sc += p[i] == p[j];
        si += t[i] == t[j];
        both += p[i] == p[j] && t[i] == t[j];
      }
    const double want = both == 0 ? 0.0 : 2 * (both / sc) * (both / si) / (both / sc + both / si);
    EXPECT_NEAR(pairwise_fscore(p, t), want, 1e-14);
    std::vector<int> renamed(p);
    for (int& v : renamed)
      if (v != kOutlier) v = 100 - v;
    EXPECT_EQ(pairwise_fscore(renamed, t), pairwise_fscore(p, t));
  }
}

TEST(EpsSchedule, GeometricTightening) {
  const auto eps = geometric_eps_schedule(0.4, 0.5, 3);
  EXPECT_EQ(eps, (Vector{0.4, 0.2, 0.1}));
  EXPECT_THROW(geometric_eps_schedule(0.0, 0.5, 3), ConfigError);
  EXPECT_THROW(geometric_eps_schedule(1.0, 1.5, 3), ConfigError);
}
