// Retrieval evaluation: mean average precision and CMC curves.
#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcnmt/core.hpp"

namespace mcnmt {

/// Query and gallery embeddings with their true identities. Only evaluation
/// code ever sees identities of the target domain.
struct RetrievalSplit {
  std::vector<Vector> query;
  std::vector<int> query_ids;
  std::vector<Vector> gallery;
  std::vector<int> gallery_ids;
};

struct MetricsReport {
  double mAP = 0.0;
  std::vector<double> cmc;  // cmc[k-1] = fraction of queries matched within the top k
  std::optional<double> fscore;
  std::size_t evaluated_queries = 0;
  std::size_t excluded_queries = 0;  // queries whose identity is absent from the gallery

  double rank(std::size_t k) const {
    if (cmc.empty()) return 0.0;
    return cmc[std::min(k, cmc.size()) - 1];
  }
};

/// Ranks the gallery for each query by ascending Euclidean distance (lowest
/// gallery index first on ties). AP is the mean over match positions of
/// matches-so-far / rank.
inline MetricsReport evaluate(const RetrievalSplit& split) {
  if (split.query.empty() || split.gallery.empty()) throw ShapeError("evaluate: empty query or gallery");
  if (split.query.size() != split.query_ids.size() || split.gallery.size() != split.gallery_ids.size())
    throw ShapeError("evaluate: embeddings and identities differ in length");

  const std::size_t g = split.gallery.size();
  MetricsReport rep;
  std::vector<double> hits_at(g, 0.0);
  double ap_sum = 0.0;
  std::vector<double> dist(g);
  std::vector<std::size_t> order(g);

  for (std::size_t q = 0; q < split.query.size(); ++q) {
    const int id = split.query_ids[q];
    if (std::find(split.gallery_ids.begin(), split.gallery_ids.end(), id) == split.gallery_ids.end()) {
      ++rep.excluded_queries;
      continue;
    }
    for (std::size_t j = 0; j < g; ++j) dist[j] = squared_distance(split.query[q], split.gallery[j]);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });

    double matches = 0.0, precision_sum = 0.0;
    std::size_t first_match = g;
    for (std::size_t r = 0; r < g; ++r) {
      if (split.gallery_ids[order[r]] != id) continue;
      matches += 1.0;
      precision_sum += matches / static_cast<double>(r + 1);
      if (first_match == g) first_match = r;
    }
    ap_sum += precision_sum / matches;
    hits_at[first_match] += 1.0;
    ++rep.evaluated_queries;
  }

  rep.cmc.assign(g, 0.0);
  if (rep.evaluated_queries == 0) return rep;
  const double nq = static_cast<double>(rep.evaluated_queries);
  rep.mAP = ap_sum / nq;
  double cumulative = 0.0;
  for (std::size_t r = 0; r < g; ++r) {
    cumulative += hits_at[r];
    rep.cmc[r] = cumulative / nq;
  }
  return rep;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j{{"mAP", r.mAP},
                   {"cmc", r.cmc},
                   {"evaluated_queries", r.evaluated_queries},
                   {"excluded_queries", r.excluded_queries}};
  j["fscore"] = r.fscore ? nlohmann::json(*r.fscore) : nlohmann::json(nullptr);
  return j;
}

/// Column header matching metrics_csv_row.
inline std::string metrics_csv_header() { return "mAP,rank1,rank5,rank10,fscore,evaluated_queries,excluded_queries"; }

inline std::string metrics_csv_row(const MetricsReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.mAP << ',' << r.rank(1) << ',' << r.rank(5) << ',' << r.rank(10) << ',';
  if (r.fscore) os << *r.fscore;
  os << ',' << r.evaluated_queries << ',' << r.excluded_queries;
  return os.str();
}

}  // namespace mcnmt
