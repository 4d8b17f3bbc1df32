// End-to-end driver: source training, tiered pseudo-labeling, warm-start
// fine-tuning, multiple co-teaching, and the ablation / n-sweep runner.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcnmt/clustering.hpp"
#include "mcnmt/core.hpp"
#include "mcnmt/coteach.hpp"
#include "mcnmt/encoder.hpp"
#include "mcnmt/evalmetrics.hpp"
#include "mcnmt/synthdata.hpp"
#include "mcnmt/training.hpp"

namespace mcnmt {

/// Fixed density radius for high-dimensional pooled features. Too small for
/// the unit-norm 16-d embeddings used here; pass it as eps0 explicitly.
inline constexpr double kFeatureEps = 1.6e-3;

struct RunConfig {
  std::size_t n = 3;
  std::size_t r = 30;
  double alpha = 0.999;
  double margin = 0.5;
  std::size_t P = 16;
  std::size_t K = 4;
  double keep_rate = 0.8;
  // Density radius of the first peeling round: eps0 if positive, otherwise the
  // eps_quantile of pairwise target distances. Round k uses eps0 * eps_ratio^(k-1).
  double eps0 = 0.0;
  double eps_quantile = 0.01;
  double eps_ratio = 0.75;
  std::size_t min_pts = 4;
  double learning_rate = 0.05;
  std::size_t steps_source = 300;
  std::size_t steps_finetune = 200;
  std::size_t steps_per_round = 10;
  std::size_t patience = 10;
  std::vector<std::size_t> hidden_dims = {32, 32};
  std::size_t embedding_dim = 16;
  std::uint64_t seed = 1;
  std::size_t num_seeds = 1;
  bool mean_teaching = true;
  bool select_with_ema = true;
  bool repartition = false;
  std::string preset = "default-shift";
  std::vector<std::size_t> sweep_n = {2, 3, 4, 5, 6};

  /// Throws ConfigError naming the first offending field.
  void validate() const {
    auto fail = [](const char* field, const std::string& why) {
      throw ConfigError(std::string("config field '") + field + "': " + why);
    };
    if (n < 2) fail("n", "must be at least 2");
    if (r < 1) fail("r", "must be at least 1");
    if (!(alpha >= 0.0 && alpha < 1.0)) fail("alpha", "must lie in [0,1)");
    if (!(margin >= 0.0) || !std::isfinite(margin)) fail("margin", "must be a finite number >= 0");
    if (P < 1) fail("P", "must be at least 1");
    if (K < 2) fail("K", "must be at least 2");
    if (!(keep_rate > 0.0 && keep_rate <= 1.0)) fail("keep_rate", "must lie in (0,1]");
    if (!(eps0 >= 0.0) || !std::isfinite(eps0)) fail("eps0", "must be a finite number >= 0");
    if (!(eps_quantile > 0.0 && eps_quantile < 1.0)) fail("eps_quantile", "must lie in (0,1)");
    if (!(eps_ratio > 0.0 && eps_ratio <= 1.0)) fail("eps_ratio", "must lie in (0,1]");
    if (min_pts < 1) fail("min_pts", "must be at least 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate", "must be positive");
    if (hidden_dims.empty()) fail("hidden_dims", "needs at least one hidden layer");
    for (std::size_t d : hidden_dims)
      if (d == 0) fail("hidden_dims", "entries must be positive");
    if (embedding_dim < 1) fail("embedding_dim", "must be positive");
    if (num_seeds < 1) fail("num_seeds", "must be at least 1");
    const auto presets = benchmark_presets();
    if (std::find(presets.begin(), presets.end(), preset) == presets.end())
      fail("preset", "unknown benchmark preset '" + preset + "'");
    if (sweep_n.empty()) fail("sweep_n", "must not be empty");
    for (std::size_t v : sweep_n)
      if (v < 2) fail("sweep_n", "entries must be at least 2");
  }

  TrainOptions train_options() const { return TrainOptions{P, K, margin, learning_rate}; }

  CoTeachConfig coteach_config(std::uint64_t run_seed, bool with_mean_teaching) const {
    CoTeachConfig c;
    c.rounds = r;
    c.steps_per_round = steps_per_round;
    c.patience = patience;
    c.keep_rate = keep_rate;
    c.alpha = alpha;
    c.mean_teaching = with_mean_teaching;
    c.select_with_ema = select_with_ema;
    c.train = train_options();
    c.seed = derive_seed(run_seed, "coteach");
    return c;
  }

  std::vector<std::size_t> layer_dims(std::size_t input_dim) const {
    std::vector<std::size_t> dims{input_dim};
    dims.insert(dims.end(), hidden_dims.begin(), hidden_dims.end());
    dims.push_back(embedding_dim);
    return dims;
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"n", c.n},
          {"r", c.r},
          {"alpha", c.alpha},
          {"margin", c.margin},
          {"P", c.P},
          {"K", c.K},
          {"keep_rate", c.keep_rate},
          {"eps0", c.eps0},
          {"eps_quantile", c.eps_quantile},
          {"eps_ratio", c.eps_ratio},
          {"min_pts", c.min_pts},
          {"learning_rate", c.learning_rate},
          {"steps_source", c.steps_source},
          {"steps_finetune", c.steps_finetune},
          {"steps_per_round", c.steps_per_round},
          {"patience", c.patience},
          {"hidden_dims", c.hidden_dims},
          {"embedding_dim", c.embedding_dim},
          {"seed", c.seed},
          {"num_seeds", c.num_seeds},
          {"mean_teaching", c.mean_teaching},
          {"select_with_ema", c.select_with_ema},
          {"repartition", c.repartition},
          {"preset", c.preset},
          {"sweep_n", c.sweep_n}};
}

/// Applies the keys of a flat JSON object on top of `base`. Unknown keys and
/// wrongly typed values are ConfigErrors; `base` is untouched on failure.
inline RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  if (!j.is_object()) throw ConfigError("config must be a flat JSON object");
  RunConfig c = base;
  for (const auto& [key, value] : j.items()) {
    auto as_size = [&](std::size_t& dst) {
      if (!value.is_number_unsigned() && !(value.is_number_integer() && value.get<long long>() >= 0))
        throw ConfigError("config field '" + key + "': expected a non-negative integer");
      dst = value.get<std::size_t>();
    };
    auto as_double = [&](double& dst) {
      if (!value.is_number()) throw ConfigError("config field '" + key + "': expected a number");
      dst = value.get<double>();
    };
    auto as_bool = [&](bool& dst) {
      if (!value.is_boolean()) throw ConfigError("config field '" + key + "': expected true or false");
      dst = value.get<bool>();
    };
    auto as_sizes = [&](std::vector<std::size_t>& dst) {
      if (!value.is_array()) throw ConfigError("config field '" + key + "': expected an array of integers");
      std::vector<std::size_t> out;
      for (const auto& e : value) {
        if (!e.is_number_unsigned()) throw ConfigError("config field '" + key + "': expected non-negative integers");
        out.push_back(e.get<std::size_t>());
      }
      dst = std::move(out);
    };
    if (key == "n") as_size(c.n);
    else if (key == "r") as_size(c.r);
    else if (key == "alpha") as_double(c.alpha);
    else if (key == "margin") as_double(c.margin);
    else if (key == "P") as_size(c.P);
    else if (key == "K") as_size(c.K);
    else if (key == "keep_rate") as_double(c.keep_rate);
    else if (key == "eps0") as_double(c.eps0);
    else if (key == "eps_quantile") as_double(c.eps_quantile);
    else if (key == "eps_ratio") as_double(c.eps_ratio);
    else if (key == "min_pts") as_size(c.min_pts);
    else if (key == "learning_rate") as_double(c.learning_rate);
    else if (key == "steps_source") as_size(c.steps_source);
    else if (key == "steps_finetune") as_size(c.steps_finetune);
    else if (key == "steps_per_round") as_size(c.steps_per_round);
    else if (key == "patience") as_size(c.patience);
    else if (key == "hidden_dims") as_sizes(c.hidden_dims);
    else if (key == "embedding_dim") as_size(c.embedding_dim);
    else if (key == "seed") {
      if (!value.is_number_unsigned()) throw ConfigError("config field 'seed': expected a non-negative integer");
      c.seed = value.get<std::uint64_t>();
    }
    else if (key == "num_seeds") as_size(c.num_seeds);
    else if (key == "mean_teaching") as_bool(c.mean_teaching);
    else if (key == "select_with_ema") as_bool(c.select_with_ema);
    else if (key == "repartition") as_bool(c.repartition);
    else if (key == "preset") {
      if (!value.is_string()) throw ConfigError("config field 'preset': expected a string");
      c.preset = value.get<std::string>();
    }
    else if (key == "sweep_n") as_sizes(c.sweep_n);
    else throw ConfigError("config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j, std::move(base));
}

/// Hash of every field except the seed fields, as 16 hex digits.
inline std::string config_hash(const RunConfig& c) {
  auto j = to_json(c);
  j.erase("seed");
  j.erase("num_seeds");
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(j.dump());
  return os.str();
}

// ---------------------------------------------------------------------------
// Stages.

/// Initialises the encoder from the run seed and trains it with triplet loss
/// on the labeled source set.
inline EncoderParams train_source(const LabeledSet& source, const RunConfig& cfg, std::uint64_t seed) {
  if (source.inputs.empty()) throw InsufficientIdentitiesError("source set is empty");
  std::vector<int> ids = source.labels;
  std::sort(ids.begin(), ids.end());
  if (std::unique(ids.begin(), ids.end()) - ids.begin() < 2)
    throw InsufficientIdentitiesError("source training needs at least two identities");
  Rng init_rng = make_stream(seed, "encoder-init");
  EncoderParams model = init_encoder(cfg.layer_dims(source.inputs[0].size()), init_rng);
  Rng batch_rng = make_stream(seed, "source-batches");
  train_triplet(model, source.inputs, source.labels, cfg.steps_source, cfg.train_options(), batch_rng);
  return model;
}

/// eps for each of the n-1 peeling rounds.
inline Vector eps_schedule_for(const RunConfig& cfg, std::span<const Vector> embeddings, std::size_t n) {
  const double eps0 = cfg.eps0 > 0.0 ? cfg.eps0 : distance_quantile(embeddings, cfg.eps_quantile);
  return geometric_eps_schedule(eps0, cfg.eps_ratio, n - 1);
}

inline GranularityPartition compute_partition(const EncoderParams& model, const UnlabeledSet& target,
                                              const RunConfig& cfg, std::size_t n) {
  const auto emb = embed_all(model, target.inputs);
  const auto eps = eps_schedule_for(cfg, emb, n);
  return partition_embeddings(emb, n, eps, cfg.min_pts);
}

struct AdaptResult {
  EncoderParams model;
  std::size_t training_samples = 0;
  std::string warning;
};

/// Fine-tunes M_src on T_1 .. T_{n-1}. Each sample is labeled with its
/// first-round cluster, the one labeling shared by the whole union.
inline AdaptResult adapt_finetune(const EncoderParams& m_src, const UnlabeledSet& target,
                                  const GranularityPartition& part, const RunConfig& cfg, std::uint64_t seed) {
  if (part.base_labels.size() != target.inputs.size())
    throw ShapeError("partition does not match the target sample count");
  AdaptResult res{m_src, 0, {}};
  std::vector<Vector> inputs;
  std::vector<int> labels;
  for (std::size_t t = 1; t < part.n; ++t)
    for (std::size_t idx : part.tier(t)) {
      inputs.push_back(target.inputs[idx]);
      labels.push_back(part.base_labels[idx]);
    }
  res.training_samples = inputs.size();
  if (inputs.empty()) {
    res.warning = "tiers T_1..T_{n-1} are empty; returning the source model unchanged";
    return res;
  }
  Rng rng = make_stream(seed, "finetune-batches");
  const auto stats = train_triplet(res.model, inputs, labels, cfg.steps_finetune, cfg.train_options(), rng);
  if (stats.steps == 0 && cfg.steps_finetune > 0)
    res.warning = "fewer than two pseudo-label clusters with two members; no fine-tuning steps taken";
  return res;
}

/// Embeds `query` and `gallery` of a labeled dataset and scores retrieval.
inline MetricsReport evaluate_model(const EncoderParams& model, const SyntheticDataset& ds,
                                    std::span<const std::size_t> query, std::span<const std::size_t> gallery) {
  RetrievalSplit split;
  split.query = embed_all(model, ds.inputs(query));
  split.query_ids = ds.identities(query);
  split.gallery = embed_all(model, ds.inputs(gallery));
  split.gallery_ids = ds.identities(gallery);
  return evaluate(split);
}

inline MetricsReport evaluate_test(const EncoderParams& model, const SyntheticDataset& target) {
  return evaluate_model(model, target, target.splits.query, target.splits.gallery);
}

/// mAP on the held-out validation slice of the target domain.
inline Validator make_validator(const SyntheticDataset& target) {
  if (target.splits.val_query.empty() || target.splits.val_gallery.empty())
    throw ConfigError("target dataset has no validation split");
  return [&target](const EncoderParams& m) {
    return evaluate_model(m, target, target.splits.val_query, target.splits.val_gallery).mAP;
  };
}

inline McnResult run_coteaching(const EncoderParams& m_ada, const UnlabeledSet& target,
                                const GranularityPartition& part, const RunConfig& cfg, std::uint64_t seed,
                                bool with_mean_teaching, const Validator& validate) {
  ModelBank bank = ModelBank::replicate(m_ada, part.n, cfg.alpha);
  std::function<GranularityPartition(const EncoderParams&)> repartition;
  if (cfg.repartition)
    repartition = [&](const EncoderParams& teacher) { return compute_partition(teacher, target, cfg, part.n); };
  return run_mcn(bank, target.inputs, part, cfg.coteach_config(seed, with_mean_teaching), validate, repartition);
}

// ---------------------------------------------------------------------------
// Experiments.

inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v{"direct-transfer", "fine-tune", "mcn", "mcn-mt"};
  return v;
}

struct MetricRow {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string variant;
  std::size_t n = 0;
  MetricsReport report;
};

struct RoundRow {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string variant;
  std::size_t n = 0;
  RoundLog log;
};

struct ExperimentResult {
  RunConfig config;
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::vector<MetricRow> metrics;
  std::vector<RoundRow> rounds;
  std::vector<std::string> notes;

  std::vector<double> values(const std::string& variant, std::size_t n,
                             const std::function<double(const MetricsReport&)>& pick) const {
    std::vector<double> out;
    for (const auto& m : metrics)
      if (m.variant == variant && m.n == n) out.push_back(pick(m.report));
    return out;
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

inline std::string metric_csv_header() { return "config_hash,seed,variant,n," + metrics_csv_header(); }

inline std::string metric_csv_row(const MetricRow& m) {
  return m.config_hash + ',' + std::to_string(m.seed) + ',' + m.variant + ',' + std::to_string(m.n) + ',' +
         metrics_csv_row(m.report);
}

inline std::string round_csv_header() { return "config_hash,seed,variant,n," + round_log_csv_header(); }

inline std::string round_csv_row(const RoundRow& r) {
  return r.config_hash + ',' + std::to_string(r.seed) + ',' + r.variant + ',' + std::to_string(r.n) + ',' +
         round_log_csv_row(r.log);
}

/// Receives rows as they are produced so partial results survive an abort.
struct ExperimentSink {
  std::ostream* metrics = nullptr;
  std::ostream* rounds = nullptr;
  std::ostream* notes = nullptr;
};

namespace detail {

struct Recorder {
  ExperimentResult& result;
  const ExperimentSink& sink;

  void metric(std::uint64_t seed, const std::string& variant, std::size_t n, MetricsReport rep) {
    result.metrics.push_back(MetricRow{result.config_hash, seed, variant, n, std::move(rep)});
    if (sink.metrics) *sink.metrics << metric_csv_row(result.metrics.back()) << '\n' << std::flush;
  }
  void rounds(std::uint64_t seed, const std::string& variant, std::size_t n, const std::vector<RoundLog>& logs) {
    for (const auto& l : logs) {
      result.rounds.push_back(RoundRow{result.config_hash, seed, variant, n, l});
      if (sink.rounds) *sink.rounds << round_csv_row(result.rounds.back()) << '\n';
    }
    if (sink.rounds) sink.rounds->flush();
  }
  void note(std::uint64_t seed, const std::string& text) {
    result.notes.push_back("seed " + std::to_string(seed) + ": " + text);
    if (sink.notes) *sink.notes << result.notes.back() << '\n' << std::flush;
  }
};

inline ExperimentResult begin_experiment(const RunConfig& cfg, const ExperimentSink& sink) {
  cfg.validate();
  ExperimentResult res;
  res.config = cfg;
  res.config_hash = config_hash(cfg);
  for (std::size_t s = 0; s < cfg.num_seeds; ++s) res.seeds.push_back(cfg.seed + s);
  if (sink.metrics) *sink.metrics << metric_csv_header() << '\n';
  if (sink.rounds) *sink.rounds << round_csv_header() << '\n';
  return res;
}

}  // namespace detail

/// Direct transfer, fine-tuning, MCN and MCN-MT on the same benchmark for
/// every seed in [seed, seed + num_seeds).
inline ExperimentResult run_experiment(const RunConfig& cfg, const ExperimentSink& sink = {}) {
  ExperimentResult res = detail::begin_experiment(cfg, sink);
  detail::Recorder rec{res, sink};
  for (std::uint64_t seed : res.seeds) {
    const Benchmark bench = make_benchmark(cfg.preset, seed);
    const SyntheticDataset& target = bench.target;
    const UnlabeledSet target_train = target.unlabeled(target.splits.train);
    const std::vector<int> target_truth = target.identities(target.splits.train);  // measurement only
    const Validator validate = make_validator(target);

    const EncoderParams m_src = train_source(bench.source.labeled(bench.source.splits.train), cfg, seed);
    rec.metric(seed, "direct-transfer", cfg.n, evaluate_test(m_src, target));

    const auto part = compute_partition(m_src, target_train, cfg, cfg.n);
    for (const auto& line : part.log) rec.note(seed, "partition " + line);
    const double fscore = average_tier_fscore(part, target_truth);

    const auto ada = adapt_finetune(m_src, target_train, part, cfg, seed);
    if (!ada.warning.empty()) rec.note(seed, ada.warning);
    auto rep = evaluate_test(ada.model, target);
    rep.fscore = fscore;
    rec.metric(seed, "fine-tune", cfg.n, rep);

    for (bool mt : {false, true}) {
      const std::string name = mt ? "mcn-mt" : "mcn";
      const auto mcn = run_coteaching(ada.model, target_train, part, cfg, seed, mt, validate);
      rec.rounds(seed, name, cfg.n, mcn.log);
      auto r = evaluate_test(mcn.output(), target);
      r.fscore = fscore;
      rec.metric(seed, name, cfg.n, r);
    }
  }
  return res;
}

/// MCN-MT test mAP and average tier F-score for every n in cfg.sweep_n.
inline ExperimentResult run_sweep_n(const RunConfig& cfg, const ExperimentSink& sink = {}) {
  ExperimentResult res = detail::begin_experiment(cfg, sink);
  detail::Recorder rec{res, sink};
  for (std::uint64_t seed : res.seeds) {
    const Benchmark bench = make_benchmark(cfg.preset, seed);
    const SyntheticDataset& target = bench.target;
    const UnlabeledSet target_train = target.unlabeled(target.splits.train);
    const std::vector<int> target_truth = target.identities(target.splits.train);
    const Validator validate = make_validator(target);
    const EncoderParams m_src = train_source(bench.source.labeled(bench.source.splits.train), cfg, seed);
    for (std::size_t n : cfg.sweep_n) {
      const auto part = compute_partition(m_src, target_train, cfg, n);
      const auto ada = adapt_finetune(m_src, target_train, part, cfg, seed);
      const auto mcn = run_coteaching(ada.model, target_train, part, cfg, seed, cfg.mean_teaching, validate);
      rec.rounds(seed, "sweep", n, mcn.log);
      auto r = evaluate_test(mcn.output(), target);
      r.fscore = average_tier_fscore(part, target_truth);
      rec.metric(seed, cfg.mean_teaching ? "mcn-mt" : "mcn", n, r);
    }
  }
  return res;
}

inline nlohmann::json summary_json(const ExperimentResult& res) {
  nlohmann::json j;
  j["config"] = to_json(res.config);
  j["config_hash"] = res.config_hash;
  j["seeds"] = res.seeds;
  nlohmann::json med = nlohmann::json::array();
  std::vector<std::pair<std::string, std::size_t>> keys;
  for (const auto& m : res.metrics)
    if (std::find(keys.begin(), keys.end(), std::make_pair(m.variant, m.n)) == keys.end())
      keys.emplace_back(m.variant, m.n);
  for (const auto& [variant, n] : keys) {
    nlohmann::json row{{"variant", variant},
                       {"n", n},
                       {"median_mAP", median(res.values(variant, n, [](const auto& r) { return r.mAP; }))},
                       {"median_rank1", median(res.values(variant, n, [](const auto& r) { return r.rank(1); }))}};
    const auto f = res.values(variant, n, [](const auto& r) { return r.fscore.value_or(std::nan("")); });
    if (!f.empty() && !std::isnan(f.front())) row["median_fscore"] = median(f);
    med.push_back(std::move(row));
  }
  j["medians"] = std::move(med);
  j["notes"] = res.notes;
  return j;
}

}  // namespace mcnmt
