// Multiple co-teaching: one teacher M_1 and students M_2..M_n trained in
// alternating paradigms, with temporally averaged ("mean teacher") copies of
// every network.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mcnmt/clustering.hpp"
#include "mcnmt/core.hpp"
#include "mcnmt/encoder.hpp"
#include "mcnmt/losses.hpp"
#include "mcnmt/training.hpp"

namespace mcnmt {

// ---------------------------------------------------------------------------
// Mean teacher.

struct MeanTeacherState {
  EncoderParams avg;
  double alpha = 0.999;
  std::size_t iteration = 0;

  /// The average starts out equal to the live network.
  static MeanTeacherState start(const EncoderParams& live, double alpha) {
    if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in [0,1)");
    return MeanTeacherState{live, alpha, 0};
  }
};

/// avg' = alpha * avg + (1 - alpha) * current, elementwise.
inline MeanTeacherState ema_update(const MeanTeacherState& state, const EncoderParams& current) {
  if (!(state.alpha >= 0.0 && state.alpha < 1.0)) throw ConfigError("alpha must lie in [0,1)");
  if (!state.avg.same_shape(current)) throw ShapeError("ema_update: parameter shapes differ");
  MeanTeacherState next = state;
  const double a = state.alpha, b = 1.0 - state.alpha;
  for (std::size_t l = 0; l < next.avg.num_layers(); ++l) {
    auto& w = next.avg.weights[l].data;
    const auto& cw = current.weights[l].data;
    for (std::size_t k = 0; k < w.size(); ++k) w[k] = a * w[k] + b * cw[k];
    auto& bias = next.avg.biases[l];
    const auto& cb = current.biases[l];
    for (std::size_t k = 0; k < bias.size(); ++k) bias[k] = a * bias[k] + b * cb[k];
  }
  ++next.iteration;
  return next;
}

// ---------------------------------------------------------------------------
// Reliable-instance selection.

struct Selection {
  std::vector<std::size_t> kept;  // ascending positions within the tier
  std::vector<double> scores;     // lower is more reliable
  bool fallback = false;          // scored by distance to the tier centroid
};

/// Number of samples kept from a tier of `size` at `keep_rate`.
inline std::size_t keep_count(std::size_t size, double keep_rate) {
  const double raw = keep_rate * static_cast<double>(size);
  const auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::min(size, k);
}

/// Small-loss selection. Each sample is scored by its batch-hard triplet
/// violation d_ap - d_an + margin under `model`, with the whole tier as the
/// batch, and the ceil(keep_rate * |tier|) lowest scores are kept (lowest
/// position first on ties). The ranking agrees with ranking by hinged loss and
/// orders the zero-loss samples by how comfortably they clear the margin.
/// Samples whose pseudo label occurs once have no positive and score +inf.
/// When no label occurs twice, or the tier holds a single label, scores fall
/// back to distance from the tier centroid.
inline Selection select_reliable(const EncoderParams& model, std::span<const Vector> tier_inputs,
                                 std::span<const int> tier_labels, double keep_rate, double margin) {
  if (tier_inputs.size() != tier_labels.size()) throw ShapeError("select_reliable: inputs and labels differ");
  if (tier_inputs.empty()) throw ConfigError("select_reliable: empty tier");
  if (!(keep_rate > 0.0 && keep_rate <= 1.0)) throw ConfigError("keep_rate must lie in (0,1]");
  const std::size_t n = tier_inputs.size();
  Selection sel;
  const auto emb = embed_all(model, tier_inputs);

  std::map<int, std::size_t> counts;
  for (int l : tier_labels) ++counts[l];
  const bool has_pair = std::any_of(counts.begin(), counts.end(), [](const auto& kv) { return kv.second >= 2; });

  if (has_pair && counts.size() >= 2) {
    const auto res = triplet_loss_batch_hard(emb, tier_labels, margin);
    sel.scores.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      sel.scores[i] = std::isnan(res.violation[i]) ? std::numeric_limits<double>::infinity() : res.violation[i];
  } else {
    sel.fallback = true;
    Vector centroid(emb[0].size(), 0.0);
    for (const auto& e : emb)
      for (std::size_t d = 0; d < e.size(); ++d) centroid[d] += e[d];
    for (double& c : centroid) c /= static_cast<double>(n);
    sel.scores.resize(n);
    for (std::size_t i = 0; i < n; ++i) sel.scores[i] = euclidean_distance(emb[i], centroid);
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sel.scores[a] < sel.scores[b]; });
  sel.kept.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep_count(n, keep_rate)));
  std::sort(sel.kept.begin(), sel.kept.end());
  return sel;
}

// ---------------------------------------------------------------------------
// Paradigms.

struct CoTeachConfig {
  std::size_t rounds = 30;  // r
  std::size_t steps_per_round = 10;
  std::size_t patience = 10;  // rounds without validation improvement before stopping; 0 disables
  double keep_rate = 0.8;
  double alpha = 0.999;
  bool mean_teaching = true;
  bool select_with_ema = true;  // only meaningful with mean_teaching
  TrainOptions train;
  std::uint64_t seed = 0;
};

/// M_1..M_n; index 0 is the teacher.
struct ModelBank {
  std::vector<EncoderParams> live;
  std::vector<MeanTeacherState> ema;

  /// M_1 = ... = M_n = init, each average starting at init.
  static ModelBank replicate(const EncoderParams& init, std::size_t n, double alpha) {
    ModelBank bank;
    bank.live.assign(n, init);
    bank.ema.assign(n, MeanTeacherState::start(init, alpha));
    return bank;
  }
  std::size_t size() const { return live.size(); }
};

struct Snapshot {
  EncoderParams live;
  EncoderParams ema;
  double score = -std::numeric_limits<double>::infinity();
  std::size_t paradigm = 0;  // student index i, 0 before any paradigm
  std::size_t round = 0;     // 0 is the state the paradigm started from
};

struct RoundLog {
  std::size_t paradigm = 0;
  std::size_t round = 0;
  std::string active_model;  // model that took gradient steps, e.g. "M1"
  std::size_t selected_count = 0;
  double mean_loss = 0.0;
  double teacher_val_map = 0.0;
  double ema_teacher_val_map = std::numeric_limits<double>::quiet_NaN();  // NaN without mean teaching
  bool selection_fallback = false;
};

struct ParadigmResult {
  Snapshot best;
  std::vector<RoundLog> log;
  std::size_t rounds_run = 0;
  bool early_stopped = false;
};

/// Scores a model on held-out labeled data. Training code only ever sees this
/// opaque callable.
using Validator = std::function<double(const EncoderParams&)>;

namespace detail {

inline std::vector<Vector> gather(std::span<const Vector> inputs, std::span<const std::size_t> idx) {
  std::vector<Vector> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(inputs[i]);
  return out;
}

inline void check_coteach_config(const CoTeachConfig& cfg) {
  if (cfg.rounds < 1) throw ConfigError("r (max rounds) must be at least 1");
  if (!(cfg.keep_rate > 0.0 && cfg.keep_rate <= 1.0)) throw ConfigError("keep_rate must lie in (0,1]");
  if (!(cfg.alpha >= 0.0 && cfg.alpha < 1.0)) throw ConfigError("alpha must lie in [0,1)");
}

}  // namespace detail

/// Co-teaching between the teacher M_1 and student M_i on tiers T_1 and T_i.
/// Even rounds: M_i selects reliable samples of T_i, M_1 trains on them, then
/// E[M_1] is updated. Odd rounds: M_1 selects from T_1, M_i trains, then E[M_i]
/// is updated. The best snapshot is tracked by the validation score of the
/// teacher's average (the live teacher without mean teaching), starting from
/// the state the paradigm begins in.
inline ParadigmResult run_paradigm(ModelBank& models, std::span<const Vector> target_inputs,
                                   const GranularityPartition& part, std::size_t i, const CoTeachConfig& cfg,
                                   const Validator& validate) {
  detail::check_coteach_config(cfg);
  if (i < 2 || i > part.n) throw ConfigError("paradigm index must lie in 2..n");
  if (models.size() < i) throw ConfigError("model bank is smaller than the paradigm index");
  if (part.pseudo_labels.size() != target_inputs.size())
    throw ShapeError("partition does not match the target sample count");

  const std::size_t teacher = 0, student = i - 1;
  const auto teacher_score = [&](const ModelBank& m) {
    return validate(cfg.mean_teaching ? m.ema[teacher].avg : m.live[teacher]);
  };

  ParadigmResult out;
  out.best = Snapshot{models.live[teacher], models.ema[teacher].avg, teacher_score(models), i, 0};
  std::size_t since_improvement = 0;

  const std::vector<Vector> tier_teacher = detail::gather(target_inputs, part.tier(1));
  const std::vector<int> labels_teacher = part.tier_labels(1);
  const std::vector<Vector> tier_student = detail::gather(target_inputs, part.tier(i));
  const std::vector<int> labels_student = part.tier_labels(i);

  for (std::size_t round = 1; round <= cfg.rounds; ++round) {
    const bool even = round % 2 == 0;
    const std::size_t selector = even ? student : teacher;
    const std::size_t trainee = even ? teacher : student;
    const auto& pool_inputs = even ? tier_student : tier_teacher;
    const auto& pool_labels = even ? labels_student : labels_teacher;

    RoundLog row;
    row.paradigm = i;
    row.round = round;
    row.active_model = "M" + std::to_string(trainee + 1);

    if (!pool_inputs.empty()) {
      const EncoderParams& selector_model =
          cfg.mean_teaching && cfg.select_with_ema ? models.ema[selector].avg : models.live[selector];
      const auto sel = select_reliable(selector_model, pool_inputs, pool_labels, cfg.keep_rate, cfg.train.margin);
      row.selected_count = sel.kept.size();
      row.selection_fallback = sel.fallback;
      std::vector<Vector> chosen;
      std::vector<int> chosen_labels;
      for (std::size_t k : sel.kept) {
        chosen.push_back(pool_inputs[k]);
        chosen_labels.push_back(pool_labels[k]);
      }
      Rng rng = make_stream(cfg.seed, "coteach-round", (static_cast<std::uint64_t>(i) << 32) | round);
      const auto stats =
          train_triplet(models.live[trainee], chosen, chosen_labels, cfg.steps_per_round, cfg.train, rng);
      row.mean_loss = stats.mean_loss;
    }
    if (cfg.mean_teaching) models.ema[trainee] = ema_update(models.ema[trainee], models.live[trainee]);

    row.teacher_val_map = validate(models.live[teacher]);
    if (cfg.mean_teaching) row.ema_teacher_val_map = validate(models.ema[teacher].avg);
    const double score = cfg.mean_teaching ? row.ema_teacher_val_map : row.teacher_val_map;
    out.log.push_back(row);
    out.rounds_run = round;

    if (score > out.best.score) {
      out.best = Snapshot{models.live[teacher], models.ema[teacher].avg, score, i, round};
      since_improvement = 0;
    } else if (cfg.patience > 0 && ++since_improvement >= cfg.patience) {
      out.early_stopped = true;
      break;
    }
  }
  return out;
}

struct McnResult {
  Snapshot best;
  std::vector<std::size_t> paradigm_order;
  std::vector<RoundLog> log;
  bool mean_teaching = true;

  /// The model to deploy: the teacher's average with mean teaching, the live
  /// teacher without.
  const EncoderParams& output() const { return mean_teaching ? best.ema : best.live; }
};

/// Runs the paradigms i = n, n-1, ..., 2 in order and returns the teacher at
/// its best validation score over all of them. If `repartition` is set it is
/// called with the current teacher before every paradigm after the first.
inline McnResult run_mcn(ModelBank& models, std::span<const Vector> target_inputs, const GranularityPartition& part,
                         const CoTeachConfig& cfg, const Validator& validate,
                         const std::function<GranularityPartition(const EncoderParams&)>& repartition = {}) {
  detail::check_coteach_config(cfg);
  if (part.n < 2) throw ConfigError("granularity level n must be at least 2");
  if (models.size() != part.n) throw ConfigError("model bank size must equal n");
  McnResult res;
  res.mean_teaching = cfg.mean_teaching;
  GranularityPartition current = part;
  for (std::size_t i = part.n; i >= 2; --i) {
    if (repartition && i != part.n) current = repartition(models.live[0]);
    res.paradigm_order.push_back(i);
    auto pr = run_paradigm(models, target_inputs, current, i, cfg, validate);
    res.log.insert(res.log.end(), pr.log.begin(), pr.log.end());
    if (pr.best.score > res.best.score) res.best = std::move(pr.best);
  }
  return res;
}

inline std::string round_log_csv_header() {
  return "paradigm,round,active_model,selected_count,mean_loss,teacher_val_mAP,ema_teacher_val_mAP";
}

inline std::string round_log_csv_row(const RoundLog& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.paradigm << ',' << r.round << ',' << r.active_model << ',' << r.selected_count << ',' << r.mean_loss << ','
     << r.teacher_val_map << ',';
  if (!std::isnan(r.ema_teacher_val_map)) os << r.ema_teacher_val_map;
  return os.str();
}

}  // namespace mcnmt
