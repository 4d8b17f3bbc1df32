// Command-line front end for the adaptation pipeline.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime or numeric error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <nlohmann/json.hpp>

#include "mcnmt/pipeline.hpp"

namespace fs = std::filesystem;
using namespace mcnmt;

namespace {

/// Command-line values for RunConfig fields, collected as a flat JSON object
/// and applied on top of --config.
struct ConfigFlags {
  std::string config_path;
  nlohmann::json overrides = nlohmann::json::object();

  template <class T>
  void field(CLI::App* app, const std::string& key, const std::string& help) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    app->add_option_function<T>(flag, [this, key](const T& v) { overrides[key] = v; }, help);
  }

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON file with RunConfig fields");
    field<std::size_t>(app, "n", "granularity levels (number of networks)");
    field<std::size_t>(app, "r", "co-teaching rounds per paradigm");
    field<double>(app, "alpha", "mean-teacher smoothing factor");
    field<double>(app, "margin", "triplet margin");
    field<std::size_t>(app, "P", "identities per batch");
    field<std::size_t>(app, "K", "samples per identity in a batch");
    field<double>(app, "keep_rate", "fraction of a tier kept by selection");
    field<double>(app, "eps0", "first-round density radius (0: use eps_quantile)");
    field<double>(app, "eps_quantile", "pairwise-distance quantile giving eps0");
    field<double>(app, "eps_ratio", "per-round eps shrink factor");
    field<std::size_t>(app, "min_pts", "DBSCAN core threshold");
    field<double>(app, "learning_rate", "SGD step size");
    field<std::size_t>(app, "steps_source", "source training steps");
    field<std::size_t>(app, "steps_finetune", "fine-tuning steps");
    field<std::size_t>(app, "steps_per_round", "SGD steps per co-teaching round");
    field<std::size_t>(app, "patience", "rounds without improvement before a paradigm stops");
    field<std::vector<std::size_t>>(app, "hidden_dims", "hidden layer widths");
    field<std::size_t>(app, "embedding_dim", "embedding width");
    field<std::uint64_t>(app, "seed", "run seed (overrides the config file)");
    field<std::size_t>(app, "num_seeds", "consecutive seeds to run");
    field<bool>(app, "mean_teaching", "keep temporally averaged copies (true/false)");
    field<bool>(app, "select_with_ema", "select with the averaged network (true/false)");
    field<bool>(app, "repartition", "re-cluster with the teacher between paradigms (true/false)");
    field<std::string>(app, "preset", "benchmark preset");
    field<std::vector<std::size_t>>(app, "sweep_n", "values of n for sweep-n");
  }

  RunConfig resolve() const {
    RunConfig base;
    if (!config_path.empty()) base = load_config(config_path);
    return config_from_json(overrides, base);
  }
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(1) + "\n"); }

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  return out;
}

/// Source and target sets either from a `generate` directory or freshly
/// generated from the preset and seed.
Benchmark load_benchmark(const std::string& data_dir, const RunConfig& cfg) {
  if (data_dir.empty()) return make_benchmark(cfg.preset, cfg.seed);
  const fs::path d(data_dir);
  return Benchmark{load_dataset((d / "source.json").string()), load_dataset((d / "target.json").string())};
}

GranularityPartition load_partition(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open partition " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("partition " + path + " is not valid JSON: " + e.what());
  }
  return partition_from_json(j);
}

void check_partition(const GranularityPartition& part, const UnlabeledSet& target) {
  if (part.pseudo_labels.size() != target.inputs.size())
    throw ConfigError("partition covers " + std::to_string(part.pseudo_labels.size()) +
                      " samples but the target training set has " + std::to_string(target.inputs.size()));
}

void print_metrics(const MetricsReport& r) {
  std::cout << metrics_csv_header() << '\n' << metrics_csv_row(r) << '\n';
}

int run(int argc, char** argv) {
  CLI::App app{"Multiple co-teaching with mean teaching for unsupervised domain adaptation"};
  app.require_subcommand(1);
  ConfigFlags flags;
  std::string data_dir, checkpoint, partition_path, out, out_dir, metrics_out, rounds_out;

  auto* gen = app.add_subcommand("generate", "write the source and target sets of a preset as JSON");
  flags.attach(gen);
  gen->add_option("--out-dir", out_dir, "output directory")->required();

  auto* src = app.add_subcommand("train-source", "train M_src on the labeled source set");
  flags.attach(src);
  src->add_option("--data", data_dir, "directory written by generate (default: regenerate the preset)");
  src->add_option("--out", out, "checkpoint JSON")->required();

  auto* part = app.add_subcommand("partition", "split the target training set into granularity tiers");
  flags.attach(part);
  part->add_option("--data", data_dir, "directory written by generate");
  part->add_option("--checkpoint", checkpoint, "encoder checkpoint")->required();
  part->add_option("--out", out, "partition JSON")->required();

  auto* adapt = app.add_subcommand("adapt", "fine-tune on tiers T_1..T_{n-1}");
  flags.attach(adapt);
  adapt->add_option("--data", data_dir, "directory written by generate");
  adapt->add_option("--checkpoint", checkpoint, "source checkpoint")->required();
  adapt->add_option("--partition", partition_path, "partition JSON")->required();
  adapt->add_option("--out", out, "adapted checkpoint JSON")->required();

  auto* co = app.add_subcommand("coteach", "run multiple co-teaching from an adapted model");
  flags.attach(co);
  co->add_option("--data", data_dir, "directory written by generate");
  co->add_option("--checkpoint", checkpoint, "adapted checkpoint")->required();
  co->add_option("--partition", partition_path, "partition JSON")->required();
  co->add_option("--out", out, "output checkpoint JSON")->required();
  co->add_option("--rounds-out", rounds_out, "per-round CSV");

  auto* ev = app.add_subcommand("evaluate", "score a checkpoint on the target query/gallery split");
  flags.attach(ev);
  ev->add_option("--data", data_dir, "directory written by generate");
  ev->add_option("--checkpoint", checkpoint, "encoder checkpoint")->required();
  ev->add_option("--partition", partition_path, "partition JSON (adds the tier F-score)");
  ev->add_option("--out", metrics_out, "metrics CSV");

  auto* exp = app.add_subcommand("experiment", "direct transfer, fine-tune, MCN and MCN-MT for each seed");
  flags.attach(exp);
  exp->add_option("--out-dir", out_dir, "output directory")->required();

  auto* sweep = app.add_subcommand("sweep-n", "MCN-MT mAP and tier F-score for each n in sweep_n");
  flags.attach(sweep);
  sweep->add_option("--out-dir", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  const RunConfig cfg = flags.resolve();

  if (gen->parsed()) {
    const auto bench = make_benchmark(cfg.preset, cfg.seed);
    fs::create_directories(out_dir);
    save_dataset(bench.source, (fs::path(out_dir) / "source.json").string());
    save_dataset(bench.target, (fs::path(out_dir) / "target.json").string());
    std::cout << "wrote " << bench.source.samples.size() << " source and " << bench.target.samples.size()
              << " target samples to " << out_dir << '\n';
    return 0;
  }

  if (exp->parsed() || sweep->parsed()) {
    const fs::path d(out_dir);
    fs::create_directories(d);
    write_json(d / "config.json", to_json(cfg));
    auto metrics = open_out(d / "metrics.csv");
    auto rounds = open_out(d / "rounds.csv");
    ExperimentSink sink{&metrics, &rounds, &std::cerr};
    const auto res = exp->parsed() ? run_experiment(cfg, sink) : run_sweep_n(cfg, sink);
    const auto summary = summary_json(res);
    write_json(d / "summary.json", summary);
    std::cout << summary["medians"].dump(1) << '\n';
    return 0;
  }

  const Benchmark bench = load_benchmark(data_dir, cfg);
  const SyntheticDataset& target = bench.target;
  const UnlabeledSet target_train = target.unlabeled(target.splits.train);

  if (src->parsed()) {
    const auto model = train_source(bench.source.labeled(bench.source.splits.train), cfg, cfg.seed);
    write_json(out, to_json(model));
    return 0;
  }

  const EncoderParams model = load_checkpoint(checkpoint);

  if (part->parsed()) {
    const auto p = compute_partition(model, target_train, cfg, cfg.n);
    write_json(out, to_json(p));
    for (const auto& line : p.log) std::cerr << line << '\n';
    return 0;
  }

  if (ev->parsed()) {
    auto rep = evaluate_test(model, target);
    if (!partition_path.empty()) {
      const auto p = load_partition(partition_path);
      check_partition(p, target_train);
      rep.fscore = average_tier_fscore(p, target.identities(target.splits.train));
    }
    if (!metrics_out.empty()) write_text(metrics_out, metrics_csv_header() + "\n" + metrics_csv_row(rep) + "\n");
    print_metrics(rep);
    return 0;
  }

  const auto p = load_partition(partition_path);
  check_partition(p, target_train);

  if (adapt->parsed()) {
    const auto res = adapt_finetune(model, target_train, p, cfg, cfg.seed);
    if (!res.warning.empty()) std::cerr << "warning: " << res.warning << '\n';
    write_json(out, to_json(res.model));
    return 0;
  }

  // coteach
  const auto mcn = run_coteaching(model, target_train, p, cfg, cfg.seed, cfg.mean_teaching, make_validator(target));
  write_json(out, to_json(mcn.output()));
  if (!rounds_out.empty()) {
    std::string csv = round_log_csv_header() + "\n";
    for (const auto& l : mcn.log) csv += round_log_csv_row(l) + "\n";
    write_text(rounds_out, csv);
  }
  print_metrics(evaluate_test(mcn.output(), target));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
