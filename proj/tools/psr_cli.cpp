// psr: command-line front end for HMM generation, PSR training, refinement,
// evaluation and multi-trial experiments.

#include "psr/harness.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

namespace {

using namespace psr;

std::vector<ObservationSequence> load_sequences(const std::string& path) {
  return sequences_from_text(detail::read_file(path));
}

void emit(const std::string& path, const std::string& content) {
  if (path.empty() || path == "-")
    std::cout << content;
  else
    detail::write_file(path, content);
}

struct GenHmmArgs {
  int states = 20;
  int obs = 20;
  std::uint64_t seed = 0;
  std::string topology = "ring";
  std::string output;
};

struct SampleArgs {
  std::string hmm;
  std::size_t n = 10000;
  std::size_t len = 10;
  std::uint64_t seed = 0;
  std::string output;
};

struct TrainArgs {
  std::string sequences;
  int alphabet = 0;
  int future_length = 2;
  int history_length = 2;
  bool no_history_bias = false;
  double ridge = TwoStageOptions{}.ridge;
  Index rank = 0;
  std::string output;
};

struct RefineArgs {
  std::string model;
  std::string sequences;
  std::string method = "ig";
  int iterations = 50;
  double learning_rate = 1e-3;
  int horizon = 1;
  std::string grad_norm = "l1";
  std::uint64_t seed = 0;
  std::string log;
  std::string output;
};

struct EvalArgs {
  std::string model;
  std::string sequences;
  int iteration = 0;
  bool no_header = false;
  std::string output;
};

struct ExperimentArgs {
  std::string config;
  std::string corpus;
  std::string output_dir;
  unsigned workers = 0;
};

struct PlotArgs {
  std::vector<std::string> inputs;
  std::string output_dir = ".";
};

int gen_hmm(const GenHmmArgs& a) {
  const HmmModel hmm = a.topology == "ring" ? generate_ring_hmm(a.states, a.obs, a.seed)
                                            : generate_dense_hmm(a.states, a.obs, a.seed);
  emit(a.output, hmm_to_json(hmm) + '\n');
  return 0;
}

int sample(const SampleArgs& a) {
  const HmmModel hmm = hmm_from_json(detail::read_file(a.hmm));
  emit(a.output, sequences_to_text(sample_sequences(hmm, a.n, a.len, a.seed)));
  return 0;
}

int train(const TrainArgs& a) {
  const auto seqs = load_sequences(a.sequences);
  FeatureSpec spec{a.alphabet > 0 ? a.alphabet : infer_alphabet_size(seqs), a.future_length,
                   a.history_length, !a.no_history_bias};
  TwoStageOptions opts;
  opts.ridge = a.ridge;
  if (a.rank > 0) opts.rank = a.rank;
  const PsrModel model = two_stage_regression(make_training_triples(seqs, spec), spec, opts);
  emit(a.output, serialize_model(model));
  return 0;
}

int refine(const RefineArgs& a) {
  const PsrModel model = deserialize_model(detail::read_file(a.model));
  const auto seqs = load_sequences(a.sequences);
  RefineConfig cfg;
  cfg.iterations = a.iterations;
  cfg.learning_rate = a.learning_rate;
  cfg.horizon = a.horizon;
  cfg.grad_norm = a.grad_norm == "l1" ? GradNorm::l1_unit : GradNorm::none;
  cfg.seed = a.seed;
  const FeatureSpec& spec = model.spec();
  const EvaluationSets eval{{}, a.log.empty() ? std::span<const ObservationSequence>() : seqs};
  RefineResult result = [&] {
    if (a.method == "ig") {
      if (cfg.horizon != 1) throw InvalidArgument("--method ig uses --horizon 1; use --method mig");
      return refine_one_step(model, seqs, spec, cfg, eval);
    }
    if (a.method == "mig") return refine_multi_step(model, seqs, spec, cfg, eval);
    cfg.init = InitMode::random;
    cfg.horizon = 1;
    return psim_baseline(seqs, spec, cfg, eval);
  }();
  if (!a.log.empty()) {
    std::vector<MetricsReport> series;
    for (const auto& l : result.logs) series.push_back(*l.test);
    detail::write_file(a.log, metrics_table_csv(series));
  }
  emit(a.output, serialize_model(result.model));
  return 0;
}

int eval(const EvalArgs& a) {
  const PsrModel model = deserialize_model(detail::read_file(a.model));
  const auto seqs = load_sequences(a.sequences);
  std::string out;
  if (!a.no_header) out += metrics_csv_header() + '\n';
  out += metrics_csv_row(a.iteration, evaluate(model, seqs, model.spec())) + '\n';
  emit(a.output, out);
  return 0;
}

int experiment(const ExperimentArgs& a) {
  ExperimentConfig cfg = parse_experiment_config(detail::read_file(a.config));
  if (!a.corpus.empty()) cfg.corpus = a.corpus;
  if (!a.output_dir.empty()) cfg.output_dir = a.output_dir;
  if (a.workers > 0) cfg.workers = a.workers;
  ExperimentResult result;
  if (cfg.kind == ExperimentKind::ring) {
    result = run_ring_experiment(cfg);
  } else {
    if (cfg.corpus.empty()) throw InvalidArgument("text experiments need a corpus (config key or --corpus)");
    result = run_text_experiment(cfg, cfg.corpus);
  }
  std::size_t failed = 0;
  for (const auto& t : result.trials) failed += t.ok ? 0 : 1;
  std::cerr << "wrote " << result.files.size() << " files to " << cfg.output_dir << '\n';
  if (failed) {
    std::cerr << failed << " of " << result.trials.size() << " trials failed\n";
    return 3;
  }
  return 0;
}

int plot(const PlotArgs& a) {
  std::vector<std::pair<std::string, MetricsTable>> tables;
  for (const auto& path : a.inputs) {
    std::string name = std::filesystem::path(path).stem().string();
    if (name.rfind("avg_", 0) == 0) name.erase(0, 4);
    tables.emplace_back(name, read_metrics_csv(detail::read_file(path)));
  }
  std::filesystem::create_directories(a.output_dir);
  for (const auto& [metric, svg] : plot_metric_tables(tables)) {
    const auto path = std::filesystem::path(a.output_dir) / (metric + ".svg");
    detail::write_file(path.string(), svg);
    std::cerr << "wrote " << path.string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Predictive state representations: spectral learning and inference-gradient refinement"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "psr 1.0.0");

  GenHmmArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-hmm", "Generate a random HMM as JSON");
  gen_cmd->add_option("--states", gen.states, "Number of hidden states")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--obs", gen.obs, "Number of observation symbols")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", gen.seed, "RNG seed");
  gen_cmd->add_option("--topology", gen.topology, "ring or dense")->check(CLI::IsMember({"ring", "dense"}));
  gen_cmd->add_option("-o,--output", gen.output, "Output file (default stdout)");

  SampleArgs smp;
  auto* sample_cmd = app.add_subcommand("sample", "Sample observation sequences from an HMM");
  sample_cmd->add_option("--hmm", smp.hmm, "HMM JSON file")->required()->check(CLI::ExistingFile);
  sample_cmd->add_option("--n", smp.n, "Number of sequences")->check(CLI::PositiveNumber);
  sample_cmd->add_option("--len", smp.len, "Sequence length")->check(CLI::PositiveNumber);
  sample_cmd->add_option("--seed", smp.seed, "RNG seed");
  sample_cmd->add_option("-o,--output", smp.output, "Output file (default stdout)");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train-2sr", "Fit a PSR by two-stage regression");
  train_cmd->add_option("--sequences", tr.sequences, "Sequences file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--alphabet", tr.alphabet, "Alphabet size (default: 1 + largest symbol)");
  train_cmd->add_option("--future-length", tr.future_length, "Longest future string k");
  train_cmd->add_option("--history-length", tr.history_length, "Longest history string L");
  train_cmd->add_flag("--no-history-bias", tr.no_history_bias, "Drop the constant history feature");
  train_cmd->add_option("--ridge", tr.ridge, "Ridge strength relative to ||M||_F^2 (0 = truncated pinv)");
  train_cmd->add_option("--rank", tr.rank, "Keep only the leading singular triplets");
  train_cmd->add_option("-o,--output", tr.output, "Output model JSON (default stdout)");

  RefineArgs rf;
  auto* refine_cmd = app.add_subcommand("refine", "Refine a PSR with inference gradients");
  refine_cmd->add_option("--model", rf.model, "Input model JSON")->required()->check(CLI::ExistingFile);
  refine_cmd->add_option("--sequences", rf.sequences, "Training sequences")->required()->check(CLI::ExistingFile);
  refine_cmd->add_option("--method", rf.method, "ig, mig or psim")->check(CLI::IsMember({"ig", "mig", "psim"}));
  refine_cmd->add_option("--iterations", rf.iterations, "Passes over the data")->check(CLI::NonNegativeNumber);
  refine_cmd->add_option("--learning-rate", rf.learning_rate, "Step size")->check(CLI::NonNegativeNumber);
  refine_cmd->add_option("--horizon", rf.horizon, "Multi-step horizon")->check(CLI::PositiveNumber);
  refine_cmd->add_option("--grad-norm", rf.grad_norm, "l1 or none")->check(CLI::IsMember({"l1", "none"}));
  refine_cmd->add_option("--seed", rf.seed, "Shuffle (and psim init) seed");
  refine_cmd->add_option("--log", rf.log, "Write per-iteration metrics on the training sequences to this CSV");
  refine_cmd->add_option("-o,--output", rf.output, "Output model JSON (default stdout)");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score a model on sequences as a metrics CSV row");
  eval_cmd->add_option("--model", ev.model, "Model JSON")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--sequences", ev.sequences, "Sequences file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--iteration", ev.iteration, "Value of the iteration column");
  eval_cmd->add_flag("--no-header", ev.no_header, "Omit the CSV header");
  eval_cmd->add_option("-o,--output", ev.output, "Output file (default stdout)");

  ExperimentArgs ex;
  auto* exp_cmd = app.add_subcommand("experiment", "Run a multi-trial study from a config file");
  exp_cmd->add_option("config", ex.config, "Config file")->required()->check(CLI::ExistingFile);
  exp_cmd->add_option("--corpus", ex.corpus, "Text corpus (overrides the config)")->check(CLI::ExistingFile);
  exp_cmd->add_option("--output-dir", ex.output_dir, "Output directory (overrides the config)");
  exp_cmd->add_option("--workers", ex.workers, "Worker threads (overrides the config)");

  PlotArgs pl;
  auto* plot_cmd = app.add_subcommand("plot", "Draw one SVG per metric from metrics CSVs");
  plot_cmd->add_option("inputs", pl.inputs, "Metrics CSV files, one series each")
      ->required()
      ->check(CLI::ExistingFile);
  plot_cmd->add_option("--output-dir", pl.output_dir, "Directory for the SVG files");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) return gen_hmm(gen);
    if (*sample_cmd) return sample(smp);
    if (*train_cmd) return train(tr);
    if (*refine_cmd) return refine(rf);
    if (*eval_cmd) return eval(ev);
    if (*exp_cmd) return experiment(ex);
    if (*plot_cmd) return plot(pl);
  } catch (const psr::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
