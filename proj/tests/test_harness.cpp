#include "psr/harness.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace psr;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("psr_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ExperimentConfig tiny_ring(const fs::path& out) {
  ExperimentConfig cfg = parse_experiment_config(
      "kind = ring\n"
      "num_states = 4\n"
      "num_obs = 3\n"
      "num_sequences = 120\n"
      "sequence_length = 6\n"
      "history_length = 1\n"
      "methods = 2sr, random_baseline, ig, mig, ig_random, mig_random, psim_random\n"
      "iterations = 2\n"
      "learning_rate = 1e-2\n"
      "mig.horizon = 2\n"
      "trials = 2\n"
      "seed = 5\n");
  cfg.output_dir = out.string();
  return cfg;
}

std::string slurp(const fs::path& p) { return detail::read_file(p.string()); }

}  // namespace

TEST(Config, ParsesKeysAndOverrides) {
  const ExperimentConfig cfg = parse_experiment_config(
      "# comment\n"
      "kind = text\n"
      "corpus = /tmp/x.txt   # trailing comment\n"
      "excerpt_length = 500\n"
      "chunk_length = 5\n"
      "train_fraction = 0.25\n"
      "future_length = 3\n"
      "history_bias = false\n"
      "ridge = 0.001\n"
      "methods = ig,mig\n"
      "learning_rate = 0.01\n"
      "grad_norm = none\n"
      "mig.horizon = 4\n"
      "mig.learning_rate = 0.5\n"
      "workers = 3\n");
  EXPECT_EQ(cfg.kind, ExperimentKind::text);
  EXPECT_EQ(cfg.corpus, "/tmp/x.txt");
  EXPECT_EQ(cfg.excerpt_length, 500u);
  EXPECT_EQ(cfg.chunk_length, 5u);
  EXPECT_EQ(cfg.train_fraction, 0.25);
  EXPECT_EQ(cfg.features.future_length, 3);
  EXPECT_FALSE(cfg.features.history_bias);
  EXPECT_EQ(cfg.two_stage.ridge, 0.001);
  EXPECT_EQ(cfg.methods, (std::vector<std::string>{"ig", "mig"}));
  EXPECT_EQ(cfg.workers, 3u);
  const RefineConfig ig = cfg.refine_for("ig"), mig = cfg.refine_for("mig");
  EXPECT_EQ(ig.learning_rate, 0.01);
  EXPECT_EQ(ig.horizon, 1);
  EXPECT_EQ(ig.grad_norm, GradNorm::none);
  EXPECT_EQ(mig.learning_rate, 0.5);
  EXPECT_EQ(mig.horizon, 4);
  EXPECT_EQ(cfg.refine_for("ig_random").init, InitMode::random);
  EXPECT_EQ(ig.init, InitMode::two_stage);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_experiment_config("bogus = 1\n"), ParseError);
  EXPECT_THROW(parse_experiment_config("trials = 0\n"), ParseError);
  EXPECT_THROW(parse_experiment_config("train_fraction = 1\n"), ParseError);
  EXPECT_THROW(parse_experiment_config("methods = ig, nope\n"), ParseError);
  EXPECT_THROW(parse_experiment_config("mig.colour = 1\n"), ParseError);
  EXPECT_THROW(parse_experiment_config("seed = -3\n"), ParseError);
  EXPECT_THROW(parse_experiment_config("iterations\n"), ParseError);
  try {
    parse_experiment_config("trials = 2\nlearning_rate = fast\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Text, IngestAssignsIdsByFirstAppearance) {
  const IngestedText t = ingest_text_content("abab");
  EXPECT_EQ(t.symbols, (ObservationSequence{0, 1, 0, 1}));
  EXPECT_EQ(t.vocabulary.size(), 2);
  EXPECT_EQ(t.vocabulary.byte_for(0), 'a');
  EXPECT_EQ(t.vocabulary.to_text(), "0 97\n1 98\n");
  EXPECT_THROW(ingest_text_content(""), EmptyData);
}

TEST(Text, VocabularyRoundTrip) {
  std::string corpus;
  for (int i = 0; i < 1000; ++i) corpus.push_back(static_cast<char>((i * 37) % 256));
  const IngestedText t = ingest_text_content(corpus);
  EXPECT_LE(t.vocabulary.size(), 256);
  EXPECT_EQ(t.vocabulary.decode(t.symbols), corpus);
  EXPECT_EQ(t.vocabulary.encode(corpus), t.symbols);
  EXPECT_EQ(ingest_text_content(corpus).symbols, t.symbols);
}

TEST(Text, Chunking) {
  const ObservationSequence s{0, 1, 2, 3, 4, 5, 6};
  const auto chunks = chunk_sequence(s, 3);
  ASSERT_EQ(chunks.size(), 2u);
  EXPECT_EQ(chunks[1], (ObservationSequence{3, 4, 5}));
  EXPECT_THROW(chunk_sequence(s, 0), InvalidArgument);
}

TEST(Csv, RoundTripAndAverage) {
  MetricsReport a, b;
  a.mean_pnll = 1.0 / 3.0;
  a.ospa = 0.25;
  b.mean_pnll = 2.0;
  b.ospa = 0.75;
  b.invalid_probability_count = 4;
  const MetricsTable ta = read_metrics_csv(metrics_table_csv(std::vector<MetricsReport>{a, b}));
  ASSERT_EQ(ta.rows.size(), 2u);
  EXPECT_EQ(ta.rows[0][0], 1.0 / 3.0);
  EXPECT_EQ(ta.iterations[1], 1);
  const MetricsTable tb = read_metrics_csv(metrics_table_csv(std::vector<MetricsReport>{b, a}));
  const std::vector<MetricsTable> both{ta, tb};
  const MetricsTable avg = average_tables(both);
  EXPECT_EQ(avg.rows[0][1], 0.5);
  EXPECT_EQ(avg.rows[1][5], 2.0);
  EXPECT_THROW(read_metrics_csv("a,b\n"), ParseError);
}

TEST(Svg, OneChartPerMetricWithLegend) {
  MetricsTable t;
  t.iterations = {0, 1, 2};
  t.rows = {{1, 0.1, 2, 0.3, 1, 0, 0}, {0.5, 0.2, 2, 0.3, 1, 0, 0}, {0.25, 0.3, 2, 0.3, 1, 0, 0}};
  const auto charts = plot_metric_tables({{"ig", t}, {"2sr", t}});
  EXPECT_EQ(charts.size(), 5u);
  const std::string& svg = charts.at("ospa");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("<polyline"), std::string::npos);
  EXPECT_NE(svg.find(">ig</text>"), std::string::npos);
  EXPECT_NE(svg.find(">2sr</text>"), std::string::npos);
}

TEST(Pool, RunsEveryJobOnce) {
  std::vector<int> hits(50, 0);
  run_bounded(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  EXPECT_EQ(hits, std::vector<int>(50, 1));
}

TEST(RingExperiment, OutputsAverageAndDeterminism) {
  const fs::path dir = scratch_dir("ring");
  ExperimentConfig cfg = tiny_ring(dir / "a");
  const ExperimentResult r = run_ring_experiment(cfg);
  ASSERT_TRUE(r.all_ok());
  for (const auto& m : cfg.methods) {
    std::vector<MetricsTable> tables;
    for (int t = 0; t < cfg.trials; ++t) {
      const MetricsTable table =
          read_metrics_csv(slurp(dir / "a" / ("trial_" + std::to_string(t) + "_" + m + ".csv")));
      EXPECT_EQ(table.rows.size(), static_cast<std::size_t>(cfg.refine.iterations + 1));
      tables.push_back(table);
    }
    // independent recomputation of the elementwise mean
    const MetricsTable avg = read_metrics_csv(slurp(dir / "a" / ("avg_" + m + ".csv")));
    for (std::size_t i = 0; i < avg.rows.size(); ++i)
      for (std::size_t c = 0; c < 7; ++c)
        EXPECT_EQ(avg.rows[i][c], (tables[0].rows[i][c] + tables[1].rows[i][c]) / 2.0);
    if (is_constant_method(m))
      for (const auto& table : tables)
        for (const auto& row : table.rows) EXPECT_EQ(row, table.rows[0]);
  }
  EXPECT_TRUE(fs::exists(dir / "a" / "ospa.svg"));
  EXPECT_TRUE(fs::exists(dir / "a" / "mean_pnll.svg"));

  // a second run, with more workers, writes identical bytes
  cfg.output_dir = (dir / "b").string();
  cfg.workers = 3;
  run_ring_experiment(cfg);
  for (const auto& entry : fs::directory_iterator(dir / "a"))
    if (entry.path().extension() == ".csv")
      EXPECT_EQ(slurp(entry.path()), slurp(dir / "b" / entry.path().filename())) << entry.path();
}

TEST(RingExperiment, ZeroIterationsGiveInitializationMetrics) {
  const fs::path dir = scratch_dir("zero");
  ExperimentConfig cfg = tiny_ring(dir);
  cfg.trials = 1;
  cfg.refine.iterations = 0;
  const ExperimentResult r = run_ring_experiment(cfg);
  ASSERT_TRUE(r.all_ok());
  const TrialData data = ring_trial_data(cfg, 0);
  FeatureSpec spec = cfg.features;
  spec.alphabet_size = cfg.num_obs;
  const PsrModel two_stage = two_stage_regression(make_training_triples(data.train, spec), spec, cfg.two_stage);
  const std::string expected = metrics_table_csv(std::vector<MetricsReport>{evaluate(two_stage, data.test, spec)});
  EXPECT_EQ(slurp(dir / "trial_0_ig.csv"), expected);
  EXPECT_EQ(slurp(dir / "trial_0_mig.csv"), expected);
  EXPECT_EQ(slurp(dir / "trial_0_2sr.csv"), expected);
  EXPECT_EQ(slurp(dir / "trial_0_ig_random.csv"), slurp(dir / "trial_0_random_baseline.csv"));
}

TEST(RingExperiment, SplitIsDisjointAndExhaustive) {
  ExperimentConfig cfg = tiny_ring(scratch_dir("split"));
  const TrialData data = ring_trial_data(cfg, 1);
  EXPECT_EQ(data.train.size(), 60u);
  EXPECT_EQ(data.test.size(), 60u);
  const HmmModel hmm = generate_ring_hmm(cfg.num_states, cfg.num_obs, derive_seed(trial_seed(cfg, 1), 1));
  const auto all = sample_sequences(hmm, cfg.num_sequences, cfg.sequence_length, derive_seed(trial_seed(cfg, 1), 2));
  std::vector<ObservationSequence> joined = data.train;
  joined.insert(joined.end(), data.test.begin(), data.test.end());
  EXPECT_EQ(joined, all);
}

TEST(RingExperiment, FailedTrialIsReportedAndOthersContinue) {
  const fs::path dir = scratch_dir("fail");
  ExperimentConfig cfg = tiny_ring(dir);
  cfg.methods = {"2sr", "ig"};
  const ExperimentResult r = run_experiment(cfg, cfg.num_obs, [&](int trial) {
    if (trial == 1) throw InvalidArgument("synthetic failure");
    return ring_trial_data(cfg, trial);
  });
  EXPECT_FALSE(r.all_ok());
  EXPECT_TRUE(r.trials[0].ok);
  EXPECT_FALSE(r.trials[1].ok);
  EXPECT_TRUE(fs::exists(dir / "trial_0_ig.csv"));
  EXPECT_FALSE(fs::exists(dir / "trial_1_ig.csv"));
  EXPECT_TRUE(fs::exists(dir / "failures.txt"));
  EXPECT_EQ(slurp(dir / "avg_ig.csv"), slurp(dir / "trial_0_ig.csv"));
}

TEST(RingExperiment, ModelMemoryGuard) {
  ExperimentConfig cfg = tiny_ring(scratch_dir("guard"));
  cfg.max_model_bytes = 100;
  EXPECT_THROW(run_ring_experiment(cfg), ResourceError);
}

TEST(TextExperiment, MatchesRingPipelineOnSameSequences) {
  const fs::path dir = scratch_dir("text");
  ExperimentConfig ring = tiny_ring(dir / "ring");
  ring.trials = 1;
  ring.methods = {"2sr", "ig", "mig"};
  const TrialData data = ring_trial_data(ring, 0);

  // write the trial's sequences as letters, back to back
  std::string corpus;
  for (const auto* part : {&data.train, &data.test})
    for (const auto& s : *part)
      for (Symbol o : s) corpus.push_back(static_cast<char>('a' + o));
  detail::write_file((dir / "corpus.txt").string(), corpus);
  const IngestedText ingested = ingest_text_content(corpus);

  ExperimentConfig text = ring;
  text.kind = ExperimentKind::text;
  text.output_dir = (dir / "text").string();
  text.excerpt_length = corpus.size();
  text.chunk_length = ring.sequence_length;
  const ExperimentResult tr = run_text_experiment(text, (dir / "corpus.txt").string());
  ASSERT_TRUE(tr.all_ok());
  EXPECT_TRUE(fs::exists(dir / "text" / "vocab.txt"));

  // same sequences under the text pipeline's symbol ids
  auto relabel = [&](std::vector<ObservationSequence> seqs) {
    for (auto& s : seqs)
      for (auto& o : s) o = ingested.vocabulary.lookup(static_cast<unsigned char>('a' + o));
    return seqs;
  };
  run_experiment(ring, ingested.vocabulary.size(), [&](int) {
    return TrialData{relabel(data.train), relabel(data.test)};
  });
  for (const auto& m : ring.methods)
    EXPECT_EQ(slurp(dir / "text" / ("trial_0_" + m + ".csv")), slurp(dir / "ring" / ("trial_0_" + m + ".csv")));
}

TEST(TextExperiment, CorpusShorterThanExcerpt) {
  const fs::path dir = scratch_dir("short");
  detail::write_file((dir / "c.txt").string(), "abcabc");
  ExperimentConfig cfg = parse_experiment_config("kind = text\nexcerpt_length = 100\n");
  cfg.output_dir = (dir / "out").string();
  EXPECT_THROW(run_text_experiment(cfg, (dir / "c.txt").string()), InvalidArgument);
}
