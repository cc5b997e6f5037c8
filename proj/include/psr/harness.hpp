#pragma once

// Experiment orchestration: datasets (ring HMM or text corpus), the method
// roster, multi-trial runs on a bounded worker pool, CSV/SVG output.

#include "psr/common.hpp"
#include "psr/features.hpp"
#include "psr/hmm.hpp"
#include "psr/metrics.hpp"
#include "psr/psr_model.hpp"
#include "psr/refine.hpp"
#include "psr/two_stage.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace psr {

enum class ExperimentKind { ring, text };

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> methods = {"2sr",        "ig",          "mig",
                                                   "ig_random",  "mig_random",  "psim_random",
                                                   "random_baseline"};
  return methods;
}

/// Methods whose model never changes; their curves are replicated across iterations.
inline bool is_constant_method(const std::string& m) { return m == "2sr" || m == "random_baseline"; }

inline bool is_multi_step_method(const std::string& m) { return m == "mig" || m == "mig_random"; }

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::ring;
  int num_states = 20;
  int num_obs = 20;
  std::size_t num_sequences = 10000;
  std::size_t sequence_length = 10;
  double train_fraction = 0.5;
  FeatureSpec features{20, 2, 2, true};
  TwoStageOptions two_stage;
  std::vector<std::string> methods = {"2sr", "random_baseline", "ig", "mig", "ig_random"};
  RefineConfig refine{.horizon = 3};
  /// "<method>.<key>" overrides of learning_rate, horizon, grad_norm, multi_step_average.
  std::map<std::string, std::map<std::string, std::string>> method_overrides;
  int trials = 10;
  std::uint64_t seed = 0;
  std::string output_dir = "results";
  unsigned workers = 1;
  std::string corpus;
  std::size_t excerpt_length = 100000;
  std::size_t chunk_length = 10;
  bool evaluate_train = false;
  bool save_models = false;
  double max_model_bytes = 2e9;

  void validate() const {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
      throw InvalidArgument("train_fraction must lie in (0, 1)");
    if (trials < 1) throw InvalidArgument("trials must be >= 1");
    if (methods.empty()) throw InvalidArgument("methods list is empty");
    for (const auto& m : methods)
      if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end())
        throw InvalidArgument("unknown method '" + m + "'");
    for (const auto& [m, keys] : method_overrides)
      if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end())
        throw InvalidArgument("override for unknown method '" + m + "'");
    if (workers < 1) throw InvalidArgument("workers must be >= 1");
    refine.validate();
    if (kind == ExperimentKind::ring) {
      if (num_states < 1 || num_obs < 1) throw InvalidArgument("num_states and num_obs must be >= 1");
      if (sequence_length < 1 || num_sequences < 2)
        throw InvalidArgument("need >= 2 sequences of length >= 1");
    } else if (chunk_length < 1 || excerpt_length < chunk_length) {
      throw InvalidArgument("excerpt_length must be >= chunk_length >= 1");
    }
  }

  RefineConfig refine_for(const std::string& method) const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ParseError("expected a boolean, got '" + v + "'");
}

inline long long parse_int(const std::string& v) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ParseError("expected an integer, got '" + v + "'");
  return out;
}

inline long long parse_nonnegative(const std::string& v) {
  const long long out = parse_int(v);
  if (out < 0) throw ParseError("expected a nonnegative integer, got '" + v + "'");
  return out;
}

inline GradNorm parse_grad_norm(const std::string& v) {
  if (v == "l1" || v == "l1_unit") return GradNorm::l1_unit;
  if (v == "none") return GradNorm::none;
  throw ParseError("grad_norm must be l1 or none, got '" + v + "'");
}

inline void apply_refine_key(RefineConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "learning_rate")
    cfg.learning_rate = parse_double(value);
  else if (key == "horizon")
    cfg.horizon = static_cast<int>(parse_int(value));
  else if (key == "grad_norm")
    cfg.grad_norm = parse_grad_norm(value);
  else if (key == "multi_step_average")
    cfg.multi_step_average = parse_bool(value);
  else
    throw ParseError("key '" + key + "' cannot be overridden per method");
}

}  // namespace detail

inline RefineConfig ExperimentConfig::refine_for(const std::string& method) const {
  RefineConfig cfg = refine;
  if (auto it = method_overrides.find(method); it != method_overrides.end())
    for (const auto& [key, value] : it->second) detail::apply_refine_key(cfg, key, value);
  if (!is_multi_step_method(method)) cfg.horizon = 1;
  cfg.init = (method == "ig_random" || method == "mig_random" || method == "psim_random")
                 ? InitMode::random
                 : InitMode::two_stage;
  return cfg;
}

/// Flat "key = value" text; '#' starts a comment.
inline ExperimentConfig parse_experiment_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    try {
      if (key == "kind") {
        if (value == "ring")
          cfg.kind = ExperimentKind::ring;
        else if (value == "text")
          cfg.kind = ExperimentKind::text;
        else
          throw ParseError("kind must be ring or text");
      } else if (key == "num_states") {
        cfg.num_states = static_cast<int>(detail::parse_int(value));
      } else if (key == "num_obs") {
        cfg.num_obs = static_cast<int>(detail::parse_int(value));
      } else if (key == "num_sequences") {
        cfg.num_sequences = static_cast<std::size_t>(detail::parse_nonnegative(value));
      } else if (key == "sequence_length") {
        cfg.sequence_length = static_cast<std::size_t>(detail::parse_nonnegative(value));
      } else if (key == "train_fraction") {
        cfg.train_fraction = parse_double(value);
      } else if (key == "future_length") {
        cfg.features.future_length = static_cast<int>(detail::parse_int(value));
      } else if (key == "history_length") {
        cfg.features.history_length = static_cast<int>(detail::parse_int(value));
      } else if (key == "history_bias") {
        cfg.features.history_bias = detail::parse_bool(value);
      } else if (key == "ridge") {
        cfg.two_stage.ridge = parse_double(value);
      } else if (key == "rank") {
        const long long r = detail::parse_nonnegative(value);
        cfg.two_stage.rank = r > 0 ? std::optional<Index>(r) : std::nullopt;
      } else if (key == "methods") {
        cfg.methods.clear();
        std::istringstream list(value);
        std::string item;
        while (std::getline(list, item, ','))
          if (auto m = detail::trim(item); !m.empty()) cfg.methods.push_back(m);
      } else if (key == "iterations") {
        cfg.refine.iterations = static_cast<int>(detail::parse_nonnegative(value));
      } else if (key == "learning_rate" || key == "horizon" || key == "grad_norm" ||
                 key == "multi_step_average") {
        detail::apply_refine_key(cfg.refine, key, value);
      } else if (key == "trials") {
        cfg.trials = static_cast<int>(detail::parse_int(value));
      } else if (key == "seed") {
        cfg.seed = static_cast<std::uint64_t>(detail::parse_nonnegative(value));
      } else if (key == "output_dir") {
        cfg.output_dir = value;
      } else if (key == "workers") {
        cfg.workers = static_cast<unsigned>(detail::parse_nonnegative(value));
      } else if (key == "corpus") {
        cfg.corpus = value;
      } else if (key == "excerpt_length") {
        cfg.excerpt_length = static_cast<std::size_t>(detail::parse_nonnegative(value));
      } else if (key == "chunk_length") {
        cfg.chunk_length = static_cast<std::size_t>(detail::parse_nonnegative(value));
      } else if (key == "evaluate_train") {
        cfg.evaluate_train = detail::parse_bool(value);
      } else if (key == "save_models") {
        cfg.save_models = detail::parse_bool(value);
      } else if (key == "max_model_bytes") {
        cfg.max_model_bytes = parse_double(value);
      } else if (auto dot = key.find('.'); dot != std::string::npos) {
        const std::string method = key.substr(0, dot), sub = key.substr(dot + 1);
        RefineConfig probe;
        detail::apply_refine_key(probe, sub, value);  // rejects bad keys/values early
        cfg.method_overrides[method][sub] = value;
      } else {
        throw ParseError("unknown key '" + key + "'");
      }
    } catch (const ParseError& e) {
      throw ParseError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const InvalidArgument& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Text corpora

/// Byte <-> dense id, ids assigned in order of first appearance.
class Vocabulary {
 public:
  Vocabulary() { ids_.fill(-1); }

  Symbol id_for(unsigned char byte) {
    if (ids_[byte] < 0) {
      ids_[byte] = static_cast<Symbol>(bytes_.size());
      bytes_.push_back(byte);
    }
    return ids_[byte];
  }

  Symbol lookup(unsigned char byte) const {
    if (ids_[byte] < 0) throw InvalidArgument("byte not in vocabulary");
    return ids_[byte];
  }

  unsigned char byte_for(Symbol id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= bytes_.size()) throw InvalidArgument("unknown symbol id");
    return bytes_[static_cast<std::size_t>(id)];
  }

  int size() const { return static_cast<int>(bytes_.size()); }

  ObservationSequence encode(const std::string& text) const {
    ObservationSequence out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(lookup(c));
    return out;
  }

  std::string decode(std::span<const Symbol> symbols) const {
    std::string out;
    out.reserve(symbols.size());
    for (Symbol s : symbols) out.push_back(static_cast<char>(byte_for(s)));
    return out;
  }

  /// "<id> <byte value>" per line.
  std::string to_text() const {
    std::string out;
    for (std::size_t i = 0; i < bytes_.size(); ++i)
      out += std::to_string(i) + ' ' + std::to_string(static_cast<int>(bytes_[i])) + '\n';
    return out;
  }

 private:
  std::array<Symbol, 256> ids_{};
  std::vector<unsigned char> bytes_;
};

struct IngestedText {
  ObservationSequence symbols;
  Vocabulary vocabulary;
};

inline IngestedText ingest_text_content(const std::string& content) {
  if (content.empty()) throw EmptyData("corpus is empty");
  IngestedText out;
  out.symbols.reserve(content.size());
  for (unsigned char c : content) out.symbols.push_back(out.vocabulary.id_for(c));
  return out;
}

inline IngestedText ingest_text(const std::string& path) {
  return ingest_text_content(detail::read_file(path));
}

/// Consecutive fixed-length pieces; a short tail is dropped.
inline std::vector<ObservationSequence> chunk_sequence(std::span<const Symbol> symbols, std::size_t length) {
  if (length < 1) throw InvalidArgument("chunk length must be >= 1");
  std::vector<ObservationSequence> out;
  for (std::size_t start = 0; start + length <= symbols.size(); start += length)
    out.emplace_back(symbols.begin() + static_cast<std::ptrdiff_t>(start),
                     symbols.begin() + static_cast<std::ptrdiff_t>(start + length));
  return out;
}

// ---------------------------------------------------------------------------
// Metric tables

inline constexpr std::array<const char*, 7> kMetricColumns = {
    "mean_pnll", "ospa", "l2se_mean", "l2se_log10_mean", "l2se_median", "invalid_probability_count",
    "clamp_events"};

struct MetricsTable {
  std::vector<int> iterations;
  std::vector<std::array<double, 7>> rows;
};

inline std::array<double, 7> metrics_values(const MetricsReport& r) {
  return {r.mean_pnll,
          r.ospa,
          r.l2se_mean,
          r.l2se_log10_mean,
          r.l2se_median,
          static_cast<double>(r.invalid_probability_count),
          static_cast<double>(r.clamp_events)};
}

inline std::string metrics_table_csv(const std::vector<MetricsReport>& series) {
  std::string out = metrics_csv_header() + '\n';
  for (std::size_t i = 0; i < series.size(); ++i) out += metrics_csv_row(static_cast<int>(i), series[i]) + '\n';
  return out;
}

inline std::string metrics_table_csv(const MetricsTable& table) {
  std::string out = metrics_csv_header() + '\n';
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    out += std::to_string(table.iterations[i]);
    for (double v : table.rows[i]) out += ',' + format_double(v);
    out += '\n';
  }
  return out;
}

inline MetricsTable read_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != metrics_csv_header())
    throw ParseError("metrics CSV: unexpected header");
  MetricsTable table;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    std::istringstream fields(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(fields, cell, ',')) cells.push_back(detail::trim(cell));
    if (cells.size() != 8) throw ParseError("metrics CSV line " + std::to_string(line_no) + ": expected 8 fields");
    table.iterations.push_back(static_cast<int>(detail::parse_int(cells[0])));
    std::array<double, 7> row{};
    for (std::size_t c = 0; c < 7; ++c) row[c] = parse_double(cells[c + 1]);
    table.rows.push_back(row);
  }
  return table;
}

/// Elementwise mean over equally shaped tables.
inline MetricsTable average_tables(std::span<const MetricsTable> tables) {
  if (tables.empty()) throw EmptyData("nothing to average");
  MetricsTable avg = tables.front();
  for (const auto& t : tables)
    if (t.rows.size() != avg.rows.size()) throw InvalidArgument("tables differ in length");
  for (std::size_t r = 0; r < avg.rows.size(); ++r)
    for (std::size_t c = 0; c < 7; ++c) {
      double sum = 0.0;
      for (const auto& t : tables) sum += t.rows[r][c];
      avg.rows[r][c] = sum / static_cast<double>(tables.size());
    }
  return avg;
}

// ---------------------------------------------------------------------------
// SVG line charts

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

inline std::string render_line_chart(const std::string& title, const std::string& x_label,
                                     const std::vector<PlotSeries>& series) {
  static constexpr std::array<const char*, 8> palette = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                                         "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  const double width = 720, height = 440, left = 80, right = 170, top = 40, bottom = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) {
    const double pad = std::max(std::abs(y0) * 0.05, 1e-12);
    y0 -= pad;
    y1 += pad;
  }
  const double pw = width - left - right, ph = height - top - bottom;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return std::string(buf);
  };
  auto coord = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) + "\" height=\"" +
                    num(height) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + coord(left + pw / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" +
         title + "</text>\n";
  svg += "<rect x=\"" + coord(left) + "\" y=\"" + coord(top) + "\" width=\"" + coord(pw) + "\" height=\"" +
         coord(ph) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    svg += "<text x=\"" + coord(px(xv)) + "\" y=\"" + coord(top + ph + 16) + "\" text-anchor=\"middle\">" +
           num(xv) + "</text>\n";
    svg += "<text x=\"" + coord(left - 6) + "\" y=\"" + coord(py(yv) + 4) + "\" text-anchor=\"end\">" + num(yv) +
           "</text>\n";
    svg += "<line x1=\"" + coord(left) + "\" x2=\"" + coord(left + pw) + "\" y1=\"" + coord(py(yv)) + "\" y2=\"" +
           coord(py(yv)) + "\" stroke=\"#dddddd\"/>\n";
  }
  svg += "<text x=\"" + coord(left + pw / 2) + "\" y=\"" + coord(height - 12) + "\" text-anchor=\"middle\">" +
         x_label + "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = palette[k % palette.size()];
    std::string points;
    auto flush = [&] {
      if (!points.empty())
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" +
               points + "\"/>\n";
      points.clear();
    };
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
        flush();
        continue;
      }
      if (!points.empty()) points += ' ';
      points += coord(px(s.x[i])) + ',' + coord(py(s.y[i]));
    }
    flush();
    const double ly = top + 14 + 18 * static_cast<double>(k);
    svg += "<line x1=\"" + coord(left + pw + 12) + "\" x2=\"" + coord(left + pw + 36) + "\" y1=\"" + coord(ly) +
           "\" y2=\"" + coord(ly) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    svg += "<text x=\"" + coord(left + pw + 42) + "\" y=\"" + coord(ly + 4) + "\">" + s.name + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

/// One chart per metric column, one series per method table.
inline std::map<std::string, std::string> plot_metric_tables(
    const std::vector<std::pair<std::string, MetricsTable>>& tables) {
  std::map<std::string, std::string> charts;
  for (std::size_t c = 0; c < 5; ++c) {
    std::vector<PlotSeries> series;
    for (const auto& [name, table] : tables) {
      PlotSeries s{name, {}, {}};
      for (std::size_t r = 0; r < table.rows.size(); ++r) {
        s.x.push_back(table.iterations[r]);
        s.y.push_back(table.rows[r][c]);
      }
      series.push_back(std::move(s));
    }
    charts[kMetricColumns[c]] = render_line_chart(kMetricColumns[c], "iteration", series);
  }
  return charts;
}

// ---------------------------------------------------------------------------
// Experiments

struct MethodSeries {
  std::string method;
  std::vector<MetricsReport> test;
  std::vector<MetricsReport> train;  // empty unless evaluate_train
  std::optional<PsrModel> final_model;
};

struct TrialResult {
  int trial = 0;
  std::uint64_t seed = 0;
  bool ok = true;
  std::string error;
  std::vector<MethodSeries> methods;
};

struct ExperimentResult {
  std::vector<TrialResult> trials;
  std::vector<std::string> files;

  bool all_ok() const {
    return std::all_of(trials.begin(), trials.end(), [](const TrialResult& t) { return t.ok; });
  }
};

struct TrialData {
  std::vector<ObservationSequence> train;
  std::vector<ObservationSequence> test;
};

/// splitmix64 of (base, stream): independent per-purpose seeds within a trial.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t trial_seed(const ExperimentConfig& cfg, int trial) {
  return cfg.seed + static_cast<std::uint64_t>(trial);
}

/// Runs `count` jobs on at most `workers` threads.
template <typename Job>
void run_bounded(std::size_t count, unsigned workers, Job&& job) {
  const unsigned n = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(count)));
  if (n == 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (unsigned w = 0; w < n; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) job(i);
    });
}

inline TrialData split_dataset(std::vector<ObservationSequence> seqs, double train_fraction) {
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(seqs.size())));
  if (n_train == 0 || n_train >= seqs.size()) throw InvalidArgument("split leaves an empty train or test set");
  TrialData data;
  data.train.assign(std::make_move_iterator(seqs.begin()),
                    std::make_move_iterator(seqs.begin() + static_cast<std::ptrdiff_t>(n_train)));
  data.test.assign(std::make_move_iterator(seqs.begin() + static_cast<std::ptrdiff_t>(n_train)),
                   std::make_move_iterator(seqs.end()));
  return data;
}

inline TrialData ring_trial_data(const ExperimentConfig& cfg, int trial) {
  const std::uint64_t s = trial_seed(cfg, trial);
  const HmmModel hmm = generate_ring_hmm(cfg.num_states, cfg.num_obs, derive_seed(s, 1));
  return split_dataset(sample_sequences(hmm, cfg.num_sequences, cfg.sequence_length, derive_seed(s, 2)),
                       cfg.train_fraction);
}

/// Contiguous excerpt at a seeded random offset, chunked and split.
inline TrialData text_trial_data(const ExperimentConfig& cfg, const IngestedText& corpus, int trial) {
  const std::size_t total = corpus.symbols.size();
  if (cfg.excerpt_length > total)
    throw InvalidArgument("corpus (" + std::to_string(total) + " symbols) is shorter than excerpt_length " +
                          std::to_string(cfg.excerpt_length));
  Rng rng(derive_seed(trial_seed(cfg, trial), 2));
  const std::size_t start = std::uniform_int_distribution<std::size_t>(0, total - cfg.excerpt_length)(rng);
  const auto excerpt = std::span(corpus.symbols).subspan(start, cfg.excerpt_length);
  return split_dataset(chunk_sequence(excerpt, cfg.chunk_length), cfg.train_fraction);
}

namespace detail {

inline std::mutex& log_mutex() {
  static std::mutex m;
  return m;
}

inline void log_line(const std::string& line) {
  std::lock_guard lock(log_mutex());
  std::clog << line << std::endl;
}

struct PreparedTrial {
  TrialData data;
  std::optional<PsrModel> two_stage;
  std::optional<PsrModel> random;
  std::string error;
};

inline std::vector<MetricsReport> replicate(const MetricsReport& r, int iterations) {
  return std::vector<MetricsReport>(static_cast<std::size_t>(iterations) + 1, r);
}

inline MethodSeries run_method(const ExperimentConfig& cfg, const std::string& method,
                               const PreparedTrial& prep, std::uint64_t seed) {
  const FeatureSpec& spec = prep.two_stage->spec();
  MethodSeries out{method, {}, {}, std::nullopt};
  const int iterations = cfg.refine.iterations;
  auto constant = [&](const PsrModel& model) {
    out.test = replicate(evaluate(model, prep.data.test, spec), iterations);
    if (cfg.evaluate_train) out.train = replicate(evaluate(model, prep.data.train, spec), iterations);
    if (cfg.save_models) out.final_model = model;
  };
  if (method == "2sr") {
    constant(*prep.two_stage);
    return out;
  }
  if (method == "random_baseline") {
    constant(*prep.random);
    return out;
  }
  RefineConfig rc = cfg.refine_for(method);
  rc.seed = derive_seed(seed, 4);
  EvaluationSets eval{cfg.evaluate_train ? std::span<const ObservationSequence>(prep.data.train)
                                         : std::span<const ObservationSequence>(),
                      prep.data.test};
  RefineResult result;
  if (method == "psim_random") {
    rc.seed = derive_seed(seed, 3);
    result = psim_baseline(prep.data.train, spec, rc, eval, cfg.two_stage);
  } else {
    const PsrModel& init = rc.init == InitMode::random ? *prep.random : *prep.two_stage;
    result = is_multi_step_method(method) ? refine_multi_step(init, prep.data.train, spec, rc, eval)
                                          : refine_one_step(init, prep.data.train, spec, rc, eval);
  }
  for (const auto& log : result.logs) {
    out.test.push_back(*log.test);
    if (log.train) out.train.push_back(*log.train);
  }
  if (cfg.save_models) out.final_model = std::move(result.model);
  return out;
}

}  // namespace detail

/// Runs every configured method on every trial's data and writes
/// trial_<i>_<method>.csv, avg_<method>.csv and <metric>.svg into output_dir.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, int alphabet_size,
                                       const std::function<TrialData(int)>& make_data) {
  cfg.validate();
  FeatureSpec spec = cfg.features;
  spec.alphabet_size = alphabet_size;
  spec.validate();
  const double model_bytes = 8.0 * static_cast<double>(spec.future_dim()) *
                             static_cast<double>(spec.future_dim()) * alphabet_size;
  if (model_bytes > cfg.max_model_bytes)
    throw ResourceError("a model would need " + format_double(model_bytes) + " bytes (max_model_bytes " +
                        format_double(cfg.max_model_bytes) + "); reduce future_length or the alphabet");

  const auto trials = static_cast<std::size_t>(cfg.trials);
  std::vector<detail::PreparedTrial> prepared(trials);
  run_bounded(trials, cfg.workers, [&](std::size_t t) {
    auto& p = prepared[t];
    const std::uint64_t seed = trial_seed(cfg, static_cast<int>(t));
    try {
      p.data = make_data(static_cast<int>(t));
      for (const auto& s : p.data.train) check_alphabet(s, alphabet_size);
      for (const auto& s : p.data.test) check_alphabet(s, alphabet_size);
      p.two_stage = two_stage_regression(make_training_triples(p.data.train, spec), spec, cfg.two_stage);
      p.random = random_init(spec, p.data.train, derive_seed(seed, 3), cfg.two_stage);
    } catch (const std::exception& e) {
      p.error = e.what();
    }
  });

  ExperimentResult result;
  result.trials.resize(trials);
  for (std::size_t t = 0; t < trials; ++t) {
    result.trials[t].trial = static_cast<int>(t);
    result.trials[t].seed = trial_seed(cfg, static_cast<int>(t));
    result.trials[t].methods.resize(cfg.methods.size());
    if (!prepared[t].error.empty()) {
      result.trials[t].ok = false;
      result.trials[t].error = prepared[t].error;
    }
  }
  const std::size_t per_trial = cfg.methods.size();
  std::vector<std::string> job_errors(trials * per_trial);
  run_bounded(trials * per_trial, cfg.workers, [&](std::size_t job) {
    const std::size_t t = job / per_trial, m = job % per_trial;
    if (!prepared[t].error.empty()) return;
    const std::string& method = cfg.methods[m];
    const auto start = std::chrono::steady_clock::now();
    try {
      result.trials[t].methods[m] = detail::run_method(cfg, method, prepared[t], result.trials[t].seed);
    } catch (const std::exception& e) {
      job_errors[job] = method + ": " + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    char elapsed[32];
    std::snprintf(elapsed, sizeof elapsed, " (%.1f s)", secs);
    detail::log_line("trial " + std::to_string(t) + " " + method + (job_errors[job].empty() ? " done" : " FAILED") +
                     elapsed);
  });
  for (std::size_t job = 0; job < job_errors.size(); ++job) {
    auto& trial = result.trials[job / per_trial];
    if (!job_errors[job].empty() && trial.ok) {
      trial.ok = false;
      trial.error = job_errors[job];
    }
  }
  prepared.clear();

  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  auto write = [&](const std::string& name, const std::string& content) {
    const std::string path = (fs::path(cfg.output_dir) / name).string();
    detail::write_file(path, content);
    result.files.push_back(path);
  };
  std::vector<std::pair<std::string, MetricsTable>> averages;
  std::string failures;
  for (std::size_t m = 0; m < per_trial; ++m) {
    const std::string& method = cfg.methods[m];
    std::vector<MetricsTable> tables;
    for (const auto& trial : result.trials) {
      if (!trial.ok) continue;
      const MethodSeries& series = trial.methods[m];
      const std::string csv = metrics_table_csv(series.test);
      const std::string stem = "trial_" + std::to_string(trial.trial) + "_" + method;
      write(stem + ".csv", csv);
      if (!series.train.empty()) write(stem + "_train.csv", metrics_table_csv(series.train));
      if (series.final_model) write(stem + ".json", serialize_model(*series.final_model));
      tables.push_back(read_metrics_csv(csv));
    }
    if (tables.empty()) continue;
    MetricsTable avg = average_tables(tables);
    write("avg_" + method + ".csv", metrics_table_csv(avg));
    averages.emplace_back(method, std::move(avg));
  }
  for (const auto& trial : result.trials)
    if (!trial.ok) {
      failures += "trial " + std::to_string(trial.trial) + ": " + trial.error + '\n';
      detail::log_line("trial " + std::to_string(trial.trial) + " failed: " + trial.error);
    }
  if (!failures.empty()) write("failures.txt", failures);
  if (!averages.empty())
    for (const auto& [metric, svg] : plot_metric_tables(averages)) write(metric + ".svg", svg);
  return result;
}

inline ExperimentResult run_ring_experiment(const ExperimentConfig& cfg) {
  if (cfg.kind != ExperimentKind::ring) throw InvalidArgument("run_ring_experiment needs kind = ring");
  return run_experiment(cfg, cfg.num_obs, [&cfg](int trial) { return ring_trial_data(cfg, trial); });
}

inline ExperimentResult run_text_experiment(const ExperimentConfig& cfg, const std::string& corpus_path) {
  if (cfg.kind != ExperimentKind::text) throw InvalidArgument("run_text_experiment needs kind = text");
  const IngestedText corpus = ingest_text(corpus_path);
  if (cfg.excerpt_length > corpus.symbols.size())
    throw InvalidArgument("corpus shorter than excerpt_length");
  std::filesystem::create_directories(cfg.output_dir);
  const std::string vocab_path = (std::filesystem::path(cfg.output_dir) / "vocab.txt").string();
  detail::write_file(vocab_path, corpus.vocabulary.to_text());
  ExperimentResult result = run_experiment(cfg, corpus.vocabulary.size(),
                                           [&](int trial) { return text_trial_data(cfg, corpus, trial); });
  result.files.insert(result.files.begin(), vocab_path);
  return result;
}

}  // namespace psr
