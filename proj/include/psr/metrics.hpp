#pragma once

// Held-out evaluation: proxy negative log likelihood, one-step prediction
// accuracy and the L2 state error e_t = 1/2 ||psi_{t+1} - q_{t+1}||^2.
//
// OSPA and L2SE share one position set: every t whose psi_{t+1} window is
// complete. PNLL always covers the whole sequence.

#include "psr/common.hpp"
#include "psr/features.hpp"
#include "psr/psr_model.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace psr {

struct MetricsReport {
  double mean_pnll = 0.0;
  double ospa = 0.0;
  double l2se_mean = 0.0;
  double l2se_log10_mean = 0.0;  // -inf when l2se_mean == 0
  double l2se_median = 0.0;
  std::size_t invalid_probability_count = 0;
  std::size_t clamp_events = 0;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

struct L2seStats {
  double mean = 0.0;
  double log10_mean = 0.0;
  double median = 0.0;
};

/// Exact median; averages the two middle order statistics for even counts.
inline double median_of(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

inline L2seStats summarize_l2se(const std::vector<double>& errors) {
  L2seStats stats;
  if (errors.empty()) return stats;
  double sum = 0.0;
  for (double e : errors) sum += e;
  stats.mean = sum / static_cast<double>(errors.size());
  stats.log10_mean = std::log10(stats.mean);
  stats.median = median_of(errors);
  return stats;
}

inline double state_error(const Vector& state, const IndicatorVector& psi) {
  Vector diff = -state;
  for (Index i : psi.ones()) diff[i] += 1.0;
  return 0.5 * diff.squaredNorm();
}

inline double mean_pnll(const PsrModel& model, std::span<const ObservationSequence> seqs,
                        std::size_t* invalid_count = nullptr) {
  if (seqs.empty()) throw EmptyData("mean_pnll: no sequences");
  double sum = 0.0;
  std::size_t invalid = 0;
  for (const auto& s : seqs) {
    const PnllResult r = pnll(model, s);
    sum += r.value;
    invalid += r.invalid_probability ? 1 : 0;
  }
  if (invalid_count) *invalid_count = invalid;
  return sum / static_cast<double>(seqs.size());
}

inline double ospa(const PsrModel& model, std::span<const ObservationSequence> seqs,
                   const FeatureSpec& spec) {
  if (seqs.empty()) throw EmptyData("ospa: no sequences");
  std::size_t hits = 0, total = 0;
  for (const auto& s : seqs) {
    const std::size_t n = usable_positions(s.size(), spec);
    if (n == 0) continue;
    const FilterTrace trace = filter_sequence(model, std::span(s).first(n));
    for (std::size_t t = 0; t < n; ++t) {
      hits += predict_symbol(one_step_scores(model, trace.states[t])) == s[t] ? 1 : 0;
      ++total;
    }
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

inline L2seStats l2se_stats(const PsrModel& model, std::span<const ObservationSequence> seqs,
                            const FeatureSpec& spec) {
  if (seqs.empty()) throw EmptyData("l2se_stats: no sequences");
  std::vector<double> errors;
  for (const auto& s : seqs) {
    const std::size_t n = usable_positions(s.size(), spec);
    if (n == 0) continue;
    const FilterTrace trace = filter_sequence(model, std::span(s).first(n));
    for (std::size_t t = 0; t < n; ++t)
      errors.push_back(state_error(trace.states[t + 1], future_features(s, t + 1, spec)));
  }
  return summarize_l2se(errors);
}

/// All metrics from one filtering pass. Sequences advance in lockstep and the
/// states of every sequence that observes symbol i are pushed through B_i with
/// a single matrix product.
inline MetricsReport evaluate(const PsrModel& model, std::span<const ObservationSequence> seqs,
                              const FeatureSpec& spec) {
  if (seqs.empty()) throw EmptyData("evaluate: no sequences");
  const Index d = model.dim();
  const int a = model.alphabet_size();
  const std::size_t n = seqs.size();
  std::size_t max_len = 0;
  for (const auto& s : seqs) {
    check_alphabet(s, a);
    max_len = std::max(max_len, s.size());
  }

  Matrix score_rows(a, d);  // row i = b_inf^T B_i
  for (Symbol i = 0; i < a; ++i) score_rows.row(i).noalias() = model.b_inf().transpose() * model.op(i);

  Matrix states = model.q1().replicate(1, static_cast<Index>(n));
  std::vector<double> log_abs(n, 0.0);
  std::vector<char> negative(n, 0), dead(n, 0);
  std::vector<double> errors;
  std::size_t hits = 0, positions = 0, clamps = 0;

  std::vector<std::vector<Index>> groups(static_cast<std::size_t>(a));
  Matrix gathered, pushed;
  for (std::size_t t = 0; t < max_len; ++t) {
    for (auto& g : groups) g.clear();
    for (std::size_t j = 0; j < n; ++j) {
      const auto& s = seqs[j];
      if (t >= s.size()) continue;
      const Symbol o = s[t];
      const Index col = static_cast<Index>(j);
      if (t < usable_positions(s.size(), spec)) {
        const Vector scores = score_rows * states.col(col);
        hits += predict_symbol(scores) == o ? 1 : 0;
        ++positions;
      }
      if (t + 1 == s.size()) {
        // last factor of the PNLL chain: b_inf . B_o x_T needs no new state
        const double tail = score_rows.row(o).dot(states.col(col));
        log_abs[j] += std::log(std::abs(tail));
        negative[j] ^= tail < 0.0;
        dead[j] |= tail == 0.0;
      } else {
        groups[static_cast<std::size_t>(o)].push_back(col);
      }
    }
    for (Symbol o = 0; o < a; ++o) {
      const auto& cols = groups[static_cast<std::size_t>(o)];
      if (cols.empty()) continue;
      gathered.resize(d, static_cast<Index>(cols.size()));
      for (std::size_t c = 0; c < cols.size(); ++c) gathered.col(static_cast<Index>(c)) = states.col(cols[c]);
      pushed.noalias() = model.op(o) * gathered;
      for (std::size_t c = 0; c < cols.size(); ++c) {
        const Index col = cols[c];
        const auto j = static_cast<std::size_t>(col);
        bool clamped = false;
        const double den = clamp_denominator(model.b_inf().dot(pushed.col(static_cast<Index>(c))), clamped);
        clamps += clamped ? 1 : 0;
        states.col(col) = pushed.col(static_cast<Index>(c)) / den;
        log_abs[j] += std::log(std::abs(den));
        negative[j] ^= den < 0.0;
        if (t < usable_positions(seqs[j].size(), spec))
          errors.push_back(state_error(states.col(col), future_features(seqs[j], t + 1, spec)));
      }
    }
  }

  MetricsReport report;
  double pnll_sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (seqs[j].empty()) continue;  // probability of the empty sequence is b_inf . q1 = 1
    if (negative[j] || dead[j] || !std::isfinite(log_abs[j])) {
      pnll_sum += -std::log(kProbabilityFloor);
      ++report.invalid_probability_count;
    } else {
      pnll_sum += -log_abs[j];
    }
  }
  report.mean_pnll = pnll_sum / static_cast<double>(n);
  report.ospa = positions ? static_cast<double>(hits) / static_cast<double>(positions) : 0.0;
  const L2seStats l2 = summarize_l2se(errors);
  report.l2se_mean = l2.mean;
  report.l2se_log10_mean = l2.log10_mean;
  report.l2se_median = l2.median;
  report.clamp_events = clamps;
  return report;
}

inline std::string metrics_csv_header() {
  return "iteration,mean_pnll,ospa,l2se_mean,l2se_log10_mean,l2se_median,"
         "invalid_probability_count,clamp_events";
}

inline std::string metrics_csv_row(int iteration, const MetricsReport& r) {
  return std::to_string(iteration) + ',' + format_double(r.mean_pnll) + ',' + format_double(r.ospa) +
         ',' + format_double(r.l2se_mean) + ',' + format_double(r.l2se_log10_mean) + ',' +
         format_double(r.l2se_median) + ',' + std::to_string(r.invalid_probability_count) + ',' +
         std::to_string(r.clamp_events);
}

}  // namespace psr
