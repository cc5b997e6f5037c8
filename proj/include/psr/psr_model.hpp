#pragma once

// Predictive state representation: q1, b_inf and one operator per symbol.
// Filtering maps q to B_o q / (b_inf . B_o q).

#include "psr/common.hpp"
#include "psr/features.hpp"
#include "psr/hmm.hpp"

#include <json.hpp>

#include <string>
#include <utility>
#include <vector>

namespace psr {

class PsrModel {
 public:
  PsrModel() = default;

  /// Builds a model and rescales q1 so that b_inf . q1 = 1.
  static PsrModel create(const FeatureSpec& spec, Vector q1, Vector b_inf,
                         std::vector<Matrix> operators) {
    PsrModel m(spec, std::move(q1), std::move(b_inf), std::move(operators));
    const double norm = m.b_inf_.dot(m.q1_);
    if (!std::isfinite(norm) || norm == 0.0)
      throw InvalidArgument("cannot normalize q1: b_inf . q1 = " + format_double(norm));
    m.q1_ /= norm;
    return m;
  }

  /// Builds a model from stored parameters without touching q1; requires
  /// b_inf . q1 = 1 within 1e-9.
  static PsrModel from_parts(const FeatureSpec& spec, Vector q1, Vector b_inf,
                             std::vector<Matrix> operators) {
    PsrModel m(spec, std::move(q1), std::move(b_inf), std::move(operators));
    if (std::abs(m.b_inf_.dot(m.q1_) - 1.0) > 1e-9)
      throw InvalidArgument("b_inf . q1 must equal 1");
    return m;
  }

  const FeatureSpec& spec() const { return spec_; }
  Index dim() const { return q1_.size(); }
  int alphabet_size() const { return static_cast<int>(operators_.size()); }
  const Vector& q1() const { return q1_; }
  const Vector& b_inf() const { return b_inf_; }
  const std::vector<Matrix>& operators() const { return operators_; }
  const Matrix& op(Symbol o) const { return operators_[static_cast<std::size_t>(o)]; }

  /// Direct operator access for in-place refinement of a private copy.
  Matrix& mutable_op(Symbol o) { return operators_[static_cast<std::size_t>(o)]; }

  bool all_finite() const {
    if (!q1_.allFinite() || !b_inf_.allFinite()) return false;
    for (const auto& b : operators_)
      if (!b.allFinite()) return false;
    return true;
  }

  friend bool operator==(const PsrModel& a, const PsrModel& b) {
    if (!(a.spec_ == b.spec_) || a.q1_ != b.q1_ || a.b_inf_ != b.b_inf_) return false;
    if (a.operators_.size() != b.operators_.size()) return false;
    for (std::size_t i = 0; i < a.operators_.size(); ++i)
      if (a.operators_[i] != b.operators_[i]) return false;
    return true;
  }

 private:
  PsrModel(const FeatureSpec& spec, Vector q1, Vector b_inf, std::vector<Matrix> operators)
      : spec_(spec), q1_(std::move(q1)), b_inf_(std::move(b_inf)), operators_(std::move(operators)) {
    spec_.validate();
    const Index d = spec_.future_dim();
    if (q1_.size() != d || b_inf_.size() != d)
      throw InvalidArgument("q1 and b_inf must have the future feature dimension");
    if (static_cast<int>(operators_.size()) != spec_.alphabet_size)
      throw InvalidArgument("need exactly one operator per symbol");
    for (const auto& b : operators_)
      if (b.rows() != d || b.cols() != d) throw InvalidArgument("operators must be d x d");
    if (!all_finite()) throw InvalidArgument("model parameters must be finite");
  }

  FeatureSpec spec_;
  Vector q1_;
  Vector b_inf_;
  std::vector<Matrix> operators_;
};

struct FilterStep {
  Vector state;
  double denominator = 0.0;  // raw b_inf . B_o q, before clamping
  bool clamped = false;
};

inline void check_symbol(const PsrModel& model, Symbol o) {
  if (o < 0 || o >= model.alphabet_size())
    throw InvalidArgument("symbol " + std::to_string(o) + " has no operator");
}

/// Normalizes an unnormalized next state in place; returns the raw denominator.
inline double normalize_state(const PsrModel& model, Vector& raw, bool& clamped) {
  const double s = model.b_inf().dot(raw);
  raw /= clamp_denominator(s, clamped);
  return s;
}

inline FilterStep filter(const PsrModel& model, const Vector& q, Symbol o) {
  check_symbol(model, o);
  FilterStep step;
  step.state.noalias() = model.op(o) * q;
  step.denominator = normalize_state(model, step.state, step.clamped);
  return step;
}

struct FilterTrace {
  std::vector<Vector> states;       // q_1 .. q_{T+1}
  std::vector<double> denominators;  // one per observation
  std::size_t clamp_events = 0;
};

inline FilterTrace filter_sequence(const PsrModel& model, std::span<const Symbol> seq) {
  check_alphabet(seq, model.alphabet_size());
  FilterTrace trace;
  trace.states.reserve(seq.size() + 1);
  trace.denominators.reserve(seq.size());
  trace.states.push_back(model.q1());
  for (Symbol o : seq) {
    FilterStep step = filter(model, trace.states.back(), o);
    trace.clamp_events += step.clamped ? 1 : 0;
    trace.denominators.push_back(step.denominator);
    trace.states.push_back(std::move(step.state));
  }
  return trace;
}

/// Applies the window's operators in temporal order, normalizing once at the end.
inline FilterStep propagate(const PsrModel& model, const Vector& q, std::span<const Symbol> window) {
  if (window.empty()) throw InvalidArgument("propagate: empty window");
  check_alphabet(window, model.alphabet_size());
  FilterStep step;
  step.state = q;
  Vector next(q.size());
  for (Symbol o : window) {
    next.noalias() = model.op(o) * step.state;
    step.state.swap(next);
  }
  step.denominator = normalize_state(model, step.state, step.clamped);
  return step;
}

/// Raw (unrectified) next-symbol scores b_inf . B_i q.
inline Vector one_step_scores(const PsrModel& model, const Vector& q) {
  Vector scores(model.alphabet_size());
  for (Symbol i = 0; i < model.alphabet_size(); ++i) scores[i] = model.b_inf().dot(model.op(i) * q);
  return scores;
}

/// Argmax of the scores, ties to the smallest symbol.
inline Symbol predict_symbol(const Eigen::Ref<const Vector>& scores) {
  Symbol best = 0;
  for (Index i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = static_cast<Symbol>(i);
  return best;
}

struct PnllResult {
  double value = 0.0;
  bool invalid_probability = false;
  std::size_t clamp_events = 0;
};

/// -log(b_inf B_{o_T} ... B_{o_1} q1) evaluated with per-step rescaling. A
/// nonpositive product yields -log(1e-300) and sets invalid_probability.
inline PnllResult pnll(const PsrModel& model, std::span<const Symbol> seq) {
  check_alphabet(seq, model.alphabet_size());
  PnllResult result;
  Vector x = model.q1();
  Vector next(x.size());
  double log_abs = 0.0;
  bool negative = false;
  for (Symbol o : seq) {
    next.noalias() = model.op(o) * x;
    x.swap(next);
    bool clamped = false;
    const double c = clamp_denominator(model.b_inf().dot(x), clamped);
    result.clamp_events += clamped ? 1 : 0;
    x /= c;
    log_abs += std::log(std::abs(c));
    negative ^= c < 0.0;
  }
  const double tail = model.b_inf().dot(x);  // 1 unless a step was clamped
  log_abs += std::log(std::abs(tail));
  negative ^= tail < 0.0;
  if (negative || tail == 0.0 || !std::isfinite(log_abs)) {
    result.value = -std::log(kProbabilityFloor);
    result.invalid_probability = true;
  } else {
    result.value = -log_abs;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Serialization: {version, feature_spec, d, alphabet_size, q1, b_inf, operators}

inline constexpr int kModelFormatVersion = 1;

namespace detail {

inline void append_numbers(std::string& out, const double* data, Index n) {
  out += '[';
  for (Index i = 0; i < n; ++i) {
    if (i) out += ',';
    out += format_double(data[i]);
  }
  out += ']';
}

inline Vector read_vector(const nlohmann::json& doc, const char* key, Index n) {
  return read_row_major(require(doc, key), n, 1, key).col(0);
}

}  // namespace detail

inline std::string serialize_model(const PsrModel& model) {
  const FeatureSpec& spec = model.spec();
  std::string out;
  out.reserve(static_cast<std::size_t>(model.dim() * model.dim() * model.alphabet_size() * 24));
  out += "{\n \"version\": " + std::to_string(kModelFormatVersion) + ",\n";
  out += " \"feature_spec\": {\"alphabet_size\": " + std::to_string(spec.alphabet_size) +
         ", \"future_length\": " + std::to_string(spec.future_length) +
         ", \"history_length\": " + std::to_string(spec.history_length) +
         ", \"history_bias\": " + (spec.history_bias ? "true" : "false") + "},\n";
  out += " \"d\": " + std::to_string(model.dim()) + ",\n";
  out += " \"alphabet_size\": " + std::to_string(model.alphabet_size()) + ",\n";
  out += " \"q1\": ";
  detail::append_numbers(out, model.q1().data(), model.dim());
  out += ",\n \"b_inf\": ";
  detail::append_numbers(out, model.b_inf().data(), model.dim());
  out += ",\n \"operators\": [";
  for (Symbol i = 0; i < model.alphabet_size(); ++i) {
    out += i ? ",\n  " : "\n  ";
    // row-major
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = model.op(i);
    detail::append_numbers(out, rm.data(), rm.size());
  }
  out += "\n ]\n}\n";
  return out;
}

inline PsrModel deserialize_model(const std::string& text) {
  const auto doc = detail::parse_json_text(text);
  detail::check_version(doc, kModelFormatVersion);
  const auto& fs = detail::require(doc, "feature_spec");
  FeatureSpec spec;
  try {
    spec.alphabet_size = detail::require(fs, "alphabet_size").get<int>();
    spec.future_length = detail::require(fs, "future_length").get<int>();
    spec.history_length = detail::require(fs, "history_length").get<int>();
    spec.history_bias = detail::require(fs, "history_bias").get<bool>();
    spec.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad feature_spec: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ParseError(std::string("bad feature_spec: ") + e.what());
  }
  const auto d = detail::require(doc, "d").get<Index>();
  const auto a = detail::require(doc, "alphabet_size").get<int>();
  if (d != spec.future_dim() || a != spec.alphabet_size)
    throw ParseError("'d' / 'alphabet_size' disagree with feature_spec");
  Vector q1 = detail::read_vector(doc, "q1", d);
  Vector b_inf = detail::read_vector(doc, "b_inf", d);
  const auto& ops = detail::require(doc, "operators");
  if (!ops.is_array() || static_cast<int>(ops.size()) != a)
    throw ParseError("field 'operators' must hold one matrix per symbol");
  std::vector<Matrix> operators;
  operators.reserve(static_cast<std::size_t>(a));
  for (const auto& m : ops) operators.push_back(detail::read_row_major(m, d, d, "operators"));
  try {
    return PsrModel::from_parts(spec, std::move(q1), std::move(b_inf), std::move(operators));
  } catch (const InvalidArgument& e) {
    throw ParseError(std::string("invalid model: ") + e.what());
  }
}

}  // namespace psr
