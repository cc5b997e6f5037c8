#pragma once

// Ground-truth hidden Markov models: ring-topology generation, ancestral
// sampling, and exact (enumeration / forward-algorithm) oracles.
//
// Conventions: transition(j, i) = P(s' = j | s = i) and emission(o, i) =
// P(o | s = i), so every column is a distribution.

#include "psr/common.hpp"
#include "psr/features.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

namespace psr {

struct HmmModel {
  Matrix transition;
  Matrix emission;
  Vector initial;

  Index num_states() const { return transition.rows(); }
  Index num_obs() const { return emission.rows(); }

  void validate(double tol = 1e-12) const {
    const Index n = transition.rows();
    if (n < 1 || transition.cols() != n) throw InvalidArgument("transition must be square, n >= 1");
    if (emission.rows() < 1 || emission.cols() != n)
      throw InvalidArgument("emission must be num_obs x num_states");
    if (initial.size() != n) throw InvalidArgument("initial must have num_states entries");
    auto check = [tol](const auto& m, const char* what) {
      if (!m.allFinite() || m.minCoeff() < 0.0 || m.maxCoeff() > 1.0)
        throw InvalidArgument(std::string(what) + " entries must lie in [0, 1]");
      for (Index c = 0; c < m.cols(); ++c)
        if (std::abs(m.col(c).sum() - 1.0) > tol)
          throw InvalidArgument(std::string(what) + " column does not sum to 1");
    };
    check(transition, "transition");
    check(emission, "emission");
    check(initial, "initial");
  }
};

namespace detail {

inline void normalize_columns(Matrix& m) {
  for (Index c = 0; c < m.cols(); ++c) {
    const double s = m.col(c).sum();
    if (s > 0.0) m.col(c) /= s;
  }
}

}  // namespace detail

/// Ring topology: state i moves only to i-1, i, i+1 (mod n); each state emits
/// exactly two distinct symbols (one when num_obs == 1).
inline HmmModel generate_ring_hmm(int num_states, int num_obs, std::uint64_t seed) {
  if (num_states < 1 || num_obs < 1)
    throw InvalidArgument("generate_ring_hmm: num_states and num_obs must be >= 1");
  Rng rng(seed);
  const Index n = num_states;
  HmmModel hmm;
  hmm.transition = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index delta : {Index{-1}, Index{0}, Index{1}}) {
      const Index j = ((i + delta) % n + n) % n;
      // n <= 2 maps several offsets onto one neighbour; draw each entry once
      if (hmm.transition(j, i) == 0.0) hmm.transition(j, i) = uniform01(rng);
    }
  }
  detail::normalize_columns(hmm.transition);

  hmm.emission = Matrix::Zero(num_obs, n);
  std::vector<int> symbols(num_obs);
  std::iota(symbols.begin(), symbols.end(), 0);
  const int per_state = std::min(num_obs, 2);
  for (Index i = 0; i < n; ++i) {
    // partial Fisher-Yates: first per_state entries become a uniform sample without replacement
    for (int m = 0; m < per_state; ++m) {
      std::uniform_int_distribution<int> pick(m, num_obs - 1);
      std::swap(symbols[m], symbols[pick(rng)]);
      hmm.emission(symbols[m], i) = uniform01(rng);
    }
  }
  detail::normalize_columns(hmm.emission);

  hmm.initial = Vector::NullaryExpr(n, [&rng](Index) { return uniform01(rng); });
  hmm.initial /= hmm.initial.sum();
  return hmm;
}

/// Every entry drawn Uniform[0,1] and normalized; used for generic test systems.
inline HmmModel generate_dense_hmm(int num_states, int num_obs, std::uint64_t seed) {
  if (num_states < 1 || num_obs < 1)
    throw InvalidArgument("generate_dense_hmm: num_states and num_obs must be >= 1");
  Rng rng(seed);
  auto draw = [&rng](Index r, Index c) {
    return Matrix(Matrix::NullaryExpr(r, c, [&rng](Index, Index) { return 0.05 + uniform01(rng); }));
  };
  HmmModel hmm;
  hmm.transition = draw(num_states, num_states);
  hmm.emission = draw(num_obs, num_states);
  Matrix init = draw(num_states, 1);
  detail::normalize_columns(hmm.transition);
  detail::normalize_columns(hmm.emission);
  detail::normalize_columns(init);
  hmm.initial = init.col(0);
  return hmm;
}

/// Stationary distribution of a column-stochastic transition matrix.
inline Vector stationary_distribution(const Matrix& transition) {
  const Index n = transition.rows();
  Matrix a = transition - Matrix::Identity(n, n);
  a.row(n - 1).setOnes();
  Vector rhs = Vector::Zero(n);
  rhs[n - 1] = 1.0;
  Vector pi = a.fullPivLu().solve(rhs);
  pi = pi.cwiseMax(0.0);
  return pi / pi.sum();
}

inline std::vector<ObservationSequence> sample_sequences(const HmmModel& hmm,
                                                         std::size_t num_sequences,
                                                         std::size_t length, std::uint64_t seed) {
  if (length < 1) throw InvalidArgument("sample_sequences: length must be >= 1");
  Rng rng(seed);
  std::vector<ObservationSequence> out(num_sequences, ObservationSequence(length));
  for (auto& seq : out) {
    Index state = draw_categorical(hmm.initial, rng);
    for (std::size_t t = 0; t < length; ++t) {
      if (t > 0) state = draw_categorical(hmm.transition.col(state), rng);
      seq[t] = static_cast<Symbol>(draw_categorical(hmm.emission.col(state), rng));
    }
  }
  return out;
}

/// P(s_t | o_1..o_{t-1}) by the normalized forward recursion.
inline Vector belief_after(const HmmModel& hmm, std::span<const Symbol> history) {
  check_alphabet(history, static_cast<int>(hmm.num_obs()));
  Vector belief = hmm.initial;
  for (Symbol o : history) {
    Vector joint = hmm.emission.row(o).transpose().cwiseProduct(belief);
    const double p = joint.sum();
    if (!(p > 0.0)) throw ZeroProbabilityHistory("history has probability zero under the HMM");
    belief = hmm.transition * (joint / p);
  }
  return belief;
}

/// P(o_t..o_{t+l-1} = s | belief over s_t).
inline double string_probability(const HmmModel& hmm, const Vector& belief,
                                 std::span<const Symbol> s) {
  Vector alpha = belief;
  for (std::size_t j = 0; j < s.size(); ++j) {
    if (j > 0) alpha = hmm.transition * alpha;
    alpha = hmm.emission.row(s[j]).transpose().cwiseProduct(alpha);
  }
  return alpha.sum();
}

/// E[psi_t | o_1..o_{t-1}], by enumerating every future string of length <= k.
inline Vector exact_future_expectation(const HmmModel& hmm, std::span<const Symbol> history,
                                       const FeatureSpec& spec) {
  if (spec.alphabet_size != hmm.num_obs())
    throw InvalidArgument("feature alphabet does not match the HMM");
  const Vector belief = belief_after(hmm, history);
  Vector q(spec.future_dim());
  for (Index idx = 0; idx < q.size(); ++idx) {
    const ObservationSequence s = string_at(spec.alphabet_size, idx);
    q[idx] = string_probability(hmm, belief, s);
  }
  return q;
}

/// log P(sequence); a probability-zero sequence is reported through `impossible`
/// with log_value = -infinity.
struct LogProbability {
  double log_value = 0.0;
  bool impossible = false;
};

inline LogProbability sequence_log_prob(const HmmModel& hmm, std::span<const Symbol> seq) {
  check_alphabet(seq, static_cast<int>(hmm.num_obs()));
  Vector alpha = hmm.initial;
  double log_p = 0.0;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    if (t > 0) alpha = hmm.transition * alpha;
    alpha = hmm.emission.row(seq[t]).transpose().cwiseProduct(alpha);
    const double scale = alpha.sum();
    if (!(scale > 0.0)) return {-std::numeric_limits<double>::infinity(), true};
    log_p += std::log(scale);
    alpha /= scale;
  }
  return {log_p, false};
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr int kHmmFormatVersion = 1;

namespace detail {

inline nlohmann::json matrix_row_major(const Matrix& m) {
  auto arr = nlohmann::json::array();
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) arr.push_back(m(r, c));
  return arr;
}

inline const nlohmann::json& require(const nlohmann::json& doc, const char* key) {
  if (!doc.is_object()) throw ParseError("expected a JSON object");
  auto it = doc.find(key);
  if (it == doc.end()) throw ParseError(std::string("missing field '") + key + "'");
  return *it;
}

inline Matrix read_row_major(const nlohmann::json& arr, Index rows, Index cols, const char* key) {
  if (!arr.is_array() || static_cast<Index>(arr.size()) != rows * cols)
    throw ParseError(std::string("field '") + key + "' must be an array of " +
                     std::to_string(rows * cols) + " numbers");
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) {
      const auto& v = arr[static_cast<std::size_t>(r * cols + c)];
      if (!v.is_number())
        throw ParseError(std::string("field '") + key + "' element " +
                         std::to_string(r * cols + c) + " is not a number");
      m(r, c) = v.get<double>();
    }
  return m;
}

inline nlohmann::json parse_json_text(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed JSON at byte ") + std::to_string(e.byte) + ": " +
                     e.what());
  }
}

inline void check_version(const nlohmann::json& doc, int expected) {
  const auto& v = require(doc, "version");
  if (!v.is_number_integer()) throw ParseError("field 'version' must be an integer");
  if (v.get<int>() != expected)
    throw UnsupportedVersion("unsupported version " + std::to_string(v.get<int>()) +
                             " (expected " + std::to_string(expected) + ")");
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot write '" + path + "'");
  out << content;
}

}  // namespace detail

inline std::string hmm_to_json(const HmmModel& hmm) {
  nlohmann::json doc;
  doc["version"] = kHmmFormatVersion;
  doc["num_states"] = hmm.num_states();
  doc["num_obs"] = hmm.num_obs();
  doc["transition"] = detail::matrix_row_major(hmm.transition);
  doc["emission"] = detail::matrix_row_major(hmm.emission);
  doc["initial"] = detail::matrix_row_major(hmm.initial);
  return doc.dump(1);
}

inline HmmModel hmm_from_json(const std::string& text) {
  const auto doc = detail::parse_json_text(text);
  detail::check_version(doc, kHmmFormatVersion);
  const auto n = detail::require(doc, "num_states").get<Index>();
  const auto m = detail::require(doc, "num_obs").get<Index>();
  if (n < 1 || m < 1) throw ParseError("num_states and num_obs must be positive");
  HmmModel hmm;
  hmm.transition = detail::read_row_major(detail::require(doc, "transition"), n, n, "transition");
  hmm.emission = detail::read_row_major(detail::require(doc, "emission"), m, n, "emission");
  hmm.initial = detail::read_row_major(detail::require(doc, "initial"), n, 1, "initial").col(0);
  try {
    hmm.validate(1e-9);
  } catch (const InvalidArgument& e) {
    throw ParseError(std::string("invalid HMM: ") + e.what());
  }
  return hmm;
}

/// One sequence per line, whitespace-separated base-10 symbols.
inline std::string sequences_to_text(std::span<const ObservationSequence> seqs) {
  std::string out;
  for (const auto& s : seqs) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(s[i]);
    }
    out += '\n';
  }
  return out;
}

inline std::vector<ObservationSequence> sequences_from_text(const std::string& text) {
  std::vector<ObservationSequence> seqs;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    ObservationSequence seq;
    std::string tok;
    while (fields >> tok) {
      std::size_t used = 0;
      long v = -1;
      try {
        v = std::stol(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || v < 0 || v > std::numeric_limits<Symbol>::max())
        throw ParseError("line " + std::to_string(line_no) + ": bad symbol '" + tok + "'");
      seq.push_back(static_cast<Symbol>(v));
    }
    if (!seq.empty()) seqs.push_back(std::move(seq));
  }
  return seqs;
}

inline int infer_alphabet_size(std::span<const ObservationSequence> seqs) {
  int max_symbol = -1;
  for (const auto& s : seqs)
    for (Symbol o : s) max_symbol = std::max(max_symbol, o);
  return max_symbol + 1;
}

}  // namespace psr
