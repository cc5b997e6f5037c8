#pragma once

// Indicator features over future and history strings.
//
// Coordinate layout for strings of length 1..L over an alphabet of size A:
// lengths in ascending order, and within one length lexicographic with the
// leftmost symbol most significant. The string s_0..s_{l-1} therefore sits at
//     (A + A^2 + ... + A^{l-1}) + sum_j s_j * A^{l-1-j}.
// History features prepend an optional constant bias coordinate at index 0.
//
// Positions t are 0-based throughout: future_features(seq, t) covers
// seq[t..t+k-1], history_features(seq, t) looks at seq[t-l..t-1].

#include "psr/common.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace psr {

struct FeatureSpec {
  int alphabet_size = 1;
  int future_length = 2;
  int history_length = 2;
  bool history_bias = true;

  void validate() const {
    if (alphabet_size < 1) throw InvalidArgument("alphabet_size must be >= 1");
    if (future_length < 1) throw InvalidArgument("future_length must be >= 1");
    if (history_length < 0) throw InvalidArgument("history_length must be >= 0");
    if (history_length == 0 && !history_bias)
      throw InvalidArgument("history features are empty (no bias, history_length 0)");
  }

  Index future_dim() const { return strings_up_to(future_length); }
  Index history_dim() const { return (history_bias ? 1 : 0) + strings_up_to(history_length); }

  /// Number of strings of length 1..max_len.
  Index strings_up_to(int max_len) const {
    Index total = 0, block = 1;
    for (int l = 1; l <= max_len; ++l) {
      block *= alphabet_size;
      total += block;
    }
    return total;
  }

  friend bool operator==(const FeatureSpec&, const FeatureSpec&) = default;
};

/// Index of a string among all strings of length 1..|s| (see layout above).
inline Index string_index(int alphabet_size, std::span<const Symbol> s) {
  Index offset = 0, block = 1, value = 0;
  for (std::size_t l = 1; l < s.size(); ++l) {
    block *= alphabet_size;
    offset += block;
  }
  for (Symbol c : s) value = value * alphabet_size + c;
  return offset + value;
}

/// Inverse of string_index.
inline ObservationSequence string_at(int alphabet_size, Index index) {
  if (index < 0) throw InvalidArgument("negative string index");
  Index block = alphabet_size;
  std::size_t length = 1;
  while (index >= block) {
    index -= block;
    block *= alphabet_size;
    ++length;
  }
  ObservationSequence s(length);
  for (std::size_t j = length; j-- > 0;) {
    s[j] = static_cast<Symbol>(index % alphabet_size);
    index /= alphabet_size;
  }
  return s;
}

/// Sparse 0/1 vector: the dimension plus its active coordinates.
class IndicatorVector {
 public:
  IndicatorVector() = default;
  IndicatorVector(Index dim, std::vector<Index> ones) : dim_(dim), ones_(std::move(ones)) {}

  Index dim() const { return dim_; }
  const std::vector<Index>& ones() const { return ones_; }
  std::size_t count() const { return ones_.size(); }

  Vector dense() const {
    Vector v = Vector::Zero(dim_);
    for (Index i : ones_) v[i] = 1.0;
    return v;
  }

  friend bool operator==(const IndicatorVector&, const IndicatorVector&) = default;

 private:
  Index dim_ = 0;
  std::vector<Index> ones_;
};

inline IndicatorVector future_features(std::span<const Symbol> seq, std::size_t t,
                                       const FeatureSpec& spec) {
  const auto k = static_cast<std::size_t>(spec.future_length);
  if (t + k > seq.size())
    throw WindowError("future window [" + std::to_string(t) + ", " + std::to_string(t + k) +
                      ") exceeds sequence length " + std::to_string(seq.size()));
  std::vector<Index> ones;
  ones.reserve(k);
  for (std::size_t l = 1; l <= k; ++l)
    ones.push_back(string_index(spec.alphabet_size, seq.subspan(t, l)));
  return {spec.future_dim(), std::move(ones)};
}

inline IndicatorVector history_features(std::span<const Symbol> seq, std::size_t t,
                                        const FeatureSpec& spec) {
  if (t > seq.size()) throw WindowError("history position past end of sequence");
  std::vector<Index> ones;
  const Index bias = spec.history_bias ? 1 : 0;
  if (spec.history_bias) ones.push_back(0);
  for (std::size_t l = 1; l <= static_cast<std::size_t>(spec.history_length) && l <= t; ++l)
    ones.push_back(bias + string_index(spec.alphabet_size, seq.subspan(t - l, l)));
  return {spec.history_dim(), std::move(ones)};
}

/// One regression example (h_t, o_t, psi_t, psi_{t+1}).
struct TrainingTriple {
  IndicatorVector history;
  Symbol observation = 0;
  IndicatorVector future_now;
  IndicatorVector future_next;
};

/// Number of positions in a sequence of this length whose psi_t and psi_{t+1} are complete.
inline std::size_t usable_positions(std::size_t length, const FeatureSpec& spec) {
  const auto k = static_cast<std::size_t>(spec.future_length);
  return length > k ? length - k : 0;
}

inline std::vector<TrainingTriple> make_training_triples(std::span<const ObservationSequence> seqs,
                                                         const FeatureSpec& spec) {
  spec.validate();
  std::vector<TrainingTriple> triples;
  std::size_t total = 0;
  for (const auto& s : seqs) total += usable_positions(s.size(), spec);
  if (total == 0) throw EmptyData("no sequence is long enough to form a training triple");
  triples.reserve(total);
  for (const auto& s : seqs) {
    check_alphabet(s, spec.alphabet_size);
    const std::size_t n = usable_positions(s.size(), spec);
    for (std::size_t t = 0; t < n; ++t)
      triples.push_back({history_features(s, t, spec), s[t], future_features(s, t, spec),
                         future_features(s, t + 1, spec)});
  }
  return triples;
}

}  // namespace psr
