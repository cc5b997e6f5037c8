#pragma once

// Shared vocabulary types, error hierarchy and small numeric helpers.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace psr {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

using Symbol = int;
/// Observations o_1..o_T, stored 0-based.
using ObservationSequence = std::vector<Symbol>;

using Rng = std::mt19937_64;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A feature window extends past the end of a sequence.
class WindowError : public Error {
 public:
  using Error::Error;
};

class ZeroProbabilityHistory : public Error {
 public:
  using Error::Error;
};

class EmptyData : public Error {
 public:
  using Error::Error;
};

class DegenerateMoments : public Error {
 public:
  using Error::Error;
};

/// An enumeration or allocation would exceed a configured size cap.
class ResourceError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class UnsupportedVersion : public ParseError {
 public:
  using ParseError::ParseError;
};

inline constexpr double kDenominatorFloor = 1e-12;
inline constexpr double kProbabilityFloor = 1e-300;

/// Replaces |s| < floor by a sign-preserving floor (zero maps to +floor).
inline double clamp_denominator(double s, bool& clamped, double floor = kDenominatorFloor) {
  clamped = !(std::abs(s) >= floor);
  if (!clamped) return s;
  return std::signbit(s) ? -floor : floor;
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

/// Draws an index with probability proportional to the (nonnegative) weights.
template <typename Weights>
inline Index draw_categorical(const Weights& weights, Rng& rng) {
  const double total = weights.sum();
  double u = uniform01(rng) * total;
  const Index n = weights.size();
  for (Index i = 0; i < n; ++i) {
    u -= weights[i];
    if (u < 0.0) return i;
  }
  // rounding fell off the end: take the last index with positive weight
  for (Index i = n - 1; i >= 0; --i)
    if (weights[i] > 0.0) return i;
  return n - 1;
}

/// 17-significant-digit decimal text, the exchange format for every number we write.
inline std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

inline double parse_double(const std::string& text) {
  if (text == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (text == "inf") return std::numeric_limits<double>::infinity();
  if (text == "-inf") return -std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    throw ParseError("not a number: '" + text + "'");
  }
  if (used != text.size()) throw ParseError("trailing characters in number: '" + text + "'");
  return v;
}

inline void check_alphabet(std::span<const Symbol> seq, int alphabet_size) {
  for (Symbol s : seq)
    if (s < 0 || s >= alphabet_size)
      throw InvalidArgument("symbol " + std::to_string(s) + " outside alphabet of size " +
                            std::to_string(alphabet_size));
}

}  // namespace psr
