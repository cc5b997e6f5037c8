#pragma once

// Two-stage regression: moment accumulation, regularized pseudoinverse and the
// closed-form estimates
//   q1      = mean of psi_t
//   B_i     = (sum 1(o_t = i) psi_{t+1} h_t^T) pinv(sum psi_t h_t^T)
//   b_inf^T = (sum h_t^T) pinv(sum psi_t h_t^T)

#include "psr/common.hpp"
#include "psr/features.hpp"
#include "psr/hmm.hpp"
#include "psr/psr_model.hpp"

#include <optional>

namespace psr {

struct MomentAccumulators {
  FeatureSpec spec;
  Vector sum_psi;                // sum psi_t
  Matrix cross;                  // sum psi_t h_t^T
  std::vector<Matrix> cross_obs;  // per symbol: sum 1(o_t = i) psi_{t+1} h_t^T
  Vector sum_h;                  // sum h_t
  double count = 0.0;            // T (a probability mass for exact moments)

  static MomentAccumulators zeros(const FeatureSpec& spec) {
    spec.validate();
    MomentAccumulators acc;
    acc.spec = spec;
    const Index d = spec.future_dim(), dh = spec.history_dim();
    acc.sum_psi = Vector::Zero(d);
    acc.cross = Matrix::Zero(d, dh);
    acc.cross_obs.assign(static_cast<std::size_t>(spec.alphabet_size), Matrix::Zero(d, dh));
    acc.sum_h = Vector::Zero(dh);
    return acc;
  }

  void add(const TrainingTriple& triple, double weight = 1.0) {
    for (Index f : triple.future_now.ones()) {
      sum_psi[f] += weight;
      for (Index h : triple.history.ones()) cross(f, h) += weight;
    }
    Matrix& obs = cross_obs[static_cast<std::size_t>(triple.observation)];
    for (Index f : triple.future_next.ones())
      for (Index h : triple.history.ones()) obs(f, h) += weight;
    for (Index h : triple.history.ones()) sum_h[h] += weight;
    count += weight;
  }

  MomentAccumulators& operator+=(const MomentAccumulators& other) {
    if (!(spec == other.spec)) throw InvalidArgument("cannot merge moments of different specs");
    sum_psi += other.sum_psi;
    cross += other.cross;
    for (std::size_t i = 0; i < cross_obs.size(); ++i) cross_obs[i] += other.cross_obs[i];
    sum_h += other.sum_h;
    count += other.count;
    return *this;
  }
};

inline MomentAccumulators accumulate(std::span<const TrainingTriple> triples,
                                     const FeatureSpec& spec) {
  if (triples.empty()) throw EmptyData("accumulate: no training triples");
  auto acc = MomentAccumulators::zeros(spec);
  for (const auto& t : triples) {
    if (t.observation < 0 || t.observation >= spec.alphabet_size)
      throw InvalidArgument("triple observation outside alphabet");
    acc.add(t);
  }
  return acc;
}

/// Pseudoinverse of M. lambda = 0: singular values below rel_tol * sigma_max are
/// dropped. lambda > 0: ridge form M^T (M M^T + lambda I)^{-1}, computed through
/// the SVD as sigma / (sigma^2 + lambda). `rank` keeps only the leading triplets.
inline Matrix pinv_ridge(const Matrix& m, double lambda, double rel_tol = 1e-10,
                         std::optional<Index> rank = std::nullopt) {
  if (lambda < 0.0) throw InvalidArgument("pinv_ridge: lambda must be >= 0");
  if (!m.allFinite()) throw InvalidArgument("pinv_ridge: matrix must be finite");
  if (m.size() == 0 || m.isZero(0.0)) return Matrix::Zero(m.cols(), m.rows());
  Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sigma = svd.singularValues();
  const double cutoff = rel_tol * sigma[0];
  Index keep = sigma.size();
  if (rank) keep = std::min(keep, *rank);
  Vector inv = Vector::Zero(sigma.size());
  for (Index i = 0; i < keep; ++i) {
    if (lambda > 0.0)
      inv[i] = sigma[i] / (sigma[i] * sigma[i] + lambda);
    else if (sigma[i] > cutoff)
      inv[i] = 1.0 / sigma[i];
  }
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

struct TwoStageOptions {
  /// Ridge strength relative to trace(M M^T) where M = sum psi_t h_t^T; 0 selects
  /// the truncated pseudoinverse.
  double ridge = 1e-6;
  std::optional<Index> rank;
  double rel_tol = 1e-10;
};

inline PsrModel two_stage_regression(const MomentAccumulators& acc,
                                     const TwoStageOptions& options = {}) {
  const FeatureSpec& spec = acc.spec;
  if (!(acc.count > 0.0)) throw EmptyData("two_stage_regression: empty moments");
  if (options.rank && (*options.rank < 1 || *options.rank > std::min(acc.cross.rows(), acc.cross.cols())))
    throw InvalidArgument("rank must lie in [1, min(d, d_h)]");
  if (acc.cross.isZero(0.0)) throw DegenerateMoments("sum psi_t h_t^T is identically zero");
  const double lambda = options.ridge * acc.cross.squaredNorm();
  const Matrix pinv = pinv_ridge(acc.cross, lambda, options.rel_tol, options.rank);

  std::vector<Matrix> operators;
  operators.reserve(acc.cross_obs.size());
  for (const auto& c : acc.cross_obs) operators.push_back(c * pinv);
  Vector b_inf = (acc.sum_h.transpose() * pinv).transpose();
  Vector q1 = acc.sum_psi / acc.count;
  if (std::abs(b_inf.dot(q1)) < kDenominatorFloor)
    throw DegenerateMoments("learned normalizer annihilates q1");
  return PsrModel::create(spec, std::move(q1), std::move(b_inf), std::move(operators));
}

inline PsrModel two_stage_regression(std::span<const TrainingTriple> triples,
                                     const FeatureSpec& spec,
                                     const TwoStageOptions& options = {}) {
  return two_stage_regression(accumulate(triples, spec), options);
}

/// Population moments: the expectation of the accumulators over positions
/// t = 1..cap of the HMM's process, computed by enumerating every observation
/// window that the features at t can see. Intended for small test systems.
inline MomentAccumulators exact_moments(const HmmModel& hmm, const FeatureSpec& spec,
                                        int history_length_cap,
                                        double max_enumeration = 5e6) {
  if (spec.alphabet_size != hmm.num_obs()) throw InvalidArgument("alphabet mismatch");
  if (history_length_cap < 1) throw InvalidArgument("cap must be >= 1");
  const int a = spec.alphabet_size, k = spec.future_length;
  const int max_window = spec.history_length + k + 1;
  if (std::pow(static_cast<double>(a), max_window) * history_length_cap > max_enumeration)
    throw ResourceError("exact_moments: enumeration exceeds " + format_double(max_enumeration) +
                        " windows");

  auto acc = MomentAccumulators::zeros(spec);
  Vector marginal = hmm.initial;  // P(s_start)
  std::vector<Vector> marginals;
  for (int t = 0; t < history_length_cap; ++t) {
    marginals.push_back(marginal);
    marginal = hmm.transition * marginal;
  }
  for (int t = 0; t < history_length_cap; ++t) {
    const int past = std::min(t, spec.history_length);
    const int start = t - past;
    const int width = past + k + 1;  // h_t window, o_t, and psi_{t+1}
    ObservationSequence window(static_cast<std::size_t>(width), 0);
    Index combos = 1;
    for (int j = 0; j < width; ++j) combos *= a;
    for (Index code = 0; code < combos; ++code) {
      Index c = code;
      for (int j = width - 1; j >= 0; --j) {
        window[static_cast<std::size_t>(j)] = static_cast<Symbol>(c % a);
        c /= a;
      }
      const double p = string_probability(hmm, marginals[static_cast<std::size_t>(start)], window);
      if (p == 0.0) continue;
      const auto pos = static_cast<std::size_t>(past);
      acc.add({history_features(window, pos, spec), window[pos], future_features(window, pos, spec),
               future_features(window, pos + 1, spec)},
              p);
    }
  }
  return acc;
}

}  // namespace psr
