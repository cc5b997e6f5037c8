#pragma once

// Gradient refinement of PSR operators through the normalized filter update.
//
// For a window o_t..o_{t+h-1} let P = B_{o_{t+h-1}} ... B_{o_t}, C the same
// product without its first factor B_{o_t} (C = I for h = 1), s = b_inf . P q_t
// and y = P q_t / s. The h-step loss 1/2 ||psi_{t+h} - y||^2 has gradient
//     dL/dB_{o_t} = C^T ((b_inf y^T - I) / s) (psi_{t+h} - y) q_t^T
// with respect to the operator at position t only. It is always an outer
// product, so refinement keeps it factored as left * right^T.

#include "psr/common.hpp"
#include "psr/features.hpp"
#include "psr/metrics.hpp"
#include "psr/psr_model.hpp"
#include "psr/two_stage.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <numeric>
#include <optional>

namespace psr {

enum class GradNorm { l1_unit, none };
enum class InitMode { two_stage, random };

struct RefineConfig {
  double learning_rate = 1e-3;
  int iterations = 50;
  int horizon = 1;
  GradNorm grad_norm = GradNorm::l1_unit;
  InitMode init = InitMode::two_stage;
  std::uint64_t seed = 0;
  bool multi_step_average = true;
  double divergence_limit = 1e12;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw InvalidArgument("learning_rate must be finite and >= 0");
    if (iterations < 0) throw InvalidArgument("iterations must be >= 0");
    if (horizon < 1) throw InvalidArgument("horizon must be >= 1");
  }
};

struct IterationLog {
  int iteration = 0;  // 0 = before any update
  std::optional<MetricsReport> train;
  std::optional<MetricsReport> test;
  std::size_t clamp_events = 0;
  double wall_seconds = 0.0;
};

struct RefineResult {
  PsrModel model;
  std::vector<IterationLog> logs;
};

/// Sequences to score after every pass; either span may be empty.
struct EvaluationSets {
  std::span<const ObservationSequence> train;
  std::span<const ObservationSequence> test;
};

struct RankOneGradient {
  Vector left;
  Vector right;
  double denominator = 0.0;
  bool clamped = false;

  Matrix dense() const { return left * right.transpose(); }
  double l1_norm() const { return left.lpNorm<1>() * right.lpNorm<1>(); }
};

namespace detail {

/// ((b y^T - I) / s) (psi - y), for y = raw / s.
inline Vector backprop_residual(const Vector& b_inf, const Vector& raw, double s, const Vector& psi) {
  const Vector y = raw / s;
  const Vector r = psi - y;
  return (b_inf * y.dot(r) - r) / s;
}

struct HorizonGradient {
  Vector left;        // sum over h of C_h^T w_h (averaged on request)
  Vector next_state;  // B_{o_t} q / s_1, from the operators before the update
  std::size_t clamp_events = 0;
};

/// Accumulates the h-step gradients for h = 1..window.size() with one forward
/// chain and a Horner-style backward sweep.
inline HorizonGradient horizon_gradient(const PsrModel& model, const Vector& q,
                                        std::span<const Symbol> window,
                                        std::span<const IndicatorVector> targets, bool average) {
  const std::size_t horizon = window.size();
  std::vector<Vector> w(horizon);
  HorizonGradient out;
  Vector raw = model.op(window[0]) * q;
  for (std::size_t h = 0; h < horizon; ++h) {
    if (h > 0) raw = model.op(window[h]) * raw;
    bool clamped = false;
    const double s = clamp_denominator(model.b_inf().dot(raw), clamped);
    out.clamp_events += clamped ? 1 : 0;
    if (h == 0) out.next_state = raw / s;
    w[h] = backprop_residual(model.b_inf(), raw, s, targets[h].dense());
  }
  Vector acc = std::move(w[horizon - 1]);
  for (std::size_t h = horizon - 1; h-- > 0;) acc = w[h] + model.op(window[h + 1]).transpose() * acc;
  if (average && horizon > 1) acc /= static_cast<double>(horizon);
  out.left = std::move(acc);
  return out;
}

}  // namespace detail

/// Gradient of the h-step loss, h = window.size(), w.r.t. the operator of window[0].
inline RankOneGradient multi_step_gradient_factors(const PsrModel& model, const Vector& q_hat,
                                                   std::span<const Symbol> window,
                                                   const Vector& psi_target) {
  if (window.empty()) throw InvalidArgument("multi_step_gradient: empty window");
  check_alphabet(window, model.alphabet_size());
  Vector raw = model.op(window[0]) * q_hat;
  for (std::size_t h = 1; h < window.size(); ++h) raw = model.op(window[h]) * raw;
  RankOneGradient g;
  g.denominator = model.b_inf().dot(raw);
  const double s = clamp_denominator(g.denominator, g.clamped);
  Vector left = detail::backprop_residual(model.b_inf(), raw, s, psi_target);
  for (std::size_t h = window.size(); h-- > 1;) left = model.op(window[h]).transpose() * left;
  g.left = std::move(left);
  g.right = q_hat;
  return g;
}

inline Matrix multi_step_gradient(const PsrModel& model, const Vector& q_hat,
                                  std::span<const Symbol> window, const Vector& psi_target) {
  return multi_step_gradient_factors(model, q_hat, window, psi_target).dense();
}

inline RankOneGradient one_step_gradient_factors(const PsrModel& model, const Vector& q_hat,
                                                 Symbol o, const Vector& psi_next) {
  const Symbol window[1] = {o};
  return multi_step_gradient_factors(model, q_hat, window, psi_next);
}

inline Matrix one_step_gradient(const PsrModel& model, const Vector& q_hat, Symbol o,
                                const Vector& psi_next) {
  return one_step_gradient_factors(model, q_hat, o, psi_next).dense();
}

/// G / sum|G_ij|; the zero matrix is returned unchanged.
inline Matrix normalize_gradient_l1(const Matrix& g) {
  const double norm = g.lpNorm<1>();
  return norm > 0.0 ? Matrix(g / norm) : g;
}

/// Central differences (L(B + step E_ij) - L(B - step E_ij)) / (2 step).
inline Matrix finite_difference_gradient(const std::function<double(const Matrix&)>& loss,
                                         const Matrix& b, double step) {
  if (!(step > 0.0)) throw InvalidArgument("finite_difference_gradient: step must be > 0");
  Matrix grad(b.rows(), b.cols());
  Matrix probe = b;
  for (Index j = 0; j < b.cols(); ++j)
    for (Index i = 0; i < b.rows(); ++i) {
      probe(i, j) = b(i, j) + step;
      const double up = loss(probe);
      probe(i, j) = b(i, j) - step;
      const double down = loss(probe);
      probe(i, j) = b(i, j);
      grad(i, j) = (up - down) / (2.0 * step);
    }
  return grad;
}

namespace detail {

inline IterationLog evaluate_iteration(int iteration, const PsrModel& model, const FeatureSpec& spec,
                                       const EvaluationSets& eval) {
  IterationLog log;
  log.iteration = iteration;
  if (!eval.train.empty()) log.train = evaluate(model, eval.train, spec);
  if (!eval.test.empty()) log.test = evaluate(model, eval.test, spec);
  return log;
}

inline void check_divergence(const PsrModel& model, double limit) {
  for (const auto& b : model.operators())
    if (!b.allFinite() || b.cwiseAbs().maxCoeff() > limit)
      throw DivergenceError("operator entries left [-" + format_double(limit) + ", " +
                            format_double(limit) + "]");
}

inline RefineResult refine_passes(PsrModel model, std::span<const ObservationSequence> seqs,
                                  const FeatureSpec& spec, const RefineConfig& config,
                                  const EvaluationSets& eval) {
  config.validate();
  if (!(spec == model.spec())) throw InvalidArgument("feature spec does not match the model");
  for (const auto& s : seqs) check_alphabet(s, model.alphabet_size());

  RefineResult result{std::move(model), {}};
  PsrModel& m = result.model;
  result.logs.push_back(evaluate_iteration(0, m, spec, eval));

  Rng order_rng(config.seed ^ 0x5bd1e995ULL);
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<IndicatorVector> targets;

  for (int pass = 1; pass <= config.iterations; ++pass) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), order_rng);
    std::size_t clamps = 0;
    for (std::size_t j : order) {
      const std::span<const Symbol> seq(seqs[j]);
      const std::size_t n = usable_positions(seq.size(), spec);
      Vector q = m.q1();
      for (std::size_t t = 0; t < n; ++t) {
        const std::size_t h = std::min<std::size_t>(static_cast<std::size_t>(config.horizon), n - t);
        targets.clear();
        for (std::size_t i = 1; i <= h; ++i) targets.push_back(future_features(seq, t + i, spec));
        HorizonGradient g =
            horizon_gradient(m, q, seq.subspan(t, h), targets, config.multi_step_average);
        clamps += g.clamp_events;
        double scale = config.learning_rate;
        if (config.grad_norm == GradNorm::l1_unit) {
          const double norm = g.left.lpNorm<1>() * q.lpNorm<1>();
          scale = norm > 0.0 ? scale / norm : 0.0;
        }
        if (scale != 0.0) m.mutable_op(seq[t]).noalias() -= (scale * g.left) * q.transpose();
        q = std::move(g.next_state);
      }
    }
    check_divergence(m, config.divergence_limit);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    IterationLog log = evaluate_iteration(pass, m, spec, eval);
    log.clamp_events = clamps;
    log.wall_seconds = seconds;
    result.logs.push_back(std::move(log));
  }
  return result;
}

}  // namespace detail

/// One-step Inference Gradients: filter, then step B_{o_t} against the
/// one-step gradient, carrying the pre-update q_{t+1} forward. q1 and b_inf
/// are never changed.
inline RefineResult refine_one_step(PsrModel model, std::span<const ObservationSequence> seqs,
                                    const FeatureSpec& spec, const RefineConfig& config,
                                    const EvaluationSets& eval = {}) {
  if (config.horizon != 1) throw InvalidArgument("refine_one_step requires horizon 1");
  return detail::refine_passes(std::move(model), seqs, spec, config, eval);
}

/// Multi-step Inference Gradients: at each position the 1..H' step gradients
/// (H' truncated at the last complete psi window) are summed, optionally
/// averaged, and applied to B_{o_t}.
inline RefineResult refine_multi_step(PsrModel model, std::span<const ObservationSequence> seqs,
                                      const FeatureSpec& spec, const RefineConfig& config,
                                      const EvaluationSets& eval = {}) {
  return detail::refine_passes(std::move(model), seqs, spec, config, eval);
}

/// Operators i.i.d. Uniform[0,1] / (A d); q1 and b_inf estimated from data.
inline PsrModel random_init(const FeatureSpec& spec, std::span<const ObservationSequence> seqs,
                            std::uint64_t seed, const TwoStageOptions& options = {}) {
  const auto triples = make_training_triples(seqs, spec);
  const MomentAccumulators acc = accumulate(triples, spec);
  const Index d = spec.future_dim();
  Rng rng(seed);
  const double scale = 1.0 / (static_cast<double>(spec.alphabet_size) * static_cast<double>(d));
  std::vector<Matrix> operators;
  operators.reserve(static_cast<std::size_t>(spec.alphabet_size));
  for (int i = 0; i < spec.alphabet_size; ++i)
    operators.push_back(Matrix::NullaryExpr(d, d, [&](Index, Index) { return scale * uniform01(rng); }));
  const double lambda = options.ridge * acc.cross.squaredNorm();
  const Matrix pinv = pinv_ridge(acc.cross, lambda, options.rel_tol, options.rank);
  Vector b_inf = (acc.sum_h.transpose() * pinv).transpose();
  return PsrModel::create(spec, acc.sum_psi / acc.count, std::move(b_inf), std::move(operators));
}

/// Random-initialized one-step refinement, standing in for PSIM with the PSR
/// update as its hypothesis class.
inline RefineResult psim_baseline(std::span<const ObservationSequence> seqs, const FeatureSpec& spec,
                                  const RefineConfig& config, const EvaluationSets& eval = {},
                                  const TwoStageOptions& options = {}) {
  if (config.init != InitMode::random) throw InvalidArgument("psim_baseline requires random init");
  return refine_one_step(random_init(spec, seqs, config.seed, options), seqs, spec, config, eval);
}

}  // namespace psr
