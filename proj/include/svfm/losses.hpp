#pragma once

#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "svfm/autodiff.hpp"
#include "svfm/odesolve.hpp"

namespace svfm::losses {

/// Per-row diagonal Gaussian mixture: weights [R x K], means/variances K x [R x D].
struct GaussianMixture {
  ad::Var weights;
  std::vector<ad::Var> means;
  std::vector<ad::Var> variances;
};

/// -log sum_k pi_k N(target | mu_k, diag tau_k) per row, [R x 1]. DomainError on tau <= 0.
ad::Var mdl_rows(const GaussianMixture& mixture, const Tensor& target);
/// Mean of mdl_rows.
ad::Var mdl(const GaussianMixture& mixture, const Tensor& target);

/// Mixture from reparameterized samples laid out as rows (k * M + m) * R + i
/// (component k, sample m, instance i): per (k, i) the sample mean and the
/// unbiased sample variance plus `variance_floor`.
GaussianMixture moment_match(const ad::Var& samples, const ad::Var& weights, std::size_t samples_per_component,
                             double variance_floor);

/// (1/T) sum_i ||h(t_i) - h(t_{i-1})||^2, averaged over rows. Needs >= 2 checkpoints.
ad::Var transport_loss(std::span<const ad::Var> checkpoints);
/// (1/T) sum_i ||g_i - mean g||^2, averaged over rows. Needs >= 1 evaluation.
ad::Var directional_variance_loss(std::span<const ad::Var> gradients);

struct TrajectorySample {
  std::vector<double> t;  // strictly increasing, size >= 2
  Tensor X;               // [T' x D]

  /// Throws ConfigError on a broken invariant.
  void validate() const;
};

/// Natural cubic spline through (t_i, X_i), one per column.
class CubicSpline {
 public:
  CubicSpline(std::vector<double> t, Tensor X);
  /// [1 x D]; DomainError outside [t_0, t_last].
  Tensor operator()(double t) const;
  double t_min() const { return t_.front(); }
  double t_max() const { return t_.back(); }

 private:
  std::vector<double> t_;
  Tensor x_;
  Tensor m_;  // second derivatives, [T' x D]
};

Tensor cubic_interp(const TrajectorySample& sample, double t);

/// ||h - target||^2 per row, [R x 1].
ad::Var squared_error_rows(const ad::Var& h, const Tensor& target);

/// (1/T) sum_{i=1..T} ||h(t_i) - interp(X, t_X, t_i)||^2 over the record's
/// checkpoints after the first; every row is compared with the one sample.
ad::Var forecast_loss(const ode::SolveRecord& record, const TrajectorySample& sample);
/// Same with explicit per-checkpoint predictions [R x D] and targets [R x D].
ad::Var forecast_loss(std::span<const ad::Var> predictions, std::span<const Tensor> targets);
/// MDL as the inner loss: (1/T) sum_i mdl(mixture_i, target_i).
ad::Var forecast_loss_mdl(std::span<const GaussianMixture> predictions, std::span<const Tensor> targets);

/// Mean of -log softmax(logits)[label].
ad::Var cross_entropy(const ad::Var& logits, std::span<const std::size_t> labels);
/// Mean of -log sum_k w_k p_k[label]; weights [R x K], probs K x [R x C].
ad::Var mixture_cross_entropy(const ad::Var& weights, std::span<const ad::Var> probs,
                              std::span<const std::size_t> labels);

enum class Term { MDL, TL, DV, FL, CE };
enum class InnerLoss { SquaredError, MDL };

std::string to_string(Term t);
Term parse_term(const std::string& s);

struct LossConfig {
  std::set<Term> terms{Term::CE};
  double lambda = 0.0;
  InnerLoss inner = InnerLoss::SquaredError;

  bool has(Term t) const { return terms.count(t) != 0; }
  /// ConfigError on FL with TL or DV, negative lambda, or no terms.
  void validate() const;
  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
  bool operator==(const LossConfig&) const = default;
};

struct LossParts {
  std::optional<ad::Var> mdl, tl, dv, fl, ce;
};

/// predictive (MDL/CE/FL present) + lambda (TL + DV). ConfigError when a
/// configured term has no part.
ad::Var combined_loss(const LossConfig& config, const LossParts& parts);

}  // namespace svfm::losses
