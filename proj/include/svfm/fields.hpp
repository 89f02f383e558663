#pragma once

#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "svfm/autodiff.hpp"
#include "svfm/nn.hpp"
#include "svfm/odesolve.hpp"
#include "svfm/rng.hpp"

namespace svfm::fields {

struct TimeEncoding {
  enum class Mode { Scalar, Cyclic };
  Mode mode = Mode::Scalar;
  /// l in (cos(t/l), sin(t/l)); 12/pi gives a 24 h period for t in hours.
  double period_scale = 12.0 / std::numbers::pi;
  /// Integration time -> encoding time, e.g. 1/3600 for seconds -> hours.
  double time_scale = 1.0;

  std::size_t width() const { return mode == Mode::Scalar ? 1 : 2; }
  nlohmann::json to_json() const;
  static TimeEncoding from_json(const nlohmann::json& j);
  bool operator==(const TimeEncoding&) const = default;
};

/// [t] or [cos(t/l), sin(t/l)] as a [1 x width] tensor.
Tensor encode_time(double t, const TimeEncoding& enc);

enum class Variant { VF, AVF, SVF, VFM, SVFM };
enum class Membership { PickAndStick, ForwardFilter };
enum class Selection { HardSample, GumbelSoftmax, Expectation, Conditioned };

std::string to_string(Variant v);
std::string to_string(Membership m);
std::string to_string(Selection s);
Variant parse_variant(const std::string& s);
Membership parse_membership(const std::string& s);
Selection parse_selection(const std::string& s);

struct FieldSpec {
  Variant variant = Variant::VF;
  std::size_t data_dim = 2;
  std::size_t augment_dims = 0;  // required for A-VF, optional for stochastic and mixture variants
  std::size_t components = 1;    // K, mixtures only
  Membership membership = Membership::PickAndStick;
  std::size_t hidden_layers = 1;
  std::size_t hidden_units = 32;
  TimeEncoding time;
  /// Initial direction variance of stochastic heads.
  double tau_init = 1e-2;
  /// Initial log-length variance.
  double tau_length_init = 1e-2;
  /// Cap on the sampled log-length. exp of a ReLU net's linear extrapolation
  /// blows up in finite time once a path leaves the data.
  double max_log_length = 4.0;

  std::size_t state_dim() const { return data_dim + augment_dims; }
  std::size_t K() const { return mixture() ? components : 1; }
  bool stochastic_heads() const { return variant == Variant::SVF || variant == Variant::SVFM; }
  bool mixture() const { return variant == Variant::VFM || variant == Variant::SVFM; }
  std::size_t input_dim() const { return state_dim() + time.width(); }

  nn::MlpConfig component_mlp() const;
  nn::MlpConfig membership_mlp() const;
  nn::MlpConfig transition_mlp() const;
  nn::MlpConfig emission_mlp() const;

  void validate() const;
  nlohmann::json to_json() const;
  static FieldSpec from_json(const nlohmann::json& j);
  bool operator==(const FieldSpec&) const = default;
};

std::string component_prefix(std::size_t k);

void init_params(const FieldSpec& spec, std::uint64_t seed, ad::ParameterStore& store);

/// Appends p zero columns.
Tensor augment(const Tensor& x, std::size_t p);
/// Keeps the first d columns.
ad::Var project(const ad::Var& x, std::size_t d);

/// Split stochastic-head output [R x 2S+2] = mu_u | tau_u (raw) | log mu_v | tau_v (raw).
struct SvfParams {
  ad::Var mu_u;      // [R x S]
  ad::Var tau_u;     // [R x S], > 0
  ad::Var log_mu_v;  // [R x 1]
  ad::Var tau_v;     // [R x 1], > 0
};
SvfParams split_svf_output(const ad::Var& raw, std::size_t state_dim);

struct SvfStats {
  long samples = 0;
  long reversed = 0;  // sampled direction opposes the mean direction
};

/// exp(log v) * u with u = normalize(normalize(mu_u) + sqrt(tau_u) * eps_u) and
/// log v = log mu_v + sqrt(tau_v) * eps_v. Noise comes from `rng` row by row
/// (S direction draws then one length draw), scaled by `noise_scale`; 0 draws
/// nothing. A degenerate direction is redrawn once, then NumericalError.
/// log v is clipped at max_log_length (no gradient above it).
ad::Var svf_sample(const SvfParams& p, Rng& rng, double noise_scale, SvfStats* stats = nullptr,
                   double max_log_length = std::numeric_limits<double>::infinity());

/// posterior ∝ Psi^T (psi ⊙ prior) per row. prior, emission: [R x K];
/// transition: [R*K x K] with row-stochastic K x K blocks per batch row.
/// Rows whose unnormalized mass falls below 1e-300 reset to uniform and are
/// counted in `resets`.
ad::Var forward_filter_step(const ad::Var& prior, const ad::Var& transition, const ad::Var& emission,
                            std::size_t* resets = nullptr);

struct BindOptions {
  Selection selection = Selection::Expectation;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  /// Per-row offsets added to the scaled time before encoding (e.g. time of day).
  std::vector<double> time_offsets;
  /// Scales the stochastic-head noise; 0 evaluates the mean field.
  double noise_scale = 1.0;
  /// Hard sampling: draw each row's component once per solve and keep it.
  bool freeze_component = false;
  bool log_components = false;
};

/// A field model bound to parameters and an initial condition: the right-hand
/// side plus per-solve state (belief, generator, diagnostics).
class ModelField : public ode::OdeFunction {
 public:
  /// state0: [R x state_dim]. With Selection::Conditioned, R must be a multiple
  /// of K and block k (rows [k R/K, (k+1) R/K)) follows component k.
  ModelField(const FieldSpec& spec, ad::ParamBinder& params, BindOptions options, const ad::Var& state0, double t0);

  ad::Var operator()(const ad::Var& state, double t) override;
  void begin_step(const ad::Var& state, double t) override;
  bool stochastic() const override;

  /// Advances the belief to (state, t) if t is later than the last update;
  /// call after a solve to obtain the belief at the final time.
  void update_belief(const ad::Var& state, double t);
  const ad::Var& belief() const { return belief_; }
  /// Belief at a time where it was updated (t0 or a step start).
  const ad::Var& belief_at(double t) const;
  /// Weight of each row's assigned component, [R x 1] (Conditioned or frozen hard selection).
  ad::Var assigned_weight(double t) const;
  /// Component per row for Conditioned or frozen hard selection.
  const std::vector<std::size_t>& assignment() const { return assignment_; }

  Rng& rng() { return rng_; }
  const SvfStats& svf_stats() const { return stats_; }
  std::size_t belief_resets() const { return resets_; }
  const std::vector<std::vector<std::size_t>>& component_log() const { return component_log_; }

 private:
  ad::Var time_input(double t, std::size_t rows) const;
  ad::Var component_field(std::size_t k, const ad::Var& input);
  ad::Var grouped_field(const ad::Var& input, const std::vector<std::size_t>& assign);
  ad::Var emission_transition_update(const ad::Var& state, double t);

  FieldSpec spec_;
  ad::ParamBinder& params_;
  BindOptions opt_;
  std::size_t rows_;
  Rng rng_;
  ad::Var belief_;
  std::vector<std::pair<double, ad::Var>> belief_history_;
  std::vector<std::size_t> assignment_;
  bool frozen_ = false;
  SvfStats stats_;
  std::size_t resets_ = 0;
  std::vector<std::vector<std::size_t>> component_log_;
};

}  // namespace svfm::fields
