#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "svfm/autodiff.hpp"
#include "svfm/rng.hpp"

namespace svfm::ode {

/// Right-hand side f(state, t) of dh/dt = f. States are [rows x D].
class OdeFunction {
 public:
  virtual ~OdeFunction() = default;
  virtual ad::Var operator()(const ad::Var& state, double t) = 0;
  /// Called before every attempted step (re-attempts after a rejection reuse
  /// the same t).
  virtual void begin_step(const ad::Var& state, double t) {
    (void)state;
    (void)t;
  }
  /// True when evaluations consume randomness; disables FSAL reuse across steps.
  virtual bool stochastic() const { return false; }
};

/// Adapts a plain callable.
class LambdaField : public OdeFunction {
 public:
  using Fn = std::function<ad::Var(const ad::Var&, double)>;
  explicit LambdaField(Fn fn) : fn_(std::move(fn)) {}
  ad::Var operator()(const ad::Var& state, double t) override { return fn_(state, t); }

 private:
  Fn fn_;
};

struct ButcherTableau {
  std::string name;
  std::vector<double> c;
  std::vector<std::vector<double>> a;  // a[i] has i entries
  std::vector<double> b;
  std::vector<double> b_star;  // empty when there is no embedded row
  bool fsal = false;

  std::size_t stages() const { return b.size(); }
  bool embedded() const { return !b_star.empty(); }
};

const ButcherTableau& rk4_tableau();
const ButcherTableau& dopri5_tableau();

struct StepController {
  double abs_tol = 1e-6;
  double rel_tol = 1e-6;
  double safety = 0.9;
  double min_scale = 0.2;
  double max_scale = 5.0;
  int error_order = 5;
  /// First attempted step as a fraction of the interval (clipped at the next
  /// checkpoint). 1.0 lets a perfectly aligned field finish in one step.
  double initial_step_fraction = 1.0;

  /// Throws ConfigError unless 0 < min_scale < 1 < max_scale and tolerances > 0.
  void validate() const;
};

struct StepOutcome {
  ad::Var state_next;
  Tensor error;  // h * sum (b_i - b*_i) k_i, empty for RK4
  double error_norm = 0.0;
  bool accepted = true;
  double h_used = 0.0;
  double h_next = 0.0;
  int nfe_delta = 0;
  ad::Var k_first;  // f(state, t)
  ad::Var k_last;   // f(state_next, t + h) for FSAL tableaus
};

/// Mixed absolute/relative max-norm used for step acceptance.
double error_norm(const Tensor& error, const Tensor& y, const Tensor& y_next, const StepController& c);

/// Classical 4-stage step; always accepted.
StepOutcome rk4_step(OdeFunction& f, const ad::Var& y, double t, double h);

/// Dormand-Prince 5(4) attempt. `k1` is f(y, t); when absent it is evaluated
/// here and counted in nfe_delta.
StepOutcome dopri5_step(OdeFunction& f, const ad::Var& y, double t, double h, const StepController& c,
                        std::optional<ad::Var> k1 = std::nullopt);

struct SolverSpec {
  enum class Kind { Rk4, Dopri5, Schedule };
  Kind kind = Kind::Dopri5;
  std::size_t rk4_steps = 10;
  StepController controller;
  /// Kind::Schedule: step boundaries to replay with the Dormand-Prince stages and
  /// no error control (used to differentiate an adaptive solve along a frozen path).
  std::vector<double> schedule;

  static SolverSpec rk4(std::size_t steps);
  static SolverSpec dopri5(StepController c = {});
  static SolverSpec fixed(std::vector<double> step_times);
};

struct SolveOptions {
  /// Extra times at which to record the state; t0 and tT are always recorded.
  std::vector<double> checkpoints;
  /// Keep f at each checkpoint, enabling Hermite interpolation. May cost one
  /// extra evaluation at the final time for non-FSAL methods.
  bool record_derivatives = false;
};

struct SolveRecord {
  std::vector<double> times;
  std::vector<ad::Var> states;
  std::vector<ad::Var> derivatives;  // parallel to times when recorded

  std::vector<double> step_times;         // accepted step boundaries, t0 .. tT
  std::vector<ad::Var> step_states;       // states at step_times
  std::vector<ad::Var> step_derivatives;  // f at the start of each accepted step

  long nfe = 0;
  long rejected = 0;
  long accepted = 0;
  /// One fingerprint per replay snapshot (filled by ReplayableField users).
  std::vector<std::uint64_t> rng_log;

  const ad::Var& final_state() const { return states.back(); }
  std::vector<Tensor> state_values() const;
};

/// Integrates from t0 to tT. Throws NumericalError("step underflow ...") when the
/// adaptive step falls below 1e-12 (tT - t0), and on non-finite field output.
SolveRecord solve_ivp(OdeFunction& f, const ad::Var& y0, double t0, double tT, const SolverSpec& solver,
                      const SolveOptions& options = {});

/// Piecewise-cubic Hermite interpolation between recorded checkpoints.
Tensor interpolate_solution(const SolveRecord& record, double t);

/// How long one set of draws lasts: one solver step, or the whole solve.
enum class NoiseScope { Step, Solve };

/// Wraps a field that draws from `rng` so that every stage of one step sees the
/// same draws: the generator is snapshotted when t advances and restored before
/// every evaluation. With NoiseScope::Solve the first snapshot is kept for the
/// whole solve, so every evaluation sees the same draws.
class ReplayableField : public OdeFunction {
 public:
  ReplayableField(OdeFunction& inner, Rng& rng, NoiseScope scope = NoiseScope::Step)
      : inner_(inner), rng_(rng), snapshot_(rng), scope_(scope) {}
  ad::Var operator()(const ad::Var& state, double t) override;
  void begin_step(const ad::Var& state, double t) override;
  bool stochastic() const override { return inner_.stochastic(); }
  const std::vector<std::uint64_t>& log() const { return log_; }

 private:
  OdeFunction& inner_;
  Rng& rng_;
  Rng snapshot_;
  NoiseScope scope_;
  std::optional<double> step_t_;
  std::vector<std::uint64_t> log_;
};

enum class BatchMode { Lockstep, Independent };

/// Builds a field for the given instance indices (rows of the batch in order).
using FieldFactory = std::function<std::unique_ptr<OdeFunction>(std::span<const std::size_t> instances)>;

struct BatchResult {
  std::vector<SolveRecord> records;  // one per instance
  long max_nfe = 0;
};

/// Solves every row of `states0` either as one shared step sequence (lockstep:
/// the controller sees the worst instance, every instance is charged the shared
/// NFE) or one solve per instance. Independent solves run on up to `workers`
/// threads (0: SVFM_NUM_WORKERS or 1); results are ordered by instance.
BatchResult solve_batch(const FieldFactory& factory, const Tensor& states0, double t0, double tT,
                        const SolverSpec& solver, BatchMode mode, const SolveOptions& options = {},
                        std::size_t workers = 0);

/// {"instance", "nfe", "rejected", "times", "states"} per line.
std::string records_to_jsonl(std::span<const SolveRecord> records);

/// Worker count from SVFM_NUM_WORKERS (default 1, at least 1).
std::size_t default_workers();

}  // namespace svfm::ode
