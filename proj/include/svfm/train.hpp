#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "svfm/autodiff.hpp"
#include "svfm/data.hpp"
#include "svfm/fields.hpp"
#include "svfm/losses.hpp"
#include "svfm/odesolve.hpp"

namespace svfm::train {

// ---- optimizer ----

struct AdamConfig {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over every parameter of a store, reading its gradients.
class Adam {
 public:
  explicit Adam(AdamConfig c = {}) : c_(c) {}
  void step(ad::ParameterStore& store);
  long steps() const { return t_; }

 private:
  AdamConfig c_;
  long t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

// ---- configuration ----

enum class Task { Classification, Endpoint, Forecast };
std::string to_string(Task t);
Task parse_task(const std::string& s);
/// moons/circles/xor -> classification, crossing/splitting/scaling -> endpoint, cyclic/home -> forecast.
Task task_for_dataset(const std::string& name);

struct SolverConfig {
  std::string method = "rk4";  // rk4 | dopri5
  std::size_t steps = 8;
  double rtol = 1e-6;
  double atol = 1e-6;

  ode::SolverSpec spec() const;
  void validate() const;
  nlohmann::json to_json() const;
  static SolverConfig from_json(const nlohmann::json& j);
  static SolverConfig dopri5(double tol = 1e-6);
  bool operator==(const SolverConfig&) const = default;
};

struct DatasetConfig {
  std::string name = "moons";
  std::size_t n_train = 1000;
  std::size_t n_val = 1000;
  std::size_t n_test = 1000;
  std::uint64_t seed = 0;
  std::string regime = "mixed";  // home
  std::size_t periods = 1;       // cyclic
  std::size_t samples_per_period = 40;
  /// Optional JSON-lines files replacing the generated splits.
  std::string train_file, val_file, test_file;
  /// Home floor plan; empty uses the built-in one.
  std::string floorplan_file;

  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
  bool operator==(const DatasetConfig&) const = default;
};

struct StochasticConfig {
  std::size_t samples = 4;  // M per component per instance
  double variance_floor = 1e-3;
  ode::NoiseScope noise_scope = ode::NoiseScope::Step;

  nlohmann::json to_json() const;
  static StochasticConfig from_json(const nlohmann::json& j);
  bool operator==(const StochasticConfig&) const = default;
};

struct ForecastConfig {
  double horizon = 0.0;         // 0: from the data (cyclic span, home max duration)
  std::size_t checkpoints = 0;  // 0: data knots (cyclic) or 10 (home)

  nlohmann::json to_json() const;
  static ForecastConfig from_json(const nlohmann::json& j);
  bool operator==(const ForecastConfig&) const = default;
};

struct TrainConfig {
  DatasetConfig dataset;
  fields::FieldSpec field;
  losses::LossConfig loss;
  AdamConfig adam;
  std::size_t batch_size = 100;
  std::size_t epochs = 100;
  std::size_t patience = 50;
  std::uint64_t seed = 0;
  double t0 = 0.0;
  double t1 = 1.0;
  SolverConfig train_solver;
  SolverConfig eval_solver = SolverConfig::dopri5();
  StochasticConfig stochastic;
  ForecastConfig forecast;
  std::string output_dir;  // cli default for --out

  Task task() const { return task_for_dataset(dataset.name); }
  /// Schema and cross-field checks; ConfigError names the problem.
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// ---- model ----

struct Splits;

struct Model {
  Task task = Task::Classification;
  std::string dataset;
  fields::FieldSpec field;
  std::size_t num_classes = 0;  // classification readout width
  double t0 = 0.0, t1 = 1.0;
  SolverConfig train_solver;
  SolverConfig eval_solver = SolverConfig::dopri5();
  StochasticConfig stochastic;
  ForecastConfig forecast;
  ad::ParameterStore params;

  /// Copies the configuration; the forecast interval comes from the data.
  static Model from_config(const TrainConfig& c, const Splits& splits);
  void init_params(std::uint64_t seed);

  std::string to_json() const;
  static Model from_json(const std::string& text);
};

// ---- data bundle ----

/// Training inputs for any task, one row per instance.
struct Batch {
  Tensor h0;                        // [n x data_dim]
  std::vector<std::size_t> labels;  // classification
  Tensor targets;                   // endpoint: [n x D]
  std::vector<double> time_offsets; // forecast: per-instance encoding offset
  std::vector<double> checkpoint_times;
  std::vector<Tensor> checkpoint_targets;  // forecast: per checkpoint [n x D]
  std::size_t num_classes = 0;

  std::size_t size() const { return h0.rows(); }
  Batch subset(const std::vector<std::size_t>& rows) const;
};

struct Splits {
  Batch train, val, test;
  std::optional<data::HomePathSpec> home;
  double horizon = 0.0;  // forecast tasks
};

/// Generates (or loads) train/val/test for the configured dataset.
Splits load_splits(const TrainConfig& c);
Batch batch_from_points(const data::LabelledPoints& d);
Batch batch_from_pairs(const data::EndpointPairs& d);
/// Forecast batch on checkpoints t_i = horizon * i / checkpoints (seconds for
/// home walks); targets past the end of a walk hold its last position.
Batch batch_from_walks(const std::vector<data::HomeWalk>& walks, double horizon, std::size_t checkpoints);
Batch batch_from_trajectory(const losses::TrajectorySample& s, std::size_t checkpoints);

// ---- forward pass ----

/// An integrated batch: rows are instances, or (component, sample, instance)
/// blocks for stochastic models.
struct Rollout {
  std::unique_ptr<fields::ModelField> field;
  std::unique_ptr<ode::ReplayableField> replay;
  ode::SolveRecord record;
  std::size_t instances = 0;
  std::size_t samples = 1;     // M
  std::size_t components = 1;  // K
};

/// Training-layout solve: stochastic models run every instance through every
/// component with M samples each.
Rollout rollout(const Model& m, ad::ParamBinder& bind, const Batch& b, const ode::SolverSpec& solver,
                std::uint64_t seed);

struct LossValue {
  ad::Var total;
  std::map<std::string, double> terms;
  long nfe = 0;  // per instance (lockstep)
};

LossValue batch_loss(const Model& m, const losses::LossConfig& loss, ad::ParamBinder& bind, const Batch& b,
                     const ode::SolverSpec& solver, std::uint64_t seed);

/// Class probabilities [n x C] from a training-layout rollout.
ad::Var class_probabilities(const Model& m, ad::ParamBinder& bind, const Rollout& r);
/// Linear readout of a state block.
ad::Var readout(ad::ParamBinder& bind, const ad::Var& states);

// ---- training loop ----

struct EpochMetrics {
  std::size_t epoch = 0;
  std::map<std::string, double> loss_terms;
  double train_loss = 0.0;
  double nfe_mean = 0.0, nfe_median = 0.0, nfe_max = 0.0;
  double val = 0.0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  Model model;  // best validation epoch
  std::vector<EpochMetrics> metrics;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  bool stopped_early = false;

  std::string metrics_jsonl() const;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Throws NumericalError("... diverged at epoch N") on a non-finite loss.
TrainResult train_run(const TrainConfig& c, const Splits& splits, const EpochCallback& on_epoch = {});

/// Max error between backward() and central differences over every parameter
/// entry, relative to max(|analytic|, |numeric|, floor).
double grad_check(ad::ParameterStore& store, const std::function<ad::Var(ad::ParamBinder&)>& loss, double eps = 1e-5,
                  double floor = 1e-7);

}  // namespace svfm::train
