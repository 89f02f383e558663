#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "svfm/data.hpp"
#include "svfm/train.hpp"

namespace svfm::eval {

/// Per-instance solves of a trained model with sampling semantics: a mixture
/// draws one component per instance and keeps it, stochastic heads draw fresh
/// noise per step. Instance i uses seed derive_seed(seed, i). Results are in
/// instance order whatever the worker count.
ode::BatchResult solve_instances(const train::Model& m, const Tensor& h0, const std::vector<double>& time_offsets,
                                 double t0, double t1, const ode::SolverSpec& solver, std::uint64_t seed,
                                 const ode::SolveOptions& options = {}, std::size_t workers = 0);

/// RK4 on the training step size (stochastic models) or the evaluation solver.
ode::SolverSpec sampling_solver(const train::Model& m, double t0, double t1);

struct ClassificationReport {
  double accuracy = 0.0;
  std::vector<std::size_t> predicted;
  std::vector<long> nfe;  // per instance, evaluation solver
};

ClassificationReport evaluate_classification(const train::Model& m, const data::LabelledPoints& d, std::uint64_t seed,
                                             std::size_t workers = 0);

/// Two-cluster summary of 1-D samples (Lloyd iterations from the extremes).
struct Modes {
  double low = 0.0, high = 0.0;             // cluster means
  double low_weight = 0.0, high_weight = 0.0;
  /// Ashman's D; 0 when a cluster is empty.
  double separation = 0.0;
  bool bimodal() const { return separation > 4.0 && low_weight > 0.0 && high_weight > 0.0; }
};
Modes two_modes(const std::vector<double>& x);

struct EndpointReport {
  std::vector<double> predicted;  // first coordinate of each sampled endpoint
  double mean = 0.0;
  double stddev = 0.0;
  double relative_error = 0.0;  // mean |pred - target| / |target|
  double squared_error = 0.0;
  Modes modes;
};

/// One sampled endpoint per instance.
EndpointReport evaluate_endpoints(const train::Model& m, const data::EndpointPairs& d, std::uint64_t seed,
                                  std::size_t workers = 0);

struct SampledPath {
  std::vector<double> t;
  Tensor X;  // [len(t) x data_dim]
  std::string endpoint;
};

struct ForecastRequest {
  Tensor start;           // [1 x data_dim]
  double t0 = 0.0;
  double horizon = 0.0;   // integrate over [t0, t0 + horizon]
  double tod = 0.0;       // encoding offset (hours of day for home models)
  std::size_t samples = 1;
  std::size_t dense = 50;  // checkpoints after t0
};

/// m independent sampled trajectories. Labels come from `home` when given.
std::vector<SampledPath> sample_paths(const train::Model& m, const ForecastRequest& req, std::uint64_t seed,
                                      const data::HomePathSpec* home = nullptr, std::size_t workers = 0);

/// {"t", "X", "endpoint"?} per line (the walks format).
std::string paths_to_jsonl(const std::vector<SampledPath>& paths);

/// Mean squared error of the mean forecast against walks/trajectories on the
/// model's checkpoint grid.
double forecast_error(const train::Model& m, const train::Batch& b, std::uint64_t seed, std::size_t workers = 0);

// ---- NFE comparison ----

struct NfeComparison {
  std::string a, b;
  /// counts[i][j]: instances where a made i evaluations and b made j.
  std::vector<std::vector<std::size_t>> counts;
  long savings = 0;            // sum_i nfe_a(i) - nfe_b(i)
  double fraction_saved = 0.0; // instances with nfe_b < nfe_a
  double fraction_equal = 0.0;
};

NfeComparison compare_nfe(const std::string& name_a, const std::vector<long>& a, const std::string& name_b,
                          const std::vector<long>& b);

struct NfeSummary {
  double mean = 0.0, median = 0.0;
  long min = 0, max = 0;
};
NfeSummary summarize(const std::vector<long>& nfe);

}  // namespace svfm::eval
