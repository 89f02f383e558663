#include "svfm/odesolve.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "svfm/errors.hpp"

namespace svfm::ode {

const ButcherTableau& rk4_tableau() {
  static const ButcherTableau t{
      "rk4",
      {0.0, 0.5, 0.5, 1.0},
      {{}, {0.5}, {0.0, 0.5}, {0.0, 0.0, 1.0}},
      {1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0},
      {},
      false,
  };
  return t;
}

const ButcherTableau& dopri5_tableau() {
  static const ButcherTableau t{
      "dopri5",
      {0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0},
      {{},
       {1.0 / 5.0},
       {3.0 / 40.0, 9.0 / 40.0},
       {44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0},
       {19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0},
       {9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0},
       {35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0}},
      {35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0},
      {5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0},
      true,
  };
  return t;
}

void StepController::validate() const {
  if (!(abs_tol > 0.0) || !(rel_tol > 0.0)) throw ConfigError("controller tolerances must be positive");
  if (!(min_scale > 0.0 && min_scale < 1.0 && max_scale > 1.0))
    throw ConfigError("controller needs 0 < min_scale < 1 < max_scale");
  if (!(safety > 0.0 && safety <= 1.0)) throw ConfigError("controller safety must lie in (0, 1]");
  if (error_order < 1) throw ConfigError("controller error_order must be positive");
  if (!(initial_step_fraction > 0.0 && initial_step_fraction <= 1.0))
    throw ConfigError("controller initial_step_fraction must lie in (0, 1]");
}

SolverSpec SolverSpec::rk4(std::size_t steps) {
  if (steps == 0) throw ConfigError("rk4 needs at least one step");
  SolverSpec s;
  s.kind = Kind::Rk4;
  s.rk4_steps = steps;
  return s;
}

SolverSpec SolverSpec::dopri5(StepController c) {
  c.validate();
  SolverSpec s;
  s.kind = Kind::Dopri5;
  s.controller = c;
  return s;
}

SolverSpec SolverSpec::fixed(std::vector<double> step_times) {
  if (step_times.size() < 2) throw ConfigError("a step schedule needs at least two times");
  SolverSpec s;
  s.kind = Kind::Schedule;
  s.schedule = std::move(step_times);
  return s;
}

std::vector<Tensor> SolveRecord::state_values() const {
  std::vector<Tensor> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back(s.value());
  return out;
}

namespace {

std::string time_string(double t) {
  std::ostringstream os;
  os.precision(17);
  os << t;
  return os.str();
}

ad::Var evaluate(OdeFunction& f, const ad::Var& y, double t) {
  ad::Var k;
  try {
    k = f(y, t);
  } catch (const NumericalError& e) {
    throw NumericalError("field evaluation failed at t=" + time_string(t) + ": " + e.what());
  }
  if (k.shape() != y.shape())
    throw ShapeError("field returned " + shape_string(k.shape()) + " for state " + shape_string(y.shape()));
  if (!k.value().all_finite()) throw NumericalError("non-finite field output at t=" + time_string(t));
  return k;
}

ad::Var combine(const ad::Var& y, double h, std::span<const double> w, std::span<const ad::Var> ks) {
  std::vector<double> c(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) c[i] = h * w[i];
  try {
    return ad::lincomb(y, c, ks.first(w.size()));
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("non-finite state: ") + e.what());
  }
}

}  // namespace

double error_norm(const Tensor& error, const Tensor& y, const Tensor& y_next, const StepController& c) {
  double worst = 0.0;
  for (std::size_t i = 0; i < error.size(); ++i) {
    const double scale = c.abs_tol + c.rel_tol * std::max(std::abs(y[i]), std::abs(y_next[i]));
    worst = std::max(worst, std::abs(error[i]) / scale);
  }
  return worst;
}

StepOutcome rk4_step(OdeFunction& f, const ad::Var& y, double t, double h) {
  if (!(h > 0.0)) throw DomainError("rk4_step needs h > 0");
  const auto& tab = rk4_tableau();
  std::vector<ad::Var> k;
  k.reserve(4);
  for (std::size_t i = 0; i < 4; ++i) {
    const ad::Var yi = i == 0 ? y : combine(y, h, tab.a[i], k);
    k.push_back(evaluate(f, yi, t + tab.c[i] * h));
  }
  StepOutcome out;
  out.state_next = combine(y, h, tab.b, k);
  out.h_used = h;
  out.h_next = h;
  out.nfe_delta = 4;
  out.k_first = k[0];
  return out;
}

StepOutcome dopri5_step(OdeFunction& f, const ad::Var& y, double t, double h, const StepController& c,
                        std::optional<ad::Var> k1) {
  if (!(h > 0.0)) throw DomainError("dopri5_step needs h > 0");
  const auto& tab = dopri5_tableau();
  StepOutcome out;
  std::vector<ad::Var> k;
  k.reserve(7);
  if (k1) {
    k.push_back(*k1);
  } else {
    k.push_back(evaluate(f, y, t));
    out.nfe_delta += 1;
  }
  for (std::size_t i = 1; i < 7; ++i) {
    const ad::Var yi = combine(y, h, tab.a[i], k);
    k.push_back(evaluate(f, yi, t + tab.c[i] * h));
    out.nfe_delta += 1;
  }
  // The last stage is evaluated at the 5th-order solution itself (FSAL).
  out.state_next = combine(y, h, tab.b, std::span<const ad::Var>(k).first(6));

  // sum_i (b_i - b*_i) = 0, so subtracting k1 is exact algebra and makes the
  // estimate vanish exactly when every stage agrees.
  const Tensor& base = k[0].value();
  out.error = Tensor(base.shape());
  for (std::size_t i = 1; i < 7; ++i) {
    const double d = tab.b[i] - tab.b_star[i];
    const Tensor& ki = k[i].value();
    for (std::size_t j = 0; j < base.size(); ++j) out.error[j] += d * (ki[j] - base[j]);
  }
  for (auto& e : out.error.values()) e *= h;

  out.error_norm = error_norm(out.error, y.value(), out.state_next.value(), c);
  out.accepted = out.error_norm <= 1.0;
  const double factor = out.error_norm == 0.0
                            ? c.max_scale
                            : std::clamp(c.safety * std::pow(out.error_norm, -1.0 / c.error_order), c.min_scale,
                                         c.max_scale);
  out.h_used = h;
  out.h_next = h * factor;
  out.k_first = k[0];
  out.k_last = k[6];
  return out;
}

namespace {

std::vector<double> checkpoint_targets(const std::vector<double>& requested, double t0, double tT) {
  std::vector<double> targets;
  for (double t : requested) {
    if (!(t >= t0 && t <= tT))
      throw DomainError("checkpoint " + time_string(t) + " outside [" + time_string(t0) + ", " + time_string(tT) + "]");
    if (t > t0) targets.push_back(t);
  }
  targets.push_back(tT);
  std::sort(targets.begin(), targets.end());
  targets.erase(std::unique(targets.begin(), targets.end()), targets.end());
  return targets;
}

struct Recorder {
  SolveRecord rec;
  bool derivatives;

  void start(double t0, const ad::Var& y0) {
    rec.times.push_back(t0);
    rec.states.push_back(y0);
    rec.step_times.push_back(t0);
    rec.step_states.push_back(y0);
  }
  void step(double t, const ad::Var& y, const ad::Var& k_start) {
    rec.step_times.push_back(t);
    rec.step_states.push_back(y);
    rec.step_derivatives.push_back(k_start);
    ++rec.accepted;
  }
  void checkpoint(double t, const ad::Var& y) {
    rec.times.push_back(t);
    rec.states.push_back(y);
  }
};

// Step boundaries for fixed-grid methods: the given grid merged with the
// checkpoint targets.
std::vector<double> merge_grid(std::vector<double> grid, const std::vector<double>& targets, double span) {
  grid.insert(grid.end(), targets.begin(), targets.end());
  std::sort(grid.begin(), grid.end());
  std::vector<double> out;
  const double tol = 1e-12 * span;
  for (double t : grid) {
    if (!out.empty() && t - out.back() <= tol) {
      // Prefer an exact checkpoint time over a nearby grid point.
      if (std::binary_search(targets.begin(), targets.end(), t)) out.back() = t;
      continue;
    }
    out.push_back(t);
  }
  return out;
}

SolveRecord solve_fixed(OdeFunction& f, const ad::Var& y0, const std::vector<double>& grid,
                        const std::vector<double>& targets, bool use_dopri, const SolveOptions& options) {
  Recorder r{{}, options.record_derivatives};
  r.start(grid.front(), y0);
  ad::Var y = y0;
  std::optional<ad::Var> k1;
  std::size_t next_target = 0;
  StepController never_reject;
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    const double t = grid[i], h = grid[i + 1] - grid[i];
    f.begin_step(y, t);
    StepOutcome out;
    if (use_dopri) {
      if (!k1) {
        k1 = evaluate(f, y, t);
        ++r.rec.nfe;
      }
      out = dopri5_step(f, y, t, h, never_reject, k1);
    } else {
      out = rk4_step(f, y, t, h);
    }
    r.rec.nfe += out.nfe_delta;
    if (i == 0 && r.derivatives) r.rec.derivatives.push_back(out.k_first);
    y = out.state_next;
    r.step(grid[i + 1], y, out.k_first);
    k1.reset();
    if (use_dopri && !f.stochastic()) k1 = out.k_last;
    if (next_target < targets.size() && grid[i + 1] == targets[next_target]) {
      r.checkpoint(grid[i + 1], y);
      ++next_target;
      if (r.derivatives) {
        if (use_dopri) {
          r.rec.derivatives.push_back(out.k_last);
        } else {
          f.begin_step(y, grid[i + 1]);
          r.rec.derivatives.push_back(evaluate(f, y, grid[i + 1]));
          ++r.rec.nfe;
        }
      }
    }
  }
  return std::move(r.rec);
}

SolveRecord solve_adaptive(OdeFunction& f, const ad::Var& y0, double t0, double tT, const StepController& c,
                           const std::vector<double>& targets, const SolveOptions& options) {
  c.validate();
  Recorder r{{}, options.record_derivatives};
  r.start(t0, y0);
  const double span = tT - t0;
  const double h_min = 1e-12 * span;
  ad::Var y = y0;
  double t = t0;
  double h = c.initial_step_fraction * span;
  std::optional<ad::Var> k1;
  std::size_t next_target = 0;
  bool first = true;
  while (next_target < targets.size()) {
    const double target = targets[next_target];
    double h_try = h;
    bool landing = false;
    if (target - (t + h_try) <= h_min) {
      h_try = target - t;
      landing = true;
    }
    // Step to a representable time and use the exact difference, so a replay of
    // step_times reproduces this solve bit for bit.
    const double t_new = landing ? target : t + h_try;
    h_try = t_new - t;
    f.begin_step(y, t);
    if (!k1) {
      k1 = evaluate(f, y, t);
      ++r.rec.nfe;
    }
    if (first && r.derivatives) r.rec.derivatives.push_back(*k1);
    first = false;
    StepOutcome out = dopri5_step(f, y, t, h_try, c, k1);
    r.rec.nfe += out.nfe_delta;
    if (out.accepted) {
      t = t_new;
      y = out.state_next;
      r.step(t, y, *k1);
      k1.reset();
      if (!f.stochastic()) k1 = out.k_last;
      if (landing) {
        r.checkpoint(t, y);
        if (r.derivatives) r.rec.derivatives.push_back(out.k_last);
        ++next_target;
      }
    } else {
      ++r.rec.rejected;
    }
    h = out.h_next;
    if (h < h_min)
      throw NumericalError("step underflow at t=" + time_string(t) + " (h=" + time_string(h) + ")");
  }
  return std::move(r.rec);
}

}  // namespace

SolveRecord solve_ivp(OdeFunction& f, const ad::Var& y0, double t0, double tT, const SolverSpec& solver,
                      const SolveOptions& options) {
  if (!(t0 < tT)) throw DomainError("solve_ivp needs t0 < tT");
  if (!y0.value().all_finite()) throw NumericalError("non-finite initial state");
  const auto targets = checkpoint_targets(options.checkpoints, t0, tT);
  const double span = tT - t0;
  switch (solver.kind) {
    case SolverSpec::Kind::Rk4: {
      std::vector<double> grid;
      for (std::size_t i = 0; i <= solver.rk4_steps; ++i)
        grid.push_back(i == solver.rk4_steps ? tT : t0 + span * static_cast<double>(i) / static_cast<double>(solver.rk4_steps));
      return solve_fixed(f, y0, merge_grid(std::move(grid), targets, span), targets, false, options);
    }
    case SolverSpec::Kind::Schedule: {
      if (solver.schedule.front() != t0 || solver.schedule.back() != tT)
        throw ConfigError("step schedule must start at t0 and end at tT");
      if (!std::is_sorted(solver.schedule.begin(), solver.schedule.end()))
        throw ConfigError("step schedule must be increasing");
      return solve_fixed(f, y0, merge_grid(solver.schedule, targets, span), targets, true, options);
    }
    case SolverSpec::Kind::Dopri5:
      return solve_adaptive(f, y0, t0, tT, solver.controller, targets, options);
  }
  throw ConfigError("unknown solver kind");
}

Tensor interpolate_solution(const SolveRecord& record, double t) {
  const auto& ts = record.times;
  if (ts.empty()) throw DomainError("interpolate_solution on an empty record");
  if (!(t >= ts.front() && t <= ts.back()))
    throw DomainError("interpolation time " + time_string(t) + " outside [" + time_string(ts.front()) + ", " +
                      time_string(ts.back()) + "]");
  if (record.derivatives.size() != ts.size())
    throw std::logic_error("interpolate_solution needs derivatives recorded at every checkpoint");
  const auto it = std::lower_bound(ts.begin(), ts.end(), t);
  const std::size_t hi = static_cast<std::size_t>(it - ts.begin());
  if (*it == t) return record.states[hi].value();
  const std::size_t lo = hi - 1;
  const double h = ts[hi] - ts[lo];
  const double s = (t - ts[lo]) / h;
  const double h00 = 2 * s * s * s - 3 * s * s + 1, h10 = s * s * s - 2 * s * s + s;
  const double h01 = -2 * s * s * s + 3 * s * s, h11 = s * s * s - s * s;
  const Tensor& y0 = record.states[lo].value();
  const Tensor& y1 = record.states[hi].value();
  const Tensor& d0 = record.derivatives[lo].value();
  const Tensor& d1 = record.derivatives[hi].value();
  Tensor out(y0.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = h00 * y0[i] + h10 * h * d0[i] + h01 * y1[i] + h11 * h * d1[i];
  return out;
}

ad::Var ReplayableField::operator()(const ad::Var& state, double t) {
  rng_ = snapshot_;
  return inner_(state, t);
}

void ReplayableField::begin_step(const ad::Var& state, double t) {
  if (!step_t_ || (scope_ == NoiseScope::Step && *step_t_ != t)) {
    snapshot_ = rng_;
    step_t_ = t;
    Rng probe = snapshot_;
    log_.push_back(probe.next_u64());
  }
  inner_.begin_step(state, t);
}

std::size_t default_workers() {
  const char* env = std::getenv("SVFM_NUM_WORKERS");
  if (!env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (end == env || n < 1) return 1;
  return static_cast<std::size_t>(n);
}

namespace {

SolveRecord slice_record(const SolveRecord& shared, std::size_t row, std::size_t rows_per_instance) {
  auto slice = [&](const std::vector<ad::Var>& vs) {
    std::vector<ad::Var> out;
    out.reserve(vs.size());
    for (const auto& v : vs) out.push_back(ad::slice_rows(v, row * rows_per_instance, (row + 1) * rows_per_instance));
    return out;
  };
  SolveRecord r;
  r.times = shared.times;
  r.states = slice(shared.states);
  r.derivatives = slice(shared.derivatives);
  r.step_times = shared.step_times;
  r.step_states = slice(shared.step_states);
  r.step_derivatives = slice(shared.step_derivatives);
  r.nfe = shared.nfe;
  r.rejected = shared.rejected;
  r.accepted = shared.accepted;
  r.rng_log = shared.rng_log;
  return r;
}

}  // namespace

BatchResult solve_batch(const FieldFactory& factory, const Tensor& states0, double t0, double tT,
                        const SolverSpec& solver, BatchMode mode, const SolveOptions& options, std::size_t workers) {
  const std::size_t n = states0.rows();
  BatchResult result;
  if (mode == BatchMode::Lockstep) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    auto field = factory(all);
    const SolveRecord shared = solve_ivp(*field, ad::constant(states0), t0, tT, solver, options);
    for (std::size_t i = 0; i < n; ++i) result.records.push_back(slice_record(shared, i, 1));
    result.max_nfe = shared.nfe;
    return result;
  }

  // Each instance gets its own field and record; no tape is shared, so the
  // solves are independent and may run concurrently.
  result.records.resize(n);
  std::vector<std::exception_ptr> errors(n);
  auto run_one = [&](std::size_t i) {
    try {
      const std::size_t idx[1] = {i};
      auto field = factory(idx);
      result.records[i] = solve_ivp(*field, ad::constant(Tensor({1, states0.cols()}, states0.row(i))), t0, tT,
                                    solver, options);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (workers == 0) workers = default_workers();
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) run_one(i);
      });
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (const auto& r : result.records) result.max_nfe = std::max(result.max_nfe, r.nfe);
  return result;
}

std::string records_to_jsonl(std::span<const SolveRecord> records) {
  std::string out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    nlohmann::json states = nlohmann::json::array();
    for (const auto& s : r.states) states.push_back(std::vector<double>(s.value().values().begin(), s.value().values().end()));
    nlohmann::json line{{"instance", i}, {"nfe", r.nfe}, {"rejected", r.rejected}, {"times", r.times}, {"states", states}};
    out += line.dump() + "\n";
  }
  return out;
}

}  // namespace svfm::ode
