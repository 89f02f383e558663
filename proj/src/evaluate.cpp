#include "svfm/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "svfm/errors.hpp"

namespace svfm::eval {

using ad::Var;
using nlohmann::json;

namespace {

class SampledField : public ode::OdeFunction {
 public:
  SampledField(const train::Model& m, fields::BindOptions opt, const Tensor& state0, double t0)
      : bind_(const_cast<ad::ParameterStore&>(m.params), nullptr),
        field_(m.field, bind_, std::move(opt), ad::constant(state0), t0),
        replay_(field_, field_.rng(), m.stochastic.noise_scope) {}

  Var operator()(const Var& state, double t) override { return replay_(state, t); }
  void begin_step(const Var& state, double t) override { replay_.begin_step(state, t); }
  bool stochastic() const override { return replay_.stochastic(); }

 private:
  ad::ParamBinder bind_;
  fields::ModelField field_;
  ode::ReplayableField replay_;
};

Tensor row_of(const Tensor& t, std::size_t r) { return Tensor({1, t.cols()}, t.row(r)); }

}  // namespace

ode::BatchResult solve_instances(const train::Model& m, const Tensor& h0, const std::vector<double>& time_offsets,
                                 double t0, double t1, const ode::SolverSpec& solver, std::uint64_t seed,
                                 const ode::SolveOptions& options, std::size_t workers) {
  if (h0.rank() != 2 || h0.cols() != m.field.data_dim)
    throw ShapeError("model expects " + std::to_string(m.field.data_dim) + "-dimensional inputs, got " +
                     shape_string(h0.shape()));
  if (!time_offsets.empty() && time_offsets.size() != h0.rows())
    throw ShapeError("time offsets need one entry per instance");
  const Tensor states0 = fields::augment(h0, m.field.augment_dims);
  auto factory = [&](std::span<const std::size_t> idx) -> std::unique_ptr<ode::OdeFunction> {
    if (idx.size() != 1) throw std::logic_error("solve_instances: expected one instance per field");
    const std::size_t i = idx.front();
    fields::BindOptions opt;
    opt.selection = fields::Selection::HardSample;
    opt.freeze_component = true;
    opt.seed = derive_seed(seed, i);
    if (!time_offsets.empty()) opt.time_offsets = {time_offsets[i]};
    return std::make_unique<SampledField>(m, std::move(opt), row_of(states0, i), t0);
  };
  return ode::solve_batch(factory, states0, t0, t1, solver, ode::BatchMode::Independent, options, workers);
}

ode::SolverSpec sampling_solver(const train::Model& m, double t0, double t1) {
  if (m.field.stochastic_heads() && m.stochastic.noise_scope == ode::NoiseScope::Step &&
      m.train_solver.method == "rk4") {
    const double h = (m.t1 - m.t0) / static_cast<double>(m.train_solver.steps);
    const auto steps = static_cast<std::size_t>(std::max(1.0, std::round((t1 - t0) / h)));
    return ode::SolverSpec::rk4(steps);
  }
  return m.eval_solver.spec();
}

ClassificationReport evaluate_classification(const train::Model& m, const data::LabelledPoints& d, std::uint64_t seed,
                                             std::size_t workers) {
  if (m.task != train::Task::Classification) throw ConfigError("eval: model is not a classifier");
  d.validate();
  const auto res = solve_instances(m, d.x, {}, m.t0, m.t1, m.eval_solver.spec(), seed, {}, workers);
  ad::ParamBinder bind(const_cast<ad::ParameterStore&>(m.params), nullptr);
  ClassificationReport rep;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Tensor logits = train::readout(bind, res.records[i].final_state()).value();
    if (logits.cols() <= *std::max_element(d.y.begin(), d.y.end()))
      throw ShapeError("eval: dataset has more classes than the model");
    const auto row = logits.row(0);
    const auto k = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    rep.predicted.push_back(k);
    rep.nfe.push_back(res.records[i].nfe);
    correct += k == d.y[i];
  }
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(d.size());
  return rep;
}

Modes two_modes(const std::vector<double>& x) {
  Modes out;
  if (x.empty()) return out;
  double lo = *std::min_element(x.begin(), x.end());
  double hi = *std::max_element(x.begin(), x.end());
  std::vector<bool> upper(x.size(), false);
  for (int it = 0; it < 100; ++it) {
    const double cut = 0.5 * (lo + hi);
    double s0 = 0, s1 = 0;
    std::size_t n0 = 0, n1 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      upper[i] = x[i] > cut;
      (upper[i] ? s1 : s0) += x[i];
      ++(upper[i] ? n1 : n0);
    }
    const double nlo = n0 ? s0 / n0 : lo, nhi = n1 ? s1 / n1 : hi;
    if (nlo == lo && nhi == hi) break;
    lo = nlo;
    hi = nhi;
  }
  double v0 = 0, v1 = 0;
  std::size_t n0 = 0, n1 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (upper[i]) {
      v1 += (x[i] - hi) * (x[i] - hi);
      ++n1;
    } else {
      v0 += (x[i] - lo) * (x[i] - lo);
      ++n0;
    }
  }
  out.low = lo;
  out.high = hi;
  out.low_weight = static_cast<double>(n0) / static_cast<double>(x.size());
  out.high_weight = static_cast<double>(n1) / static_cast<double>(x.size());
  if (n0 == 0 || n1 == 0) return out;
  const double var = v0 / n0 + v1 / n1;
  out.separation = var > 0.0 ? std::sqrt(2.0) * (hi - lo) / std::sqrt(var) : std::numeric_limits<double>::infinity();
  return out;
}

EndpointReport evaluate_endpoints(const train::Model& m, const data::EndpointPairs& d, std::uint64_t seed,
                                  std::size_t workers) {
  if (m.task != train::Task::Endpoint) throw ConfigError("eval: model is not an endpoint model");
  d.validate();
  const auto res = solve_instances(m, d.start, {}, m.t0, m.t1, sampling_solver(m, m.t0, m.t1), seed, {}, workers);
  EndpointReport rep;
  const double n = static_cast<double>(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double y = res.records[i].final_state().value().at(0, 0);
    const double target = d.target.at(i, 0);
    rep.predicted.push_back(y);
    rep.mean += y / n;
    rep.squared_error += (y - target) * (y - target) / n;
    rep.relative_error += std::abs(y - target) / std::max(std::abs(target), 1e-12) / n;
  }
  double v = 0.0;
  for (double y : rep.predicted) v += (y - rep.mean) * (y - rep.mean);
  rep.stddev = d.size() > 1 ? std::sqrt(v / (n - 1.0)) : 0.0;
  rep.modes = two_modes(rep.predicted);
  return rep;
}

std::vector<SampledPath> sample_paths(const train::Model& m, const ForecastRequest& req, std::uint64_t seed,
                                      const data::HomePathSpec* home, std::size_t workers) {
  if (req.samples == 0) throw ConfigError("forecast: samples must be positive");
  if (!(req.horizon > 0.0)) throw ConfigError("forecast: horizon must be positive");
  if (req.start.rank() != 2 || req.start.rows() != 1 || req.start.cols() != m.field.data_dim)
    throw ShapeError("forecast: start state must be [1 x " + std::to_string(m.field.data_dim) + "]");
  const double t1 = req.t0 + req.horizon;
  const auto solver = sampling_solver(m, req.t0, t1);
  // stochastic paths are recorded on the step grid so checkpoints add no steps
  const std::size_t dense = solver.kind == ode::SolverSpec::Kind::Rk4 ? solver.rk4_steps : std::max<std::size_t>(req.dense, 1);
  ode::SolveOptions so;
  for (std::size_t c = 1; c <= dense; ++c)
    so.checkpoints.push_back(req.t0 + req.horizon * static_cast<double>(c) / static_cast<double>(dense));
  Tensor h0({req.samples, req.start.cols()});
  for (std::size_t i = 0; i < req.samples; ++i)
    for (std::size_t j = 0; j < req.start.cols(); ++j) h0.at(i, j) = req.start[j];
  const auto res = solve_instances(m, h0, std::vector<double>(req.samples, req.tod), req.t0, t1, solver, seed, so, workers);

  std::vector<SampledPath> out;
  const std::size_t d = m.field.data_dim;
  for (const auto& rec : res.records) {
    SampledPath p;
    p.t = rec.times;
    p.X = Tensor({rec.times.size(), d});
    for (std::size_t k = 0; k < rec.times.size(); ++k)
      for (std::size_t j = 0; j < d; ++j) p.X.at(k, j) = rec.states[k].value().at(0, j);
    if (home != nullptr) {
      if (d != 2) throw ShapeError("forecast: endpoint labels need 2-D states");
      const std::size_t last = p.t.size() - 1;
      p.endpoint = home->endpoints[home->nearest_endpoint({p.X.at(last, 0), p.X.at(last, 1)})].name;
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::string paths_to_jsonl(const std::vector<SampledPath>& paths) {
  std::string out;
  for (const auto& p : paths) {
    json x = json::array();
    for (std::size_t k = 0; k < p.X.rows(); ++k) x.push_back(p.X.row(k));
    json j = {{"t", p.t}, {"X", x}};
    if (!p.endpoint.empty()) j["endpoint"] = p.endpoint;
    out += j.dump() + "\n";
  }
  return out;
}

double forecast_error(const train::Model& m, const train::Batch& b, std::uint64_t seed, std::size_t workers) {
  if (m.task != train::Task::Forecast) throw ConfigError("eval: model is not a forecaster");
  ode::SolveOptions so;
  so.checkpoints = b.checkpoint_times;
  const auto res =
      solve_instances(m, b.h0, b.time_offsets, m.t0, m.t1, sampling_solver(m, m.t0, m.t1), seed, so, workers);
  double err = 0.0;
  const std::size_t d = m.field.data_dim;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const auto& rec = res.records[i];
    for (std::size_t c = 0; c < b.checkpoint_times.size(); ++c) {
      const auto it = std::find_if(rec.times.begin(), rec.times.end(), [&](double t) {
        return std::abs(t - b.checkpoint_times[c]) <= 1e-12 * std::max(1.0, std::abs(t));
      });
      const Tensor& s = rec.states[static_cast<std::size_t>(it - rec.times.begin())].value();
      for (std::size_t j = 0; j < d; ++j) {
        const double e = s.at(0, j) - b.checkpoint_targets[c].at(i, j);
        err += e * e;
      }
    }
  }
  return err / static_cast<double>(b.size() * b.checkpoint_times.size());
}

NfeComparison compare_nfe(const std::string& name_a, const std::vector<long>& a, const std::string& name_b,
                          const std::vector<long>& b) {
  if (a.size() != b.size()) throw ShapeError("nfe: lists differ in length");
  NfeComparison c;
  c.a = name_a;
  c.b = name_b;
  long top = 0;
  for (std::size_t i = 0; i < a.size(); ++i) top = std::max({top, a[i], b[i]});
  c.counts.assign(static_cast<std::size_t>(top) + 1, std::vector<std::size_t>(static_cast<std::size_t>(top) + 1, 0));
  std::size_t saved = 0, equal = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++c.counts[static_cast<std::size_t>(a[i])][static_cast<std::size_t>(b[i])];
    c.savings += a[i] - b[i];
    saved += b[i] < a[i];
    equal += b[i] == a[i];
  }
  if (!a.empty()) {
    c.fraction_saved = static_cast<double>(saved) / static_cast<double>(a.size());
    c.fraction_equal = static_cast<double>(equal) / static_cast<double>(a.size());
  }
  return c;
}

NfeSummary summarize(const std::vector<long>& nfe) {
  NfeSummary s;
  if (nfe.empty()) return s;
  std::vector<long> v = nfe;
  std::sort(v.begin(), v.end());
  s.min = v.front();
  s.max = v.back();
  s.mean = static_cast<double>(std::accumulate(v.begin(), v.end(), 0L)) / static_cast<double>(v.size());
  const std::size_t h = v.size() / 2;
  s.median = v.size() % 2 ? static_cast<double>(v[h]) : 0.5 * static_cast<double>(v[h - 1] + v[h]);
  return s;
}

}  // namespace svfm::eval
