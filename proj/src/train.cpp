#include "svfm/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "svfm/errors.hpp"
#include "svfm/json_util.hpp"
#include "svfm/nn.hpp"

namespace svfm::train {

using ad::Var;
using nlohmann::json;

namespace {

constexpr const char* kReadoutW = "readout/w";
constexpr const char* kReadoutB = "readout/b";

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

Tensor pick_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  if (t.empty()) return t;
  const std::size_t c = t.cols();
  Tensor out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = t.at(rows[i], j);
  return out;
}

/// Stacks `reps` copies of t.
Tensor tile_rows(const Tensor& t, std::size_t reps) {
  const std::size_t n = t.rows(), c = t.cols();
  Tensor out({n * reps, c});
  for (std::size_t r = 0; r < reps; ++r)
    std::copy(t.values().begin(), t.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(r * n * c));
  return out;
}

const Var& state_at(const ode::SolveRecord& rec, double t) {
  for (std::size_t i = 0; i < rec.times.size(); ++i)
    if (std::abs(rec.times[i] - t) <= 1e-12 * std::max(1.0, std::abs(t))) return rec.states[i];
  throw DomainError("no state recorded at t=" + std::to_string(t));
}

/// Mean over the M sample blocks of each component: [K*M*n x C] -> K x [n x C].
std::vector<Var> component_means(const Var& rows, std::size_t k, std::size_t m, std::size_t n) {
  const std::size_t c = rows.value().cols();
  std::vector<Var> out;
  const Var avg = ad::constant(Tensor({1, m}, 1.0 / static_cast<double>(m)));
  for (std::size_t j = 0; j < k; ++j) {
    Var block = ad::slice_rows(rows, j * m * n, (j + 1) * m * n);
    if (m == 1) {
      out.push_back(block);
      continue;
    }
    Var flat = ad::reshape(block, {m, n * c});
    out.push_back(ad::reshape(ad::matmul(avg, flat), {n, c}));
  }
  return out;
}

/// Mixture weights per instance at time t, [n x K]: each component's assigned
/// weight averaged over its samples, renormalised.
Var component_weights(const Rollout& r, double t) {
  const std::size_t n = r.instances;
  if (r.components == 1) return ad::constant(Tensor({n, 1}, 1.0));
  Var w = ad::concat_cols(component_means(r.field->assigned_weight(t), r.components, r.samples, n));
  return ad::div(w, ad::row_sum(w));
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

}  // namespace

// ---- Adam ----

void Adam::step(ad::ParameterStore& store) {
  ++t_;
  const double bc1 = 1.0 - std::pow(c_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(c_.beta2, static_cast<double>(t_));
  for (const auto& key : store.keys()) {
    Tensor& w = store.value(key);
    const Tensor& g = store.grad(key);
    Tensor& m = m_.try_emplace(key, Tensor(w.shape())).first->second;
    Tensor& v = v_.try_emplace(key, Tensor(w.shape())).first->second;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = c_.beta1 * m[i] + (1.0 - c_.beta1) * g[i];
      v[i] = c_.beta2 * v[i] + (1.0 - c_.beta2) * g[i] * g[i];
      w[i] -= c_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c_.eps);
    }
  }
}

// ---- enums ----

std::string to_string(Task t) {
  switch (t) {
    case Task::Classification: return "classification";
    case Task::Endpoint: return "endpoint";
    case Task::Forecast: return "forecast";
  }
  return "?";
}

Task parse_task(const std::string& s) {
  for (Task t : {Task::Classification, Task::Endpoint, Task::Forecast})
    if (to_string(t) == s) return t;
  throw ConfigError("unknown task '" + s + "'");
}

Task task_for_dataset(const std::string& name) {
  if (name == "moons" || name == "circles" || name == "xor") return Task::Classification;
  if (name == "crossing" || name == "splitting" || name == "scaling") return Task::Endpoint;
  if (name == "cyclic" || name == "home") return Task::Forecast;
  throw ConfigError("dataset: unknown name '" + name + "' (moons, circles, xor, crossing, splitting, scaling, cyclic, home)");
}

// ---- config JSON ----

ode::SolverSpec SolverConfig::spec() const {
  validate();
  if (method == "rk4") return ode::SolverSpec::rk4(steps);
  ode::StepController c;
  c.rel_tol = rtol;
  c.abs_tol = atol;
  return ode::SolverSpec::dopri5(c);
}

void SolverConfig::validate() const {
  if (method != "rk4" && method != "dopri5") throw ConfigError("solver: unknown method '" + method + "' (rk4, dopri5)");
  if (method == "rk4" && steps == 0) throw ConfigError("solver: steps must be positive");
  if (!(rtol > 0.0) || !(atol > 0.0)) throw ConfigError("solver: tolerances must be positive");
}

json SolverConfig::to_json() const {
  if (method == "rk4") return {{"method", method}, {"steps", steps}};
  return {{"method", method}, {"rtol", rtol}, {"atol", atol}};
}

SolverConfig SolverConfig::from_json(const json& j) {
  const std::string ctx = "solver";
  json_util::check_keys(j, ctx, {"method", "steps", "rtol", "atol"});
  SolverConfig s;
  s.method = json_util::get<std::string>(j, "method", ctx);
  s.steps = json_util::get_or<std::size_t>(j, "steps", s.steps, ctx);
  s.rtol = json_util::get_or<double>(j, "rtol", s.rtol, ctx);
  s.atol = json_util::get_or<double>(j, "atol", s.atol, ctx);
  s.validate();
  return s;
}

SolverConfig SolverConfig::dopri5(double tol) {
  SolverConfig s;
  s.method = "dopri5";
  s.rtol = tol;
  s.atol = tol;
  return s;
}

json DatasetConfig::to_json() const {
  json j = {{"name", name},       {"n_train", n_train}, {"n_val", n_val},
            {"n_test", n_test},   {"seed", seed},       {"regime", regime},
            {"periods", periods}, {"samples_per_period", samples_per_period}};
  if (!train_file.empty()) j["train_file"] = train_file;
  if (!val_file.empty()) j["val_file"] = val_file;
  if (!test_file.empty()) j["test_file"] = test_file;
  if (!floorplan_file.empty()) j["floorplan_file"] = floorplan_file;
  return j;
}

DatasetConfig DatasetConfig::from_json(const json& j) {
  const std::string ctx = "dataset";
  json_util::check_keys(j, ctx,
                        {"name", "n_train", "n_val", "n_test", "seed", "regime", "periods", "samples_per_period",
                         "train_file", "val_file", "test_file", "floorplan_file"});
  DatasetConfig d;
  d.name = json_util::get<std::string>(j, "name", ctx);
  task_for_dataset(d.name);
  d.n_train = json_util::get_or<std::size_t>(j, "n_train", d.n_train, ctx);
  d.n_val = json_util::get_or<std::size_t>(j, "n_val", d.n_val, ctx);
  d.n_test = json_util::get_or<std::size_t>(j, "n_test", d.n_test, ctx);
  d.seed = json_util::get_or<std::uint64_t>(j, "seed", d.seed, ctx);
  d.regime = json_util::get_or<std::string>(j, "regime", d.regime, ctx);
  data::parse_regime(d.regime);
  d.periods = json_util::get_or<std::size_t>(j, "periods", d.periods, ctx);
  d.samples_per_period = json_util::get_or<std::size_t>(j, "samples_per_period", d.samples_per_period, ctx);
  d.train_file = json_util::get_or<std::string>(j, "train_file", "", ctx);
  d.val_file = json_util::get_or<std::string>(j, "val_file", "", ctx);
  d.test_file = json_util::get_or<std::string>(j, "test_file", "", ctx);
  d.floorplan_file = json_util::get_or<std::string>(j, "floorplan_file", "", ctx);
  return d;
}

json StochasticConfig::to_json() const {
  return {{"samples", samples},
          {"variance_floor", variance_floor},
          {"noise_scope", noise_scope == ode::NoiseScope::Step ? "step" : "solve"}};
}

StochasticConfig StochasticConfig::from_json(const json& j) {
  const std::string ctx = "stochastic";
  json_util::check_keys(j, ctx, {"samples", "variance_floor", "noise_scope"});
  StochasticConfig s;
  s.samples = json_util::get_or<std::size_t>(j, "samples", s.samples, ctx);
  s.variance_floor = json_util::get_or<double>(j, "variance_floor", s.variance_floor, ctx);
  const auto scope = json_util::get_or<std::string>(j, "noise_scope", "step", ctx);
  if (scope == "step") {
    s.noise_scope = ode::NoiseScope::Step;
  } else if (scope == "solve") {
    s.noise_scope = ode::NoiseScope::Solve;
  } else {
    throw ConfigError("stochastic: unknown noise_scope '" + scope + "' (step, solve)");
  }
  if (s.samples == 0) throw ConfigError("stochastic: samples must be positive");
  if (!(s.variance_floor > 0.0)) throw ConfigError("stochastic: variance_floor must be positive");
  return s;
}

json ForecastConfig::to_json() const { return {{"horizon", horizon}, {"checkpoints", checkpoints}}; }

ForecastConfig ForecastConfig::from_json(const json& j) {
  const std::string ctx = "forecast";
  json_util::check_keys(j, ctx, {"horizon", "checkpoints"});
  ForecastConfig f;
  f.horizon = json_util::get_or<double>(j, "horizon", f.horizon, ctx);
  f.checkpoints = json_util::get_or<std::size_t>(j, "checkpoints", f.checkpoints, ctx);
  if (f.horizon < 0.0) throw ConfigError("forecast: horizon must be non-negative");
  return f;
}

void TrainConfig::validate() const {
  const Task t = task();
  field.validate();
  loss.validate();
  train_solver.validate();
  eval_solver.validate();
  if (!(adam.lr > 0.0)) throw ConfigError("optimizer: lr must be positive");
  if (batch_size == 0) throw ConfigError("optimizer: batch_size must be positive");
  if (epochs == 0) throw ConfigError("optimizer: epochs must be positive");
  if (patience == 0) throw ConfigError("optimizer: patience must be positive");
  if (!(t1 > t0)) throw ConfigError("interval: t1 must exceed t0");
  const std::size_t want = (t == Task::Classification || dataset.name == "home") ? 2 : 1;
  if (field.data_dim != want)
    throw ConfigError("field: data_dim " + std::to_string(field.data_dim) + " does not match dataset '" + dataset.name +
                      "' (" + std::to_string(want) + ")");
  using losses::Term;
  switch (t) {
    case Task::Classification:
      if (!loss.has(Term::CE)) throw ConfigError("loss: classification needs CE");
      if (loss.has(Term::MDL) || loss.has(Term::FL)) throw ConfigError("loss: classification takes CE, TL, DV only");
      break;
    case Task::Endpoint:
      if (!loss.has(Term::MDL) && !loss.has(Term::FL)) throw ConfigError("loss: endpoint tasks need MDL or FL");
      if (loss.has(Term::CE)) throw ConfigError("loss: CE needs a classification dataset");
      break;
    case Task::Forecast:
      if (!loss.has(Term::FL)) throw ConfigError("loss: forecasting needs FL");
      if (loss.has(Term::CE) || loss.has(Term::MDL)) throw ConfigError("loss: forecasting takes FL only");
      break;
  }
  if (dataset.n_train == 0 || dataset.n_val == 0 || dataset.n_test == 0)
    throw ConfigError("dataset: split sizes must be positive");
}

json TrainConfig::to_json() const {
  json j = {{"dataset", dataset.to_json()},
            {"field", field.to_json()},
            {"loss", loss.to_json()},
            {"optimizer",
             {{"lr", adam.lr},
              {"beta1", adam.beta1},
              {"beta2", adam.beta2},
              {"eps", adam.eps},
              {"batch_size", batch_size},
              {"epochs", epochs},
              {"patience", patience}}},
            {"seed", seed},
            {"interval", {t0, t1}},
            {"train_solver", train_solver.to_json()},
            {"eval_solver", eval_solver.to_json()},
            {"stochastic", stochastic.to_json()},
            {"forecast", forecast.to_json()}};
  if (!output_dir.empty()) j["output_dir"] = output_dir;
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  const std::string ctx = "config";
  json_util::check_keys(j, ctx,
                        {"dataset", "field", "loss", "optimizer", "seed", "interval", "train_solver", "eval_solver",
                         "stochastic", "forecast", "output_dir"});
  TrainConfig c;
  if (!j.contains("dataset")) throw ConfigError("config: missing key 'dataset'");
  if (!j.contains("field")) throw ConfigError("config: missing key 'field'");
  c.dataset = DatasetConfig::from_json(j.at("dataset"));
  c.field = fields::FieldSpec::from_json(j.at("field"));
  if (j.contains("loss")) c.loss = losses::LossConfig::from_json(j.at("loss"));
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    const std::string octx = "optimizer";
    json_util::check_keys(o, octx, {"lr", "beta1", "beta2", "eps", "batch_size", "epochs", "patience"});
    c.adam.lr = json_util::get_or<double>(o, "lr", c.adam.lr, octx);
    c.adam.beta1 = json_util::get_or<double>(o, "beta1", c.adam.beta1, octx);
    c.adam.beta2 = json_util::get_or<double>(o, "beta2", c.adam.beta2, octx);
    c.adam.eps = json_util::get_or<double>(o, "eps", c.adam.eps, octx);
    c.batch_size = json_util::get_or<std::size_t>(o, "batch_size", c.batch_size, octx);
    c.epochs = json_util::get_or<std::size_t>(o, "epochs", c.epochs, octx);
    c.patience = json_util::get_or<std::size_t>(o, "patience", c.patience, octx);
  }
  c.seed = json_util::get_or<std::uint64_t>(j, "seed", c.seed, ctx);
  if (j.contains("interval")) {
    const json& iv = j.at("interval");
    if (!iv.is_array() || iv.size() != 2 || !iv[0].is_number() || !iv[1].is_number())
      throw ConfigError("config: key 'interval' must be [t0, t1]");
    c.t0 = iv[0].get<double>();
    c.t1 = iv[1].get<double>();
  }
  if (j.contains("train_solver")) c.train_solver = SolverConfig::from_json(j.at("train_solver"));
  if (j.contains("eval_solver")) c.eval_solver = SolverConfig::from_json(j.at("eval_solver"));
  if (j.contains("stochastic")) c.stochastic = StochasticConfig::from_json(j.at("stochastic"));
  if (j.contains("forecast")) c.forecast = ForecastConfig::from_json(j.at("forecast"));
  c.output_dir = json_util::get_or<std::string>(j, "output_dir", "", ctx);
  c.validate();
  return c;
}

// ---- model ----

Model Model::from_config(const TrainConfig& c, const Splits& splits) {
  Model m;
  m.task = c.task();
  m.dataset = c.dataset.name;
  m.field = c.field;
  m.num_classes = m.task == Task::Classification ? splits.train.num_classes : 0;
  m.t0 = c.t0;
  m.t1 = c.t1;
  m.forecast = c.forecast;
  if (m.task == Task::Forecast) {
    m.t0 = 0.0;
    m.t1 = splits.horizon;
    m.forecast.horizon = splits.horizon;
    m.forecast.checkpoints = splits.train.checkpoint_times.size();
  }
  m.train_solver = c.train_solver;
  m.eval_solver = c.eval_solver;
  m.stochastic = c.stochastic;
  return m;
}

void Model::init_params(std::uint64_t seed) {
  params = ad::ParameterStore();
  fields::init_params(field, seed, params);
  if (task != Task::Classification) return;
  const std::size_t s = field.state_dim(), c = num_classes;
  Tensor w({s, c});
  Rng rng(derive_seed(seed, 2000));
  const double a = std::sqrt(6.0 / static_cast<double>(s + c));
  for (auto& x : w.values()) x = rng.uniform(-a, a);
  params.add(kReadoutW, std::move(w));
  params.add(kReadoutB, Tensor({1, c}));
}

std::string Model::to_json() const {
  json j = {{"format", "svfm-model"},
            {"version", 1},
            {"task", train::to_string(task)},
            {"dataset", dataset},
            {"field", field.to_json()},
            {"num_classes", num_classes},
            {"interval", {t0, t1}},
            {"train_solver", train_solver.to_json()},
            {"eval_solver", eval_solver.to_json()},
            {"stochastic", stochastic.to_json()},
            {"forecast", forecast.to_json()},
            {"params", json::parse(params.to_json()).at("params")}};
  return j.dump(1) + "\n";
}

Model Model::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model: not valid JSON: ") + e.what());
  }
  const std::string ctx = "model";
  json_util::check_keys(j, ctx,
                        {"format", "version", "task", "dataset", "field", "num_classes", "interval", "train_solver",
                         "eval_solver", "stochastic", "forecast", "params"});
  if (json_util::get<std::string>(j, "format", ctx) != "svfm-model") throw ConfigError("model: wrong format tag");
  if (json_util::get<int>(j, "version", ctx) != 1) throw ConfigError("model: unsupported version");
  Model m;
  m.task = parse_task(json_util::get<std::string>(j, "task", ctx));
  m.dataset = json_util::get<std::string>(j, "dataset", ctx);
  m.field = fields::FieldSpec::from_json(j.at("field"));
  m.num_classes = json_util::get<std::size_t>(j, "num_classes", ctx);
  const json& iv = j.at("interval");
  if (!iv.is_array() || iv.size() != 2) throw ConfigError("model: key 'interval' must be [t0, t1]");
  m.t0 = iv[0].get<double>();
  m.t1 = iv[1].get<double>();
  m.train_solver = SolverConfig::from_json(j.at("train_solver"));
  m.eval_solver = SolverConfig::from_json(j.at("eval_solver"));
  m.stochastic = StochasticConfig::from_json(j.at("stochastic"));
  m.forecast = ForecastConfig::from_json(j.at("forecast"));
  if (!j.contains("params")) throw ConfigError("model: missing key 'params'");
  m.params = ad::ParameterStore::from_json(json{{"params", j.at("params")}}.dump());
  // every parameter the variant needs must be present
  ad::ParameterStore expected;
  fields::init_params(m.field, 0, expected);
  for (const auto& key : expected.keys()) {
    if (!m.params.contains(key)) throw ConfigError("model: missing parameter '" + key + "'");
    if (m.params.value(key).shape() != expected.value(key).shape())
      throw ConfigError("model: parameter '" + key + "' has the wrong shape");
  }
  if (m.task == Task::Classification && (!m.params.contains(kReadoutW) || !m.params.contains(kReadoutB)))
    throw ConfigError("model: classification model without readout");
  return m;
}

// ---- batches ----

Batch Batch::subset(const std::vector<std::size_t>& rows) const {
  Batch b;
  b.h0 = pick_rows(h0, rows);
  for (std::size_t r : rows) {
    if (!labels.empty()) b.labels.push_back(labels[r]);
    if (!time_offsets.empty()) b.time_offsets.push_back(time_offsets[r]);
  }
  b.targets = pick_rows(targets, rows);
  b.checkpoint_times = checkpoint_times;
  for (const auto& t : checkpoint_targets) b.checkpoint_targets.push_back(pick_rows(t, rows));
  b.num_classes = num_classes;
  return b;
}

Batch batch_from_points(const data::LabelledPoints& d) {
  d.validate();
  Batch b;
  b.h0 = d.x;
  b.labels = d.y;
  b.num_classes = d.num_classes;
  return b;
}

Batch batch_from_pairs(const data::EndpointPairs& d) {
  d.validate();
  Batch b;
  b.h0 = d.start;
  b.targets = d.target;
  return b;
}

Batch batch_from_walks(const std::vector<data::HomeWalk>& walks, double horizon, std::size_t checkpoints) {
  if (walks.empty()) throw ConfigError("forecast: no trajectories");
  if (!(horizon > 0.0) || checkpoints == 0) throw ConfigError("forecast: horizon and checkpoints must be positive");
  const std::size_t n = walks.size(), d = walks.front().sample.X.cols();
  Batch b;
  b.h0 = Tensor({n, d});
  for (std::size_t c = 1; c <= checkpoints; ++c)
    b.checkpoint_times.push_back(horizon * static_cast<double>(c) / static_cast<double>(checkpoints));
  b.checkpoint_targets.assign(checkpoints, Tensor({n, d}));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = walks[i].sample;
    s.validate();
    if (s.X.cols() != d) throw ShapeError("forecast: trajectories disagree on dimension");
    for (std::size_t j = 0; j < d; ++j) b.h0.at(i, j) = s.X.at(0, j);
    b.time_offsets.push_back(walks[i].start_hour());
    const losses::CubicSpline spline(walks[i].seconds(), s.X);
    for (std::size_t c = 0; c < checkpoints; ++c) {
      const double t = b.checkpoint_times[c];
      const Tensor x = t <= spline.t_max() ? spline(t) : Tensor({1, d}, s.X.row(s.X.rows() - 1));
      for (std::size_t j = 0; j < d; ++j) b.checkpoint_targets[c].at(i, j) = x[j];
    }
  }
  return b;
}

Batch batch_from_trajectory(const losses::TrajectorySample& s, std::size_t checkpoints) {
  s.validate();
  const std::size_t d = s.X.cols();
  Batch b;
  b.h0 = Tensor({1, d}, s.X.row(0));
  if (checkpoints == 0) {
    for (std::size_t i = 1; i < s.t.size(); ++i) {
      b.checkpoint_times.push_back(s.t[i] - s.t.front());
      b.checkpoint_targets.emplace_back(Tensor({1, d}, s.X.row(i)));
    }
    return b;
  }
  const double span = s.t.back() - s.t.front();
  for (std::size_t c = 1; c <= checkpoints; ++c) {
    const double t = span * static_cast<double>(c) / static_cast<double>(checkpoints);
    b.checkpoint_times.push_back(t);
    b.checkpoint_targets.push_back(losses::cubic_interp(s, s.t.front() + t));
  }
  return b;
}

Splits load_splits(const TrainConfig& c) {
  const auto& d = c.dataset;
  Splits s;
  const std::string* files[3] = {&d.train_file, &d.val_file, &d.test_file};
  const std::size_t sizes[3] = {d.n_train, d.n_val, d.n_test};
  Batch* out[3] = {&s.train, &s.val, &s.test};
  switch (c.task()) {
    case Task::Classification:
      for (int i = 0; i < 3; ++i) {
        *out[i] = batch_from_points(files[i]->empty()
                                        ? data::gen_classification(d.name, sizes[i], derive_seed(d.seed, i))
                                        : data::classification_from_jsonl(read_text(*files[i])));
      }
      {
        // splits must agree on the class count
        std::size_t k = 0;
        for (auto* b : out) k = std::max(k, b->num_classes);
        for (auto* b : out) b->num_classes = k;
      }
      break;
    case Task::Endpoint:
      for (int i = 0; i < 3; ++i) {
        *out[i] = batch_from_pairs(files[i]->empty() ? data::gen_failure_task(d.name, sizes[i], derive_seed(d.seed, i))
                                                     : data::pairs_from_jsonl(read_text(*files[i])));
      }
      break;
    case Task::Forecast:
      if (d.name == "cyclic") {
        losses::TrajectorySample traj;
        if (d.train_file.empty()) {
          traj = data::gen_cyclic(d.periods, d.samples_per_period, d.seed);
        } else {
          const auto walks = data::walks_from_jsonl(read_text(d.train_file));
          if (walks.size() != 1) throw ConfigError("dataset: cyclic file must hold one trajectory");
          traj = walks.front().sample;
        }
        s.train = batch_from_trajectory(traj, c.forecast.checkpoints);
        s.val = s.train;
        s.test = s.train;
        s.horizon = traj.t.back() - traj.t.front();
        if (c.forecast.horizon > 0.0 && c.forecast.horizon != s.horizon)
          throw ConfigError("forecast: cyclic horizon is the data span");
      } else {
        s.home = d.floorplan_file.empty() ? data::default_home_spec()
                                          : data::HomePathSpec::from_json(json::parse(read_text(d.floorplan_file)));
        s.home->validate();
        s.horizon = c.forecast.horizon > 0.0 ? c.forecast.horizon : s.home->max_duration;
        const std::size_t cps = c.forecast.checkpoints > 0 ? c.forecast.checkpoints : 10;
        const auto regime = data::parse_regime(d.regime);
        for (int i = 0; i < 3; ++i) {
          const auto walks = files[i]->empty()
                                 ? data::gen_home_trajectories(*s.home, sizes[i], regime, derive_seed(d.seed, i))
                                 : data::walks_from_jsonl(read_text(*files[i]));
          *out[i] = batch_from_walks(walks, s.horizon, cps);
        }
      }
      break;
  }
  for (auto* b : out)
    if (b->h0.cols() != c.field.data_dim)
      throw ConfigError("dataset: dimension " + std::to_string(b->h0.cols()) + " does not match field data_dim " +
                        std::to_string(c.field.data_dim));
  return s;
}

// ---- forward pass ----

Var readout(ad::ParamBinder& bind, const Var& states) {
  return ad::add(ad::matmul(states, bind(kReadoutW)), bind(kReadoutB));
}

Rollout rollout(const Model& m, ad::ParamBinder& bind, const Batch& b, const ode::SolverSpec& solver,
                std::uint64_t seed) {
  const auto& f = m.field;
  Rollout r;
  r.instances = b.size();
  r.components = f.K();
  r.samples = f.stochastic_heads() ? m.stochastic.samples : 1;
  const std::size_t reps = r.components * r.samples;
  const Var state0 = ad::constant(tile_rows(fields::augment(b.h0, f.augment_dims), reps));

  fields::BindOptions opt;
  opt.seed = seed;
  opt.selection = f.mixture() ? fields::Selection::Conditioned : fields::Selection::Expectation;
  for (std::size_t k = 0; k < reps; ++k)
    opt.time_offsets.insert(opt.time_offsets.end(), b.time_offsets.begin(), b.time_offsets.end());

  r.field = std::make_unique<fields::ModelField>(f, bind, std::move(opt), state0, m.t0);
  r.replay = std::make_unique<ode::ReplayableField>(*r.field, r.field->rng(), m.stochastic.noise_scope);
  ode::SolveOptions so;
  so.checkpoints = b.checkpoint_times;
  r.record = ode::solve_ivp(*r.replay, state0, m.t0, m.t1, solver, so);
  r.field->update_belief(r.record.final_state(), m.t1);
  return r;
}

Var class_probabilities(const Model& m, ad::ParamBinder& bind, const Rollout& r) {
  const Var probs = ad::softmax(readout(bind, r.record.final_state()));
  const auto per = component_means(probs, r.components, r.samples, r.instances);
  if (r.components == 1) return per.front();
  const Var w = component_weights(r, m.t1);
  Var out;
  for (std::size_t k = 0; k < r.components; ++k) {
    Var term = ad::mul(ad::slice_cols(w, k, k + 1), per[k]);
    out = k == 0 ? term : ad::add(out, term);
  }
  return out;
}

LossValue batch_loss(const Model& m, const losses::LossConfig& loss, ad::ParamBinder& bind, const Batch& b,
                     const ode::SolverSpec& solver, std::uint64_t seed) {
  using losses::Term;
  const Rollout r = rollout(m, bind, b, solver, seed);
  const std::size_t d = m.field.data_dim;
  const std::size_t reps = r.components * r.samples;
  losses::LossParts parts;

  auto mixture_at = [&](double t, const Var& states) {
    return losses::moment_match(fields::project(states, d), component_weights(r, t), r.samples,
                                m.stochastic.variance_floor);
  };

  switch (m.task) {
    case Task::Classification: {
      const Var logits = readout(bind, r.record.final_state());
      if (reps == 1) {
        parts.ce = losses::cross_entropy(logits, b.labels);
      } else {
        const auto per = component_means(ad::softmax(logits), r.components, r.samples, r.instances);
        parts.ce = losses::mixture_cross_entropy(component_weights(r, m.t1), per, b.labels);
      }
      break;
    }
    case Task::Endpoint: {
      const Var& end = r.record.final_state();
      if (loss.has(Term::MDL)) parts.mdl = losses::mdl(mixture_at(m.t1, end), b.targets);
      if (loss.has(Term::FL)) {
        if (loss.inner == losses::InnerLoss::MDL) {
          parts.fl = losses::mdl(mixture_at(m.t1, end), b.targets);
        } else {
          const Var pred = fields::project(end, d);
          const Tensor target = tile_rows(b.targets, reps);
          parts.fl = losses::forecast_loss(std::span<const Var>(&pred, 1), std::span<const Tensor>(&target, 1));
        }
      }
      break;
    }
    case Task::Forecast: {
      if (loss.inner == losses::InnerLoss::MDL) {
        std::vector<losses::GaussianMixture> mix;
        for (double t : b.checkpoint_times) mix.push_back(mixture_at(t, state_at(r.record, t)));
        parts.fl = losses::forecast_loss_mdl(mix, b.checkpoint_targets);
      } else {
        std::vector<Var> preds;
        std::vector<Tensor> targets;
        for (std::size_t c = 0; c < b.checkpoint_times.size(); ++c) {
          preds.push_back(fields::project(state_at(r.record, b.checkpoint_times[c]), d));
          targets.push_back(tile_rows(b.checkpoint_targets[c], reps));
        }
        parts.fl = losses::forecast_loss(preds, targets);
      }
      break;
    }
  }
  if (loss.has(Term::TL)) parts.tl = losses::transport_loss(r.record.step_states);
  if (loss.has(Term::DV)) parts.dv = losses::directional_variance_loss(r.record.step_derivatives);

  LossValue out;
  out.total = losses::combined_loss(loss, parts);
  out.nfe = r.record.nfe;
  const std::pair<Term, const std::optional<Var>*> named[] = {
      {Term::MDL, &parts.mdl}, {Term::TL, &parts.tl}, {Term::DV, &parts.dv}, {Term::FL, &parts.fl}, {Term::CE, &parts.ce}};
  for (const auto& [term, part] : named)
    if (loss.has(term) && part->has_value()) out.terms[losses::to_string(term)] = (*part)->value().item();
  out.terms["total"] = out.total.value().item();
  return out;
}

// ---- training ----

json EpochMetrics::to_json() const {
  json terms = json::object();
  for (const auto& [k, v] : loss_terms) terms[k] = v;
  return {{"epoch", epoch},
          {"loss_terms", terms},
          {"nfe", {{"mean", nfe_mean}, {"median", nfe_median}, {"max", nfe_max}}},
          {"val", val}};
}

std::string TrainResult::metrics_jsonl() const {
  std::string out;
  for (const auto& m : metrics) out += m.to_json().dump() + "\n";
  return out;
}

namespace {

double validation_loss(const Model& m, const losses::LossConfig& loss, const Batch& val, std::size_t chunk,
                       std::uint64_t seed) {
  auto& store = const_cast<ad::ParameterStore&>(m.params);  // read-only without a tape
  const auto spec = m.train_solver.spec();
  double total = 0.0;
  const std::size_t n = val.size();
  for (std::size_t start = 0, c = 0; start < n; start += chunk, ++c) {
    std::vector<std::size_t> rows(std::min(chunk, n - start));
    std::iota(rows.begin(), rows.end(), start);
    ad::ParamBinder bind(store, nullptr);
    const auto lv = batch_loss(m, loss, bind, val.subset(rows), spec, derive_seed(seed, c));
    total += lv.total.value().item() * static_cast<double>(rows.size());
  }
  return total / static_cast<double>(n);
}

}  // namespace

TrainResult train_run(const TrainConfig& c, const Splits& splits, const EpochCallback& on_epoch) {
  c.validate();
  TrainResult res;
  Model model = Model::from_config(c, splits);
  model.init_params(c.seed);
  Adam adam(c.adam);
  const auto solver = c.train_solver.spec();
  const Batch& train = splits.train;
  const std::size_t n = train.size();
  if (n == 0) throw ConfigError("training set is empty");

  ad::ParameterStore best = model.params;
  res.best_val = std::numeric_limits<double>::infinity();
  const std::uint64_t val_seed = derive_seed(c.seed, 2'000'000);

  for (std::size_t epoch = 1; epoch <= c.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(derive_seed(c.seed, 1'000'000 + epoch));
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[shuffle.index(i + 1)]);

    EpochMetrics em;
    em.epoch = epoch;
    std::vector<double> nfe;
    nfe.reserve(n);
    const std::uint64_t epoch_seed = derive_seed(c.seed, epoch);
    try {
      for (std::size_t start = 0, bi = 0; start < n; start += c.batch_size, ++bi) {
        const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                            order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + c.batch_size)));
        ad::Tape tape;
        ad::ParamBinder bind(model.params, &tape);
        const auto lv = batch_loss(model, c.loss, bind, train.subset(rows), solver, derive_seed(epoch_seed, bi));
        if (!std::isfinite(lv.total.value().item())) throw NumericalError("non-finite loss");
        tape.backward(lv.total, model.params);
        for (const auto& key : model.params.keys())
          if (!model.params.grad(key).all_finite()) throw NumericalError("non-finite gradient for '" + key + "'");
        adam.step(model.params);
        const double w = static_cast<double>(rows.size()) / static_cast<double>(n);
        for (const auto& [k, v] : lv.terms) em.loss_terms[k] += w * v;
        nfe.insert(nfe.end(), rows.size(), static_cast<double>(lv.nfe));
      }
      em.val = validation_loss(model, c.loss, splits.val, c.batch_size, val_seed);
      if (!std::isfinite(em.val)) throw NumericalError("non-finite validation loss");
    } catch (const NumericalError& e) {
      throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
    }
    em.train_loss = em.loss_terms["total"];
    em.nfe_mean = std::accumulate(nfe.begin(), nfe.end(), 0.0) / static_cast<double>(nfe.size());
    em.nfe_median = median_of(nfe);
    em.nfe_max = *std::max_element(nfe.begin(), nfe.end());
    res.metrics.push_back(em);
    if (on_epoch) on_epoch(em);

    if (em.val < res.best_val) {
      res.best_val = em.val;
      res.best_epoch = epoch;
      best = model.params;
    } else if (epoch - res.best_epoch >= c.patience) {
      res.stopped_early = true;
      break;
    }
  }
  model.params = std::move(best);
  res.model = std::move(model);
  return res;
}

// ---- gradient check ----

double grad_check(ad::ParameterStore& store, const std::function<Var(ad::ParamBinder&)>& loss, double eps,
                  double floor) {
  {
    ad::Tape tape;
    ad::ParamBinder bind(store, &tape);
    tape.backward(loss(bind), store);
  }
  auto eval = [&] {
    ad::ParamBinder bind(store, nullptr);
    return loss(bind).value().item();
  };
  double worst = 0.0;
  for (const auto& key : store.keys()) {
    const Tensor analytic = store.grad(key);
    Tensor& w = store.value(key);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + eps;
      const double up = eval();
      w[i] = orig - eps;
      const double down = eval();
      w[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double scale = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / scale);
    }
  }
  return worst;
}

}  // namespace svfm::train
