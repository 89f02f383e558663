// Acceptance runner: one PASS/FAIL line per criterion, exit 1 if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "svfm/cli.hpp"
#include "svfm/evaluate.hpp"
#include "svfm/fields.hpp"
#include "svfm/losses.hpp"
#include "svfm/odesolve.hpp"
#include "svfm/rng.hpp"

using namespace svfm;
using ad::Var;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

train::TrainResult fit(const std::string& config_text, bool verbose) {
  const auto c = train::TrainConfig::from_json(json::parse(config_text));
  const auto s = train::load_splits(c);
  return train::train_run(c, s, [&](const train::EpochMetrics& m) {
    if (verbose && m.epoch % 50 == 0) std::cerr << "    " << m.to_json().dump() << "\n";
  });
}

Var scalar_state(double v) { return ad::constant(Tensor::matrix({{v}})); }

// ---- 1 ----

Outcome solver_correctness() {
  Outcome o;
  ode::LambdaField f([](const Var& y, double) { return y; });
  std::vector<double> x, y;
  for (std::size_t n : {8u, 16u, 32u, 64u, 128u}) {
    const auto rec = ode::solve_ivp(f, scalar_state(1.0), 0.0, 1.0, ode::SolverSpec::rk4(n));
    x.push_back(std::log2(static_cast<double>(n)));
    y.push_back(std::log2(std::abs(rec.final_state().value().item() - std::exp(1.0))));
  }
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / x.size();
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / y.size();
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  const double slope = -sxy / sxx;
  o.detail << "rk4 slope " << slope;
  o.require(std::abs(slope - 4.0) <= 0.3, "slope");

  for (double tol : {1e-4, 1e-6, 1e-8}) {
    ode::StepController c;
    c.abs_tol = c.rel_tol = tol;
    const auto rec = ode::solve_ivp(f, scalar_state(1.0), 0.0, 1.0, ode::SolverSpec::dopri5(c));
    const double err = std::abs(rec.final_state().value().item() - std::exp(1.0));
    o.detail << "; dopri5 tol " << tol << " err " << err;
    o.require(err <= 100 * tol, "dopri5 tolerance");
  }

  ode::LambdaField aligned([](const Var& s, double) {
    Tensor out(s.shape());
    for (std::size_t c = 0; c < out.cols(); ++c) out.at(0, c) = 0.5 - static_cast<double>(c);
    return ad::constant(out);
  });
  const Var y0 = ad::constant(Tensor::matrix({{0.1, 0.2, 0.3}}));
  const auto rec = ode::solve_ivp(aligned, y0, 0.0, 1.0, ode::SolverSpec::dopri5());
  ode::StepController c;
  const auto step = ode::dopri5_step(aligned, y0, 0.0, 1.0, c, aligned(y0, 0.0));
  o.detail << "; aligned: accepted " << rec.accepted << " rejected " << rec.rejected << " error " << step.error_norm;
  o.require(rec.accepted == 1 && rec.rejected == 0 && step.accepted && step.error_norm == 0.0, "aligned one step");
  return o;
}

// ---- 2 ----

Outcome forward_filter_oracle() {
  Outcome o;
  const std::size_t k = 3, steps = 10;
  Rng rng(2024);
  auto positive = [&](std::size_t rows) {
    Tensor t({rows, k});
    for (auto& v : t.values()) v = rng.uniform(0.05, 1.0);
    return t;
  };
  auto normalize_rows = [&](Tensor t) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += t.at(r, j);
      for (std::size_t j = 0; j < k; ++j) t.at(r, j) /= s;
    }
    return t;
  };
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor prior = normalize_rows(positive(1));
    std::vector<Tensor> trans, emis;
    for (std::size_t i = 0; i < steps; ++i) {
      trans.push_back(normalize_rows(positive(k)));
      emis.push_back(positive(1));
    }
    Var belief = ad::constant(prior);
    for (std::size_t i = 0; i < steps; ++i)
      belief = fields::forward_filter_step(belief, ad::constant(trans[i]), ad::constant(emis[i]));

    // textbook forward recursion: alpha_i(z) = sum_z' alpha_{i-1}(z') psi_i(z') Psi_i(z', z)
    std::vector<double> alpha(prior.values().begin(), prior.values().end());
    for (std::size_t i = 0; i < steps; ++i) {
      std::vector<double> next(k, 0.0);
      for (std::size_t from = 0; from < k; ++from)
        for (std::size_t to = 0; to < k; ++to) next[to] += alpha[from] * emis[i][from] * trans[i].at(from, to);
      alpha = next;
    }
    const double z = std::accumulate(alpha.begin(), alpha.end(), 0.0);
    for (std::size_t j = 0; j < k; ++j) worst = std::max(worst, std::abs(belief.value()[j] - alpha[j] / z));
  }
  o.detail << "max abs deviation " << worst;
  o.require(worst < 1e-12, "1e-12");
  return o;
}

// ---- 3 ----

train::DatasetConfig tiny_dataset(const std::string& name, std::size_t n, std::uint64_t seed) {
  train::DatasetConfig d;
  d.name = name;
  d.n_train = d.n_val = d.n_test = n;
  d.seed = seed;
  return d;
}

Outcome gradient_integrity() {
  Outcome o;
  const auto solver = ode::SolverSpec::rk4(5);
  using losses::Term;

  train::TrainConfig c;
  c.dataset = tiny_dataset("moons", 6, 2);
  c.field.variant = fields::Variant::VF;
  c.field.data_dim = 2;
  c.field.hidden_units = 6;
  c.loss.lambda = 0.3;
  const auto s = train::load_splits(c);
  train::Model m = train::Model::from_config(c, s);
  m.init_params(1);
  for (Term t : {Term::CE, Term::TL, Term::DV}) {
    c.loss.terms = t == Term::CE ? std::set<Term>{t} : std::set<Term>{Term::CE, t};
    const double err = train::grad_check(m.params, [&](ad::ParamBinder& b) {
      return train::batch_loss(m, c.loss, b, s.train, solver, 1).total;
    });
    o.detail << to_string(t) << " " << err << "; ";
    o.require(err < 1e-4, to_string(t));
  }

  train::TrainConfig e;
  e.dataset = tiny_dataset("crossing", 5, 3);
  e.field.variant = fields::Variant::VFM;
  e.field.components = 2;
  e.field.data_dim = 1;
  e.field.augment_dims = 1;
  e.field.hidden_units = 5;
  const auto se = train::load_splits(e);
  train::Model me = train::Model::from_config(e, se);
  me.init_params(2);
  for (Term t : {Term::MDL, Term::FL}) {
    e.loss.terms = {t};
    const double err = train::grad_check(me.params, [&](ad::ParamBinder& b) {
      return train::batch_loss(me, e.loss, b, se.train, solver, 1).total;
    });
    o.detail << to_string(t) << " " << err << "; ";
    o.require(err < 1e-4, to_string(t));
  }

  // forecast loss on a trajectory, several checkpoints
  train::TrainConfig f;
  f.dataset.name = "cyclic";
  f.dataset.samples_per_period = 6;
  f.field.variant = fields::Variant::VF;
  f.field.data_dim = 1;
  f.field.hidden_units = 5;
  f.field.time.mode = fields::TimeEncoding::Mode::Cyclic;
  f.loss.terms = {Term::FL};
  const auto sf = train::load_splits(f);
  train::Model mf = train::Model::from_config(f, sf);
  mf.init_params(4);
  {
    Rng rng(5);
    for (const auto& key : mf.params.keys())
      for (auto& v : mf.params.value(key).values()) v += rng.normal(0.0, 0.1);
  }
  const double ferr = train::grad_check(mf.params, [&](ad::ParamBinder& b) {
    return train::batch_loss(mf, f.loss, b, sf.train, ode::SolverSpec::rk4(10), 1).total;
  });
  o.detail << "FL trajectory " << ferr << "; ";
  o.require(ferr < 1e-4, "FL trajectory");

  train::TrainConfig sv;
  sv.dataset = tiny_dataset("scaling", 4, 5);
  sv.field.variant = fields::Variant::SVFM;
  sv.field.components = 2;
  sv.field.data_dim = 1;
  sv.field.augment_dims = 1;
  sv.field.hidden_units = 5;
  sv.field.tau_init = 0.05;
  sv.loss.terms = {Term::MDL, Term::TL};
  sv.stochastic.samples = 2;
  const auto ss = train::load_splits(sv);
  train::Model ms = train::Model::from_config(sv, ss);
  ms.init_params(3);
  {
    Rng rng(11);
    for (const auto& key : ms.params.keys())
      for (auto& v : ms.params.value(key).values()) v += rng.normal(0.0, 0.1);
  }
  ad::ParamBinder probe(ms.params, nullptr);
  const auto r = train::rollout(ms, probe, ss.train, ode::SolverSpec::dopri5({.abs_tol = 1e-7, .rel_tol = 1e-7}), 7);
  const auto frozen = ode::SolverSpec::fixed(r.record.step_times);
  const double serr = train::grad_check(ms.params, [&](ad::ParamBinder& b) {
    return train::batch_loss(ms, sv.loss, b, ss.train, frozen, 7).total;
  });
  o.detail << "SVFM frozen (" << r.record.step_times.size() - 1 << " steps) " << serr;
  o.require(r.record.step_times.size() >= 6, "SVFM >= 5 steps");
  o.require(serr < 1e-3, "SVFM frozen");
  return o;
}

// ---- 4 ----

const char* kSplitVf = R"({"dataset":{"name":"splitting","n_train":500,"n_val":200,"n_test":200,"seed":1},
 "field":{"variant":"vf","data_dim":1,"hidden_layers":1,"hidden_units":32},
 "loss":{"terms":["FL"]},"optimizer":{"lr":0.01,"batch_size":100,"epochs":100},
 "train_solver":{"method":"rk4","steps":8},"seed":1})";

const char* kSplitSvfm = R"({"dataset":{"name":"splitting","n_train":500,"n_val":200,"n_test":200,"seed":1},
 "field":{"variant":"svfm","data_dim":1,"components":2,"hidden_layers":1,"hidden_units":32},
 "loss":{"terms":["MDL"]},"optimizer":{"lr":0.01,"batch_size":100,"epochs":150},
 "stochastic":{"samples":8,"variance_floor":0.001},
 "train_solver":{"method":"rk4","steps":8},"seed":1})";

const char* kCrossVf = R"({"dataset":{"name":"crossing","n_train":500,"n_val":200,"n_test":200,"seed":1},
 "field":{"variant":"vf","data_dim":1,"hidden_layers":1,"hidden_units":32},
 "loss":{"terms":["FL"]},"optimizer":{"lr":0.01,"batch_size":100,"epochs":100},
 "train_solver":{"method":"rk4","steps":8},"seed":1})";

const char* kCrossAvf = R"({"dataset":{"name":"crossing","n_train":500,"n_val":200,"n_test":200,"seed":1},
 "field":{"variant":"avf","augment_dims":1,"data_dim":1,"hidden_layers":1,"hidden_units":32},
 "loss":{"terms":["FL"]},"optimizer":{"lr":0.01,"batch_size":100,"epochs":100},
 "train_solver":{"method":"rk4","steps":8},"seed":1})";

// Augmented: in one dimension the direction is a sign and carries no gradient.
const char* kScaleSvf = R"({"dataset":{"name":"scaling","n_train":500,"n_val":200,"n_test":200,"seed":1},
 "field":{"variant":"svf","augment_dims":1,"data_dim":1,"hidden_layers":1,"hidden_units":32,"tau_length_init":0.1},
 "loss":{"terms":["MDL"]},"optimizer":{"lr":0.001,"batch_size":100,"epochs":120},
 "stochastic":{"samples":16,"variance_floor":0.001},
 "train_solver":{"method":"rk4","steps":8},"seed":1})";

eval::EndpointReport endpoints(const std::string& cfg, bool verbose) {
  const auto r = fit(cfg, verbose);
  const auto name = json::parse(cfg)["dataset"]["name"].get<std::string>();
  return eval::evaluate_endpoints(r.model, data::gen_failure_task(name, 1000, 99), 7);
}

Outcome failure_modes(bool verbose) {
  Outcome o;
  const auto vf = endpoints(kSplitVf, verbose);
  o.detail << "splitting VF mean " << vf.mean << " D " << vf.modes.separation;
  o.require(!vf.modes.bimodal() && std::abs(vf.mean) <= 0.2, "VF unimodal near 0");

  const auto sv = endpoints(kSplitSvfm, verbose);
  o.detail << "; SVFM modes " << sv.modes.low << " (" << sv.modes.low_weight << ") " << sv.modes.high << " ("
           << sv.modes.high_weight << ") D " << sv.modes.separation;
  o.require(sv.modes.bimodal(), "SVFM bimodal");
  o.require(std::abs(sv.modes.low + 1.0) <= 0.15 && std::abs(sv.modes.high - 1.0) <= 0.15, "SVFM modes at +-1");
  for (double w : {sv.modes.low_weight, sv.modes.high_weight}) o.require(w >= 0.35 && w <= 0.65, "SVFM weights");

  const auto cv = endpoints(kCrossVf, verbose);
  const auto ca = endpoints(kCrossAvf, verbose);
  o.detail << "; crossing rel error VF " << cv.relative_error << " A-VF " << ca.relative_error;
  o.require(cv.relative_error > 0.25, "VF fails crossing");
  o.require(ca.relative_error < 0.05, "A-VF solves crossing");

  const auto sc = endpoints(kScaleSvf, verbose);
  o.detail << "; scaling SVF std " << sc.stddev << " (target 0.25)";
  o.require(std::abs(sc.stddev - 0.25) <= 0.3 * 0.25, "scaling std");
  return o;
}

// ---- 5 ----

std::string moons_config(const std::string& variant, bool regularized) {
  json j = json::parse(R"({"dataset":{"name":"moons","n_train":500,"n_val":200,"n_test":200,"seed":1},
    "field":{"data_dim":2,"hidden_layers":1,"hidden_units":32},
    "loss":{"terms":["CE"]},"optimizer":{"lr":0.01,"batch_size":100,"epochs":60},
    "train_solver":{"method":"rk4","steps":8},"seed":1})");
  j["field"]["variant"] = variant;
  if (variant == "svfm") {
    j["field"]["components"] = 2;
    j["stochastic"] = {{"samples", 4}};
  }
  if (regularized) j["loss"] = {{"terms", {"CE", "TL", "DV"}}, {"lambda", 0.1}};
  return j.dump();
}

Outcome nfe_direction(bool verbose) {
  Outcome o;
  const auto test = data::gen_classification("moons", 1000, 99);
  std::vector<eval::NfeSummary> sums;
  for (const auto& [variant, reg, label] : std::vector<std::tuple<std::string, bool, std::string>>{
           {"vf", false, "VF"}, {"vf", true, "VF+TL/DV"}, {"svfm", true, "SVFM"}}) {
    const auto r = fit(moons_config(variant, reg), verbose);
    const auto rep = eval::evaluate_classification(r.model, test, 7);
    sums.push_back(eval::summarize(rep.nfe));
    o.detail << label << " acc " << rep.accuracy << " nfe mean " << sums.back().mean << " median "
             << sums.back().median << " max " << sums.back().max << "; ";
  }
  o.detail << "reference: max 26, mean/median ~17";
  o.require(sums[0].mean >= sums[1].mean && sums[1].mean >= sums[2].mean, "ordering");
  o.require(sums[2].mean <= 0.85 * sums[0].mean, "SVFM 15% below VF");
  return o;
}

// ---- 6 ----

Outcome loss_identities() {
  Outcome o;
  Rng rng(6);
  auto random_row = [&](std::size_t d) {
    Tensor t({4, d});
    for (auto& v : t.values()) v = rng.uniform(-2.0, 2.0);
    return t;
  };
  double still = 0.0, aligned = 0.0, equality = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 1 + rng.index(4), n = 2 + rng.index(10);
    const Tensor a = random_row(d), b = random_row(d);
    std::vector<Var> same(n, ad::constant(a));
    still = std::max(still, std::abs(losses::transport_loss(same).value().item()));
    aligned = std::max(aligned, std::abs(losses::directional_variance_loss(same).value().item()));

    // n equal segments from a to b: TL * n == ||b - a||^2 / n
    std::vector<Var> line;
    for (std::size_t i = 0; i <= n; ++i) {
      Tensor p(a.shape());
      for (std::size_t j = 0; j < p.size(); ++j) p[j] = a[j] + (b[j] - a[j]) * static_cast<double>(i) / n;
      line.push_back(ad::constant(p));
    }
    double d2 = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) d2 += (b[j] - a[j]) * (b[j] - a[j]);
    d2 /= static_cast<double>(a.rows());
    const double tl = losses::transport_loss(line).value().item();
    equality = std::max(equality, std::abs(tl * n - d2 / n));
  }
  o.detail << "TL stationary " << still << "; DV aligned " << aligned << "; TL equality gap " << equality;
  o.require(still == 0.0, "TL stationary");
  o.require(aligned <= 1e-12, "DV aligned");
  o.require(equality <= 1e-10, "TL equality");
  return o;
}

// ---- 7 ----

std::string cyclic_config(const std::string& mode) {
  json j = json::parse(R"({"dataset":{"name":"cyclic","periods":1,"samples_per_period":40,"seed":1},
    "field":{"variant":"vf","data_dim":1,"hidden_layers":1,"hidden_units":32,
             "time_encoding":{"period_scale":1.0}},
    "loss":{"terms":["FL"]},"optimizer":{"lr":0.01,"batch_size":100,"epochs":1500,"patience":1500},
    "train_solver":{"method":"rk4","steps":64},"seed":1})");
  j["field"]["time_encoding"]["mode"] = mode;
  return j.dump();
}

double predict_at_10pi(const train::Model& m) {
  eval::ForecastRequest q;
  q.start = Tensor({1, 1}, std::vector<double>{data::cyclic_g(0.0)});
  q.horizon = 10.0 * std::numbers::pi;
  q.dense = 1;
  return eval::sample_paths(m, q, 1).front().X.values().back();
}

Outcome cyclic_continuation(bool verbose) {
  Outcome o;
  const double target = data::cyclic_g(10.0 * std::numbers::pi);
  const double cyc = std::abs(predict_at_10pi(fit(cyclic_config("cyclic"), verbose).model) - target);
  const double sca = std::abs(predict_at_10pi(fit(cyclic_config("scalar"), verbose).model) - target);
  o.detail << "g(10pi) " << target << "; abs error cyclic " << cyc << " scalar " << sca;
  o.require(cyc < 0.3, "cyclic < 0.3");
  o.require(sca > 1.0, "scalar > 1.0");
  return o;
}

// ---- 8 ----

const char* kHome = R"({"dataset":{"name":"home","n_train":1000,"n_val":200,"n_test":200,"seed":1,"regime":"mixed"},
 "field":{"variant":"svfm","data_dim":2,"components":4,"hidden_layers":1,"hidden_units":32,
          "time_encoding":{"mode":"cyclic","time_scale":0.0002777777777777778}},
 "loss":{"terms":["FL"],"inner":"MDL"},"optimizer":{"lr":0.001,"batch_size":100,"epochs":400},
 "stochastic":{"samples":4},"train_solver":{"method":"rk4","steps":10},"seed":1})";

Outcome behavioural_conditioning(bool verbose) {
  Outcome o;
  const auto c = train::TrainConfig::from_json(json::parse(kHome));
  const auto s = train::load_splits(c);
  const auto r = train::train_run(c, s, [&](const train::EpochMetrics& m) {
    if (verbose && m.epoch % 50 == 0) std::cerr << "    " << m.to_json().dump() << "\n";
  });
  for (const auto& [label, tod] : std::vector<std::pair<std::string, double>>{{"night", 2.0}, {"day", 12.0}}) {
    eval::ForecastRequest q;
    q.start = Tensor({1, 2}, std::vector<double>{s.home->origin[0], s.home->origin[1]});
    q.horizon = s.horizon;
    q.tod = tod;
    q.samples = 1000;
    q.dense = 10;
    const auto paths = eval::sample_paths(r.model, q, 5, &*s.home);
    std::map<std::string, double> frac;
    for (const auto& e : s.home->endpoints) frac[e.name] = 0.0;
    for (const auto& p : paths) frac[p.endpoint] += 1.0 / paths.size();
    o.detail << label << " (" << tod << "h):";
    for (const auto& [k, v] : frac) o.detail << " " << k << " " << v;
    o.detail << "; ";
    if (label == "night") {
      o.require(frac["landing"] >= 0.8 && frac["landing"] <= 0.97, "night landing");
    } else {
      for (const auto& [k, v] : frac) o.require(v >= 0.15 && v <= 0.35, "day " + k);
    }
  }
  return o;
}

// ---- 9 ----

struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name) : dir(fs::temp_directory_path() / name) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream b;
  b << in.rdbuf();
  return b.str();
}

// Runs every subcommand into `dir`; returns stdout per command plus every file's bytes.
std::map<std::string, std::string> cli_session(const fs::path& dir) {
  std::map<std::string, std::string> outputs;
  auto run = [&](const std::string& tag, std::vector<std::string> args) {
    args.insert(args.begin(), "svfm");
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (code != 0) throw std::runtime_error(tag + " exited with " + std::to_string(code) + ": " + err.str());
    outputs["stdout:" + tag] = out.str();
  };
  const auto p = [&](const std::string& f) { return (dir / f).string(); };
  std::ofstream(p("vf.json")) << R"({"dataset":{"name":"moons","n_train":100,"n_val":50,"n_test":50,"seed":1},
    "field":{"variant":"vf","data_dim":2,"hidden_units":8},"loss":{"terms":["CE","TL","DV"]},
    "optimizer":{"epochs":5,"batch_size":50}})";
  std::ofstream(p("svfm.json")) << R"({"dataset":{"name":"moons","n_train":100,"n_val":50,"n_test":50,"seed":1},
    "field":{"variant":"svfm","data_dim":2,"components":2,"hidden_units":8},"loss":{"terms":["CE"]},
    "optimizer":{"epochs":5,"batch_size":50},"stochastic":{"samples":2},"train_solver":{"method":"rk4","steps":5}})";
  std::ofstream(p("home.json")) << R"({"dataset":{"name":"home","n_train":20,"n_val":10,"n_test":10,"seed":3},
    "field":{"variant":"svfm","data_dim":2,"components":2,"hidden_units":8,
             "time_encoding":{"mode":"cyclic","time_scale":0.0002777777777777778}},
    "loss":{"terms":["FL"],"inner":"MDL"},"optimizer":{"epochs":2,"batch_size":10},
    "stochastic":{"samples":2},"train_solver":{"method":"rk4","steps":5}})";

  for (const char* name : {"moons", "circles", "xor", "splitting", "crossing", "scaling"})
    run(std::string("gen ") + name, {"gen", name, "--n", "200", "--seed", "3", "--out", p(std::string(name) + ".jsonl")});
  run("gen cyclic", {"gen", "cyclic", "--out", p("cyclic.jsonl")});
  run("gen home", {"gen", "home", "--regime", "mixed", "--n", "50", "--seed", "3", "--out", p("home.jsonl")});
  run("train vf", {"train", "--config", p("vf.json"), "--out", p("vf")});
  run("train svfm", {"train", "--config", p("svfm.json"), "--out", p("svfm")});
  run("train home", {"train", "--config", p("home.json"), "--out", p("home")});
  run("eval vf", {"eval", p("vf/model.json"), p("moons.jsonl"), "--seed", "2"});
  run("eval svfm", {"eval", p("svfm/model.json"), p("moons.jsonl"), "--seed", "2"});
  run("forecast", {"forecast", p("home/model.json"), "--start", "3,2", "--tod", "2", "--samples", "20", "--seed",
                   "5", "--out", p("paths.jsonl")});
  run("nfe-report", {"nfe-report", p("vf/model.json"), p("svfm/model.json"), "--data", p("moons.jsonl"), "--seed",
                     "2", "--out", p("nfe")});
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) outputs["file:" + fs::relative(e.path(), dir).string()] = slurp(e.path());
  return outputs;
}

Outcome determinism() {
  Outcome o;
  Scratch a("svfm_acceptance_a"), b("svfm_acceptance_b");
  auto first = cli_session(a.dir);
  auto second = cli_session(b.dir);
  // stdout may echo the output directory; normalize it away
  for (auto* m : {&first, &second}) {
    const std::string root = (m == &first ? a.dir : b.dir).string();
    for (auto& [k, v] : *m) {
      for (std::size_t pos = v.find(root); pos != std::string::npos; pos = v.find(root, pos)) v.replace(pos, root.size(), "<dir>");
    }
  }
  std::size_t differing = 0;
  for (const auto& [k, v] : first) {
    const auto it = second.find(k);
    if (it == second.end() || it->second != v) {
      ++differing;
      o.detail << "differs: " << k << "; ";
    }
  }
  o.detail << first.size() << " outputs compared, " << differing << " differ";
  o.require(differing == 0 && first.size() == second.size(), "byte-identical");
  return o;
}

struct Criterion {
  int id;
  std::string name;
  double budget_s;  // 0: none
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Runs the acceptance criteria and prints one PASS/FAIL line each."};
  std::vector<int> only;
  bool verbose = false;
  app.add_option("--only", only, "criterion ids to run (default: all)")->delimiter(',')->check(CLI::Range(1, 9));
  app.add_flag("-v,--verbose", verbose, "training progress to stderr");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all{
      {1, "solver correctness", 5, solver_correctness},
      {2, "forward-filter oracle", 1, forward_filter_oracle},
      {3, "gradient integrity", 60, gradient_integrity},
      {4, "failure-mode separation", 600, [&] { return failure_modes(verbose); }},
      {5, "NFE reduction direction", 900, [&] { return nfe_direction(verbose); }},
      {6, "transport/variance identities", 0, loss_identities},
      {7, "cyclic continuation", 300, [&] { return cyclic_continuation(verbose); }},
      {8, "behavioural conditioning", 1200, [&] { return behavioural_conditioning(verbose); }},
      {9, "determinism", 0, determinism},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failures = 0;
  for (const auto& c : all) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    const double secs = seconds_since(t0);
    if (c.budget_s > 0 && secs > c.budget_s) {
      o.pass = false;
      o.detail << " [over runtime budget " << c.budget_s << " s]";
    }
    failures += !o.pass;
    std::printf("%s %d %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name.c_str(), secs,
                o.detail.str().c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
