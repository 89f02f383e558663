#include "svfm/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "svfm/data.hpp"
#include "svfm/errors.hpp"
#include "svfm/evaluate.hpp"
#include "svfm/train.hpp"

namespace svfm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
  bool force = false;
  std::string config;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void check_writable(const fs::path& p, bool force) {
  if (fs::exists(p) && !force) throw ConfigError("'" + p.string() + "' exists (use --force to overwrite)");
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + p.string() + "'");
  out << text;
  if (!out) throw ConfigError("write failed for '" + p.string() + "'");
}

train::Model load_model(const std::string& path) { return train::Model::from_json(read_file(path)); }

void check_dim(const train::Model& m, std::size_t cols, const std::string& what) {
  if (cols != m.field.data_dim)
    throw ConfigError(what + ": data dimension " + std::to_string(cols) + " does not match the model (" +
                      std::to_string(m.field.data_dim) + ")");
}

/// Re-reads a file written by this process and parses it back.
void verify_jsonl(const fs::path& p, const std::string& kind) {
  const std::string text = read_file(p.string());
  if (kind == "classification") {
    data::classification_from_jsonl(text);
  } else if (kind == "pairs") {
    data::pairs_from_jsonl(text);
  } else {
    data::walks_from_jsonl(text);
  }
}

data::HomePathSpec home_spec(const std::string& floorplan) {
  auto s = floorplan.empty() ? data::default_home_spec() : data::HomePathSpec::from_json(json::parse(read_file(floorplan)));
  s.validate();
  return s;
}

// ---- gen ----

struct GenArgs {
  std::string name;
  std::size_t n = 1000;
  std::string regime = "mixed";
  std::size_t periods = 1;
  std::size_t samples_per_period = 40;
  std::string floorplan;
};

int cmd_gen(const GenArgs& a, const Globals& g, std::ostream& out) {
  if (g.out.empty()) throw ConfigError("gen: --out is required");
  const fs::path path(g.out);
  check_writable(path, g.force);
  std::string text, kind;
  const auto task = train::task_for_dataset(a.name);
  if (task == train::Task::Classification) {
    text = data::classification_to_jsonl(data::gen_classification(a.name, a.n, g.seed));
    kind = "classification";
  } else if (task == train::Task::Endpoint) {
    text = data::pairs_to_jsonl(data::gen_failure_task(a.name, a.n, g.seed));
    kind = "pairs";
  } else if (a.name == "cyclic") {
    data::HomeWalk w;
    w.sample = data::gen_cyclic(a.periods, a.samples_per_period, g.seed);
    text = data::walks_to_jsonl({w});
    kind = "walks";
  } else {
    text = data::walks_to_jsonl(data::gen_home_trajectories(home_spec(a.floorplan), a.n,
                                                            data::parse_regime(a.regime), g.seed));
    kind = "walks";
  }
  write_file(path, text);
  verify_jsonl(path, kind);
  out << json{{"dataset", a.name}, {"path", path.string()}, {"seed", g.seed}}.dump() << "\n";
  return Ok;
}

// ---- train ----

int cmd_train(const Globals& g, std::ostream& out, std::ostream& err) {
  if (g.config.empty()) throw ConfigError("train: --config is required");
  train::TrainConfig c;
  try {
    c = train::TrainConfig::from_json(json::parse(read_file(g.config)));
  } catch (const json::exception& e) {
    throw ConfigError("config: " + std::string(e.what()));
  }
  if (g.seed_given) c.seed = g.seed;
  const std::string dir = !g.out.empty() ? g.out : c.output_dir;
  if (dir.empty()) throw ConfigError("train: give --out or output_dir in the config");
  const fs::path model_path = fs::path(dir) / "model.json";
  const fs::path metrics_path = fs::path(dir) / "metrics.jsonl";
  const fs::path run_path = fs::path(dir) / "run.json";
  for (const auto& p : {model_path, metrics_path, run_path}) check_writable(p, g.force);

  const auto splits = train::load_splits(c);
  const auto r = train::train_run(c, splits, [&](const train::EpochMetrics& m) {
    err << "epoch " << m.epoch << " loss " << m.train_loss << " val " << m.val << "\n";
  });
  write_file(model_path, r.model.to_json());
  write_file(metrics_path, r.metrics_jsonl());
  const json run = {{"config", c.to_json()},
                    {"epochs_run", r.metrics.size()},
                    {"best_epoch", r.best_epoch},
                    {"best_val", r.best_val},
                    {"stopped_early", r.stopped_early}};
  write_file(run_path, run.dump(2) + "\n");
  train::Model::from_json(read_file(model_path.string()));
  out << json{{"model", model_path.string()}, {"best_epoch", r.best_epoch}, {"best_val", r.best_val}}.dump() << "\n";
  return Ok;
}

// ---- eval ----

train::Batch forecast_batch(const train::Model& m, const std::vector<data::HomeWalk>& walks) {
  if (m.dataset == "cyclic") {
    if (walks.size() != 1) throw ConfigError("eval: cyclic data holds one trajectory");
    return train::batch_from_trajectory(walks.front().sample, m.forecast.checkpoints);
  }
  return train::batch_from_walks(walks, m.t1 - m.t0, m.forecast.checkpoints);
}

json modes_json(const eval::Modes& md) {
  return {{"low", md.low},
          {"high", md.high},
          {"low_weight", md.low_weight},
          {"high_weight", md.high_weight},
          {"separation", md.separation},
          {"bimodal", md.bimodal()}};
}

json nfe_json(const std::vector<long>& nfe) {
  const auto s = eval::summarize(nfe);
  return {{"mean", s.mean}, {"median", s.median}, {"min", s.min}, {"max", s.max}};
}

int cmd_eval(const std::string& model_path, const std::string& data_path, const Globals& g, std::ostream& out) {
  const auto m = load_model(model_path);
  if (!g.out.empty()) check_writable(g.out, g.force);
  const std::string text = read_file(data_path);
  json rep = {{"model", model_path}, {"data", data_path}, {"task", train::to_string(m.task)}, {"seed", g.seed}};
  switch (m.task) {
    case train::Task::Classification: {
      const auto d = data::classification_from_jsonl(text);
      check_dim(m, d.x.cols(), "eval");
      const auto r = eval::evaluate_classification(m, d, g.seed);
      rep["n"] = d.size();
      rep["accuracy"] = r.accuracy;
      rep["nfe"] = nfe_json(r.nfe);
      break;
    }
    case train::Task::Endpoint: {
      const auto d = data::pairs_from_jsonl(text);
      check_dim(m, d.start.cols(), "eval");
      const auto r = eval::evaluate_endpoints(m, d, g.seed);
      rep["n"] = d.size();
      rep["mean"] = r.mean;
      rep["stddev"] = r.stddev;
      rep["relative_error"] = r.relative_error;
      rep["squared_error"] = r.squared_error;
      rep["modes"] = modes_json(r.modes);
      break;
    }
    case train::Task::Forecast: {
      const auto walks = data::walks_from_jsonl(text);
      const auto b = forecast_batch(m, walks);
      check_dim(m, b.h0.cols(), "eval");
      rep["n"] = b.size();
      rep["forecast_error"] = eval::forecast_error(m, b, g.seed);
      break;
    }
  }
  const std::string s = rep.dump(2) + "\n";
  if (!g.out.empty()) write_file(g.out, s);
  out << s;
  return Ok;
}

// ---- forecast ----

struct ForecastArgs {
  std::string model;
  std::vector<double> start;
  double t0 = 0.0;
  double horizon = 0.0;  // 0: the trained interval
  double tod = 0.0;
  std::size_t samples = 1;
  std::size_t dense = 50;
  std::string floorplan;
};

int cmd_forecast(const ForecastArgs& a, const Globals& g, std::ostream& out, std::ostream& err) {
  const auto m = load_model(a.model);
  if (m.task != train::Task::Forecast) throw ConfigError("forecast: model is not a forecaster");
  if (g.out.empty()) throw ConfigError("forecast: --out is required");
  check_writable(g.out, g.force);
  check_dim(m, a.start.size(), "forecast: --start");
  eval::ForecastRequest q;
  q.start = Tensor({1, a.start.size()}, a.start);
  q.t0 = a.t0;
  q.horizon = a.horizon > 0.0 ? a.horizon : m.t1 - m.t0;
  q.tod = a.tod;
  q.samples = a.samples;
  q.dense = a.dense;
  const double tol = 1e-9 * std::max(1.0, std::abs(m.t1));
  const bool extrapolation = q.t0 < m.t0 - tol || q.t0 + q.horizon > m.t1 + tol;
  if (extrapolation)
    err << "warning: [" << q.t0 << ", " << q.t0 + q.horizon << "] extrapolates beyond the trained interval [" << m.t0
        << ", " << m.t1 << "]\n";
  std::optional<data::HomePathSpec> home;
  if (m.dataset == "home") home = home_spec(a.floorplan);
  const auto paths = eval::sample_paths(m, q, g.seed, home ? &*home : nullptr);
  write_file(g.out, eval::paths_to_jsonl(paths));
  verify_jsonl(g.out, "walks");

  json summary = {{"path", g.out}, {"samples", paths.size()}, {"extrapolation", extrapolation}};
  if (home) {
    std::map<std::string, double> freq;
    for (const auto& e : home->endpoints) freq[e.name] = 0.0;
    for (const auto& p : paths) freq[p.endpoint] += 1.0 / static_cast<double>(paths.size());
    summary["endpoints"] = freq;
  }
  out << summary.dump() << "\n";
  return Ok;
}

// ---- nfe-report ----

std::vector<long> instance_nfe(const train::Model& m, const std::string& text, std::uint64_t seed) {
  Tensor h0;
  std::vector<double> offsets;
  switch (m.task) {
    case train::Task::Classification:
      h0 = data::classification_from_jsonl(text).x;
      break;
    case train::Task::Endpoint:
      h0 = data::pairs_from_jsonl(text).start;
      break;
    case train::Task::Forecast: {
      const auto b = forecast_batch(m, data::walks_from_jsonl(text));
      h0 = b.h0;
      offsets = b.time_offsets;
      break;
    }
  }
  check_dim(m, h0.cols(), "nfe-report");
  const auto res = eval::solve_instances(m, h0, offsets, m.t0, m.t1, m.eval_solver.spec(), seed);
  std::vector<long> nfe;
  for (const auto& r : res.records) nfe.push_back(r.nfe);
  return nfe;
}

int cmd_nfe_report(const std::vector<std::string>& models, const std::string& data_path, const Globals& g,
                   std::ostream& out) {
  if (models.empty()) throw ConfigError("nfe-report: give at least one model");
  if (g.out.empty()) throw ConfigError("nfe-report: --out is required");
  const fs::path lists = fs::path(g.out) / "nfe.jsonl";
  const fs::path summary_path = fs::path(g.out) / "summary.json";
  check_writable(lists, g.force);
  check_writable(summary_path, g.force);

  const std::string text = read_file(data_path);
  std::vector<std::string> names;
  std::vector<std::vector<long>> nfe;
  for (const auto& path : models) {
    std::string name = fs::path(path).parent_path().filename().string();
    if (name.empty() || fs::path(path).filename() != "model.json") name = fs::path(path).stem().string();
    if (std::find(names.begin(), names.end(), name) != names.end()) name = path;
    names.push_back(name);
    nfe.push_back(instance_nfe(load_model(path), text, g.seed));
  }

  std::string jl;
  for (std::size_t k = 0; k < names.size(); ++k)
    for (std::size_t i = 0; i < nfe[k].size(); ++i)
      jl += json{{"model", names[k]}, {"instance", i}, {"nfe", nfe[k][i]}}.dump() + "\n";

  json summary = {{"data", data_path}, {"seed", g.seed}, {"models", json::array()}, {"comparisons", json::array()}};
  for (std::size_t k = 0; k < names.size(); ++k) {
    json s = nfe_json(nfe[k]);
    s["name"] = names[k];
    s["path"] = models[k];
    s["instances"] = nfe[k].size();
    summary["models"].push_back(s);
  }
  for (std::size_t a = 0; a < names.size(); ++a)
    for (std::size_t b = a + 1; b < names.size(); ++b) {
      const auto c = eval::compare_nfe(names[a], nfe[a], names[b], nfe[b]);
      json entries = json::array();
      for (std::size_t i = 0; i < c.counts.size(); ++i)
        for (std::size_t j = 0; j < c.counts[i].size(); ++j)
          if (c.counts[i][j] > 0) entries.push_back({i, j, c.counts[i][j]});
      summary["comparisons"].push_back({{"a", c.a},
                                        {"b", c.b},
                                        {"size", c.counts.size()},
                                        {"entries", entries},
                                        {"savings", c.savings},
                                        {"fraction_saved", c.fraction_saved},
                                        {"fraction_equal", c.fraction_equal}});
    }
  write_file(lists, jl);
  write_file(summary_path, summary.dump(2) + "\n");
  out << json{{"nfe", lists.string()}, {"summary", summary_path.string()}}.dump() << "\n";
  return Ok;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"stochastic vector field mixtures", "svfm"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "random seed");
  app.add_option("--out", g.out, "output file or directory");
  app.add_flag("--force", g.force, "overwrite existing outputs");
  app.add_option("--config", g.config, "run configuration (train)");

  GenArgs ga;
  auto* gen = app.add_subcommand("gen", "generate a dataset as JSON lines");
  gen->add_option("name", ga.name, "moons|circles|xor|crossing|splitting|scaling|cyclic|home")->required();
  gen->add_option("--n", ga.n, "instances");
  gen->add_option("--regime", ga.regime, "home: day|night|mixed");
  gen->add_option("--periods", ga.periods, "cyclic: periods of 2 pi");
  gen->add_option("--samples-per-period", ga.samples_per_period, "cyclic: knots per period");
  gen->add_option("--floorplan", ga.floorplan, "home: floor plan JSON");

  auto* tr = app.add_subcommand("train", "train a model from --config");

  std::string model_path, data_path;
  auto* ev = app.add_subcommand("eval", "evaluate a model on a dataset");
  ev->add_option("model", model_path)->required();
  ev->add_option("data", data_path)->required();

  ForecastArgs fa;
  auto* fc = app.add_subcommand("forecast", "sample trajectories from a forecasting model");
  fc->add_option("model", fa.model)->required();
  fc->add_option("--start", fa.start, "start state, comma separated")->required()->delimiter(',');
  fc->add_option("--t0", fa.t0, "start time");
  fc->add_option("--horizon", fa.horizon, "integration length (default: trained interval)");
  fc->add_option("--tod", fa.tod, "time of day in hours");
  fc->add_option("--samples", fa.samples, "sampled paths");
  fc->add_option("--dense", fa.dense, "checkpoints per path (adaptive solves)");
  fc->add_option("--floorplan", fa.floorplan, "home: floor plan JSON for endpoint labels");

  std::vector<std::string> models;
  auto* nr = app.add_subcommand("nfe-report", "per-instance NFE lists and pairwise comparisons");
  nr->add_option("models", models)->required();
  nr->add_option("--data", data_path)->required();

  std::vector<std::string> argv(args.rbegin(), args.rend());
  if (!argv.empty()) argv.pop_back();  // program name
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? Ok : BadConfig;
  }
  g.seed_given = app.count("--seed") > 0;

  try {
    if (*gen) return cmd_gen(ga, g, out);
    if (*tr) return cmd_train(g, out, err);
    if (*ev) return cmd_eval(model_path, data_path, g, out);
    if (*fc) return cmd_forecast(fa, g, out, err);
    if (*nr) return cmd_nfe_report(models, data_path, g, out);
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << "\n";
    return NumericalFailure;
  } catch (const std::invalid_argument& e) {  // ConfigError, ShapeError
    err << "error: " << e.what() << "\n";
    return BadConfig;
  } catch (const std::domain_error& e) {
    err << "error: " << e.what() << "\n";
    return BadConfig;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return BadConfig;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return BadConfig;
  }
  return BadConfig;
}

}  // namespace svfm::cli
