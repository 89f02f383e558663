#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "svfm/cli.hpp"
#include "svfm/data.hpp"
#include "svfm/evaluate.hpp"

using namespace svfm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "svfm");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream b;
  b << in.rdbuf();
  return b.str();
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

/// Fresh scratch directory per test case.
struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name) : dir(fs::temp_directory_path() / ("svfm_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string operator/(const std::string& f) const { return (dir / f).string(); }
};

void write(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

const char* kTinyVf = R"({"dataset": {"name": "moons", "n_train": 60, "n_val": 30, "n_test": 30, "seed": 1},
  "field": {"variant": "vf", "data_dim": 2, "hidden_units": 8},
  "loss": {"terms": ["CE"]}, "optimizer": {"epochs": 3, "batch_size": 30}})";

}  // namespace

TEST_CASE("gen: line counts, refusal without --force, byte-identical reruns") {
  Scratch s("gen");
  auto r = run({"gen", "moons", "--n", "1000", "--seed", "4", "--out", s / "a.jsonl"});
  REQUIRE(r.code == 0);
  CHECK(lines(slurp(s / "a.jsonl")) == 1000);
  CHECK(run({"gen", "moons", "--n", "1000", "--seed", "4", "--out", s / "a.jsonl"}).code == 2);
  CHECK(run({"gen", "moons", "--n", "10", "--seed", "4", "--out", s / "a.jsonl", "--force"}).code == 0);
  CHECK(lines(slurp(s / "a.jsonl")) == 10);
  run({"gen", "scaling", "--n", "50", "--seed", "4", "--out", s / "b.jsonl"});
  run({"gen", "scaling", "--n", "50", "--seed", "4", "--out", s / "c.jsonl"});
  CHECK(slurp(s / "b.jsonl") == slurp(s / "c.jsonl"));
  CHECK(run({"gen", "cyclic", "--out", s / "cy.jsonl"}).code == 0);
  CHECK(lines(slurp(s / "cy.jsonl")) == 1);
  CHECK(run({"gen", "spirals", "--out", s / "x.jsonl"}).code == 2);
  CHECK(run({"gen"}).code == 2);
  CHECK(run({"bogus"}).code == 2);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("gen home --regime night: landing near 0.9") {
  Scratch s("home");
  REQUIRE(run({"gen", "home", "--regime", "night", "--n", "4000", "--seed", "2", "--out", s / "h.jsonl"}).code == 0);
  const auto walks = data::walks_from_jsonl(slurp(s / "h.jsonl"));
  double landing = 0.0;
  for (const auto& w : walks) landing += (w.endpoint == "landing") / 4000.0;
  CHECK(std::abs(landing - 0.9) < 3.0 * std::sqrt(0.09 / 4000.0));
}

TEST_CASE("train: outputs, reruns, bad keys, seed override") {
  Scratch s("train");
  write(s / "c.json", kTinyVf);
  auto r = run({"train", "--config", s / "c.json", "--out", s / "r1"});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(s / "r1/model.json"));
  CHECK(lines(slurp(s / "r1/metrics.jsonl")) == 3);
  const auto run_meta = json::parse(slurp(s / "r1/run.json"));
  CHECK(run_meta["config"]["optimizer"]["patience"] == 50);
  CHECK(run_meta["epochs_run"] == 3);

  REQUIRE(run({"train", "--config", s / "c.json", "--out", s / "r2"}).code == 0);
  CHECK(slurp(s / "r1/metrics.jsonl") == slurp(s / "r2/metrics.jsonl"));
  CHECK(slurp(s / "r1/model.json") == slurp(s / "r2/model.json"));
  CHECK(run({"train", "--config", s / "c.json", "--out", s / "r1"}).code == 2);  // exists

  REQUIRE(run({"train", "--config", s / "c.json", "--out", s / "r3", "--seed", "9"}).code == 0);
  CHECK(slurp(s / "r1/model.json") != slurp(s / "r3/model.json"));

  auto j = json::parse(kTinyVf);
  j["field"]["activation"] = "tanh";
  write(s / "bad.json", j.dump());
  r = run({"train", "--config", s / "bad.json", "--out", s / "r4"});
  CHECK(r.code == 2);
  CHECK(r.err.find("activation") != std::string::npos);
  write(s / "broken.json", "{\"dataset\": ");
  CHECK(run({"train", "--config", s / "broken.json", "--out", s / "r5"}).code == 2);
  CHECK(run({"train", "--out", s / "r6"}).code == 2);

  j = json::parse(kTinyVf);
  j["optimizer"]["lr"] = 1e12;
  write(s / "wild.json", j.dump());
  r = run({"train", "--config", s / "wild.json", "--out", s / "r7"});
  CHECK(r.code == 3);
  CHECK(r.err.find("diverged at epoch") != std::string::npos);
}

TEST_CASE("eval and nfe-report") {
  Scratch s("eval");
  write(s / "c.json", kTinyVf);
  REQUIRE(run({"train", "--config", s / "c.json", "--out", s / "a"}).code == 0);
  auto j = json::parse(kTinyVf);
  j["field"]["hidden_units"] = 12;
  write(s / "c2.json", j.dump());
  REQUIRE(run({"train", "--config", s / "c2.json", "--out", s / "b"}).code == 0);
  REQUIRE(run({"gen", "moons", "--n", "40", "--seed", "7", "--out", s / "test.jsonl"}).code == 0);

  auto r = run({"eval", s / "a/model.json", s / "test.jsonl", "--seed", "1"});
  REQUIRE(r.code == 0);
  const auto rep = json::parse(r.out);
  CHECK(rep["n"] == 40);
  CHECK(rep["accuracy"].get<double>() >= 0.0);
  CHECK(rep["nfe"]["min"].get<long>() <= rep["nfe"]["max"].get<long>());
  CHECK(run({"eval", s / "a/model.json", s / "test.jsonl", "--seed", "1"}).out == r.out);

  // dimension mismatch
  REQUIRE(run({"gen", "scaling", "--n", "5", "--out", s / "pairs.jsonl"}).code == 0);
  CHECK(run({"eval", s / "a/model.json", s / "pairs.jsonl"}).code == 2);
  CHECK(run({"nfe-report", s / "a/model.json", "--data", s / "pairs.jsonl", "--out", s / "bad"}).code == 2);

  r = run({"nfe-report", s / "a/model.json", s / "b/model.json", s / "a/model.json", "--data", s / "test.jsonl",
           "--out", s / "rep"});
  REQUIRE(r.code == 0);
  const auto sum = json::parse(slurp(s / "rep/summary.json"));
  REQUIRE(sum["models"].size() == 3);
  CHECK(sum["models"][0]["name"] == "a");
  REQUIRE(sum["comparisons"].size() == 3);

  // raw per-instance lists
  std::map<std::string, std::vector<long>> lists;
  for (const auto& line : data::parse_jsonl(slurp(s / "rep/nfe.jsonl"), "nfe"))
    lists[line["model"].get<std::string>()].push_back(line["nfe"].get<long>());
  REQUIRE(lists.size() == 3);
  const auto& la = lists["a"];
  const auto& lb = lists["b"];
  REQUIRE(la.size() == 40);

  for (const auto& c : sum["comparisons"]) {
    std::size_t total = 0;
    for (const auto& e : c["entries"]) total += e[2].get<std::size_t>();
    CHECK(total == 40);
    if (c["a"] == "a" && c["b"] == "b") {
      long oracle = 0;
      for (std::size_t i = 0; i < 40; ++i) oracle += la[i] - lb[i];
      CHECK(c["savings"].get<long>() == oracle);
    }
    if (c["a"] == "a" && c["b"] != "b") {  // a vs its own copy
      for (const auto& e : c["entries"]) CHECK(e[0] == e[1]);
      CHECK(c["savings"] == 0);
    }
  }
  CHECK(run({"nfe-report", "--data", s / "test.jsonl", "--out", s / "rep2"}).code == 2);
}

TEST_CASE("forecast: deterministic paths, extrapolation flag, schema") {
  Scratch s("forecast");
  write(s / "c.json", R"({"dataset": {"name": "cyclic", "samples_per_period": 10},
    "field": {"variant": "vf", "data_dim": 1, "hidden_units": 8,
              "time_encoding": {"mode": "cyclic", "period_scale": 1.0}},
    "loss": {"terms": ["FL"]}, "optimizer": {"epochs": 3},
    "train_solver": {"method": "rk4", "steps": 10}})");
  REQUIRE(run({"train", "--config", s / "c.json", "--out", s / "m"}).code == 0);
  auto r = run({"forecast", s / "m/model.json", "--start", "0", "--dense", "5", "--out", s / "p1.jsonl"});
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out)["extrapolation"] == false);
  run({"forecast", s / "m/model.json", "--start", "0", "--dense", "5", "--out", s / "p2.jsonl"});
  CHECK(slurp(s / "p1.jsonl") == slurp(s / "p2.jsonl"));
  const auto paths = data::walks_from_jsonl(slurp(s / "p1.jsonl"));
  REQUIRE(paths.size() == 1);
  CHECK(paths[0].sample.t.size() == 6);

  r = run({"forecast", s / "m/model.json", "--start", "0", "--horizon", "31.4", "--out", s / "p3.jsonl"});
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out)["extrapolation"] == true);
  CHECK(r.err.find("extrapolates") != std::string::npos);

  CHECK(run({"forecast", s / "m/model.json", "--start", "0,1", "--out", s / "p4.jsonl"}).code == 2);
  CHECK(run({"forecast", s / "m/model.json", "--start", "0", "--samples", "0", "--out", s / "p5.jsonl"}).code == 2);
}

TEST_CASE("forecast on a home model labels endpoints") {
  Scratch s("homefc");
  write(s / "c.json", R"({"dataset": {"name": "home", "n_train": 20, "n_val": 10, "n_test": 10, "seed": 3},
    "field": {"variant": "svfm", "data_dim": 2, "components": 2, "hidden_units": 8,
              "time_encoding": {"mode": "cyclic", "time_scale": 0.0002777777777777778}},
    "loss": {"terms": ["FL"], "inner": "MDL"}, "optimizer": {"epochs": 2, "batch_size": 10},
    "stochastic": {"samples": 2}, "train_solver": {"method": "rk4", "steps": 5}})");
  REQUIRE(run({"train", "--config", s / "c.json", "--out", s / "m"}).code == 0);
  const auto r = run({"forecast", s / "m/model.json", "--start", "3,2", "--tod", "2", "--samples", "20", "--seed", "5",
                      "--out", s / "p.jsonl"});
  REQUIRE(r.code == 0);
  const auto sum = json::parse(r.out);
  double total = 0.0;
  for (const auto& [k, v] : sum["endpoints"].items()) total += v.get<double>();
  CHECK(total == doctest::Approx(1.0));
  const auto paths = data::walks_from_jsonl(slurp(s / "p.jsonl"));
  CHECK(paths.size() == 20);
  for (const auto& p : paths) CHECK_FALSE(p.endpoint.empty());
  CHECK(paths.front().sample.t.size() == 6);  // stochastic paths sit on the 5-step grid
}
