#include "svfm/data.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "svfm/errors.hpp"
#include "svfm/json_util.hpp"
#include "svfm/rng.hpp"

namespace svfm::data {

using nlohmann::json;
namespace ju = json_util;

// ---- classification ----

void LabelledPoints::validate() const {
  if (x.rank() != 2 || x.rows() != y.size()) throw ConfigError("points: x must have one row per label");
  if (!x.all_finite()) throw ConfigError("points: non-finite coordinate");
  for (std::size_t label : y)
    if (label >= num_classes) throw ConfigError("points: label " + std::to_string(label) + " out of range");
}

LabelledPoints gen_classification(const std::string& name, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ConfigError("gen: n must be at least 1");
  Rng rng(seed);
  LabelledPoints d{Tensor({n, 2}), std::vector<std::size_t>(n), 2};
  constexpr double pi = std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    double px = 0.0, py = 0.0;
    std::size_t label = 0;
    if (name == "moons") {
      label = i % 2;
      const double th = rng.uniform(0.0, pi);
      px = label == 0 ? std::cos(th) : 1.0 - std::cos(th);
      py = label == 0 ? std::sin(th) : 0.5 - std::sin(th);
      px += rng.normal(0.0, 0.1);
      py += rng.normal(0.0, 0.1);
    } else if (name == "circles") {
      label = i % 2;
      const double r = label == 0 ? 1.0 : 2.0;
      const double th = rng.uniform(0.0, 2 * pi);
      px = r * std::cos(th) + rng.normal(0.0, 0.1);
      py = r * std::sin(th) + rng.normal(0.0, 0.1);
    } else if (name == "xor") {
      const double cx = (i % 4) < 2 ? 1.0 : -1.0;
      const double cy = (i % 2) == 0 ? 1.0 : -1.0;
      label = cx * cy > 0 ? 1 : 0;
      const double s = std::sqrt(0.05);
      px = cx + rng.normal(0.0, s);
      py = cy + rng.normal(0.0, s);
    } else {
      throw ConfigError("unknown classification dataset '" + name + "' (moons, circles, xor)");
    }
    d.x.at(i, 0) = px;
    d.x.at(i, 1) = py;
    d.y[i] = label;
  }
  return d;
}

// ---- failure tasks ----

void EndpointPairs::validate() const {
  if (start.rank() != 2 || start.shape() != target.shape()) throw ConfigError("pairs: start and target shapes differ");
  if (!start.all_finite() || !target.all_finite()) throw ConfigError("pairs: non-finite value");
}

EndpointPairs gen_failure_task(const std::string& name, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ConfigError("gen: n must be at least 1");
  Rng rng(seed);
  EndpointPairs d{Tensor({n, 1}), Tensor({n, 1})};
  for (std::size_t i = 0; i < n; ++i) {
    if (name == "crossing") {
      d.start[i] = i % 2 == 0 ? -1.0 : 1.0;
      d.target[i] = -d.start[i];
    } else if (name == "splitting") {
      d.start[i] = 0.0;
      d.target[i] = rng.uniform() < 0.5 ? -1.0 : 1.0;
    } else if (name == "scaling") {
      d.start[i] = 0.0;
      d.target[i] = rng.normal(1.0, 0.25);
    } else {
      throw ConfigError("unknown failure task '" + name + "' (crossing, splitting, scaling)");
    }
  }
  return d;
}

// ---- cyclic ----

double cyclic_g(double t) { return std::sin(t) + t / 10.0; }

losses::TrajectorySample gen_cyclic(std::size_t n_periods, std::size_t samples_per_period, std::uint64_t seed) {
  (void)seed;
  if (n_periods == 0 || samples_per_period == 0) throw ConfigError("gen: cyclic counts must be positive");
  const std::size_t n = n_periods * samples_per_period + 1;
  losses::TrajectorySample s{std::vector<double>(n), Tensor({n, 1})};
  const double span = 2 * std::numbers::pi * static_cast<double>(n_periods);
  for (std::size_t i = 0; i < n; ++i) {
    s.t[i] = span * static_cast<double>(i) / static_cast<double>(n - 1);
    s.X[i] = cyclic_g(s.t[i]);
  }
  return s;
}

// ---- home ----

namespace {

json point_json(const Point& p) { return json::array({p[0], p[1]}); }

Point point_from(const json& j, const std::string& ctx) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
    throw ConfigError(ctx + ": expected a point [x, y]");
  return {j[0].get<double>(), j[1].get<double>()};
}

double dist(const Point& a, const Point& b) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

void check_simplex(const std::vector<double>& p, std::size_t n, const std::string& what) {
  if (p.size() != n) throw ConfigError("home: " + what + " needs one probability per endpoint");
  double s = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw ConfigError("home: " + what + " has a negative probability");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-9) throw ConfigError("home: " + what + " must sum to 1");
}

}  // namespace

void HomePathSpec::validate() const {
  if (endpoints.empty()) throw ConfigError("home: no endpoints");
  check_simplex(day_probabilities, endpoints.size(), "day_probabilities");
  check_simplex(night_probabilities, endpoints.size(), "night_probabilities");
  auto inside = [&](const Point& p) { return p[0] >= 0 && p[0] <= width && p[1] >= 0 && p[1] <= height; };
  if (!inside(origin)) throw ConfigError("home: origin outside the floor plan");
  for (const auto& e : endpoints) {
    if (e.waypoints.empty()) throw ConfigError("home: endpoint '" + e.name + "' has no waypoints");
    for (const auto& p : e.waypoints)
      if (!inside(p)) throw ConfigError("home: waypoint of '" + e.name + "' outside the floor plan");
  }
  if (!(min_duration > 0.0) || !(max_duration >= min_duration)) throw ConfigError("home: bad duration range");
  if (samples_per_walk < 2) throw ConfigError("home: need at least two samples per walk");
  if (!(lateral_noise >= 0.0) || !(start_noise >= 0.0) || !(end_noise >= 0.0))
    throw ConfigError("home: noise scales must be non-negative");
  if (!(day_start >= 0.0 && day_start < day_end && day_end <= 24.0)) throw ConfigError("home: bad day window");
}

std::size_t HomePathSpec::endpoint_index(const std::string& name) const {
  for (std::size_t i = 0; i < endpoints.size(); ++i)
    if (endpoints[i].name == name) return i;
  throw ConfigError("home: unknown endpoint '" + name + "'");
}

std::size_t HomePathSpec::nearest_endpoint(const Point& p) const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < endpoints.size(); ++i)
    if (dist(p, endpoints[i].location()) < dist(p, endpoints[best].location())) best = i;
  return best;
}

bool HomePathSpec::is_night(double hour) const {
  const double h = std::fmod(std::fmod(hour, 24.0) + 24.0, 24.0);
  return h < day_start || h >= day_end;
}

json HomePathSpec::to_json() const {
  json eps = json::array(), rms = json::array();
  for (const auto& e : endpoints) {
    json w = json::array();
    for (const auto& p : e.waypoints) w.push_back(point_json(p));
    eps.push_back({{"name", e.name}, {"waypoints", w}});
  }
  for (const auto& r : rooms) {
    json poly = json::array();
    for (const auto& p : r.polygon) poly.push_back(point_json(p));
    rms.push_back({{"name", r.name}, {"polygon", poly}});
  }
  return {{"width", width},
          {"height", height},
          {"origin", point_json(origin)},
          {"endpoints", eps},
          {"day_probabilities", day_probabilities},
          {"night_probabilities", night_probabilities},
          {"min_duration", min_duration},
          {"max_duration", max_duration},
          {"samples_per_walk", samples_per_walk},
          {"lateral_noise", lateral_noise},
          {"start_noise", start_noise},
          {"end_noise", end_noise},
          {"day_start", day_start},
          {"day_end", day_end},
          {"rooms", rms}};
}

HomePathSpec HomePathSpec::from_json(const json& j) {
  const std::string ctx = "home";
  ju::check_keys(j, ctx,
                 {"width", "height", "origin", "endpoints", "day_probabilities", "night_probabilities", "min_duration",
                  "max_duration", "samples_per_walk", "lateral_noise", "start_noise", "end_noise", "day_start",
                  "day_end", "rooms"});
  HomePathSpec s;
  s.width = ju::get<double>(j, "width", ctx);
  s.height = ju::get<double>(j, "height", ctx);
  s.origin = point_from(j.at("origin"), ctx + ".origin");
  for (const auto& e : ju::get<json>(j, "endpoints", ctx)) {
    ju::check_keys(e, ctx + ".endpoints", {"name", "waypoints"});
    HomeEndpoint ep{ju::get<std::string>(e, "name", ctx + ".endpoints"), {}};
    for (const auto& p : ju::get<json>(e, "waypoints", ctx + ".endpoints"))
      ep.waypoints.push_back(point_from(p, ctx + ".waypoints"));
    s.endpoints.push_back(std::move(ep));
  }
  s.day_probabilities = ju::get<std::vector<double>>(j, "day_probabilities", ctx);
  s.night_probabilities = ju::get<std::vector<double>>(j, "night_probabilities", ctx);
  s.min_duration = ju::get_or<double>(j, "min_duration", s.min_duration, ctx);
  s.max_duration = ju::get_or<double>(j, "max_duration", s.max_duration, ctx);
  s.samples_per_walk = ju::get_or<std::size_t>(j, "samples_per_walk", s.samples_per_walk, ctx);
  s.lateral_noise = ju::get_or<double>(j, "lateral_noise", s.lateral_noise, ctx);
  s.start_noise = ju::get_or<double>(j, "start_noise", s.start_noise, ctx);
  s.end_noise = ju::get_or<double>(j, "end_noise", s.end_noise, ctx);
  s.day_start = ju::get_or<double>(j, "day_start", s.day_start, ctx);
  s.day_end = ju::get_or<double>(j, "day_end", s.day_end, ctx);
  if (j.contains("rooms")) {
    for (const auto& r : ju::get<json>(j, "rooms", ctx)) {
      ju::check_keys(r, ctx + ".rooms", {"name", "polygon"});
      Room room{ju::get<std::string>(r, "name", ctx + ".rooms"), {}};
      for (const auto& p : ju::get<json>(r, "polygon", ctx + ".rooms"))
        room.polygon.push_back(point_from(p, ctx + ".rooms"));
      s.rooms.push_back(std::move(room));
    }
  }
  s.validate();
  return s;
}

HomePathSpec default_home_spec() {
  HomePathSpec s;
  s.endpoints = {
      {"front_door", {{1.5, 1.0}, {0.5, 0.5}}},
      {"kitchen", {{5.5, 2.0}, {8.0, 1.5}}},
      {"landing", {{4.5, 4.5}, {5.0, 7.0}}},
      {"dining_room", {{2.0, 4.0}, {1.0, 6.0}}},
  };
  s.day_probabilities = {0.25, 0.25, 0.25, 0.25};
  s.night_probabilities = {0.0, 0.1, 0.9, 0.0};
  s.rooms = {
      {"hall", {{0, 0}, {2, 0}, {2, 1.5}, {0, 1.5}}},
      {"living_room", {{2, 0}, {6.5, 0}, {6.5, 4.5}, {0, 4.5}, {0, 1.5}, {2, 1.5}}},
      {"kitchen", {{6.5, 0}, {10, 0}, {10, 4.5}, {6.5, 4.5}}},
      {"dining_room", {{0, 4.5}, {3.5, 4.5}, {3.5, 8}, {0, 8}}},
      {"landing", {{3.5, 4.5}, {6.5, 4.5}, {6.5, 8}, {3.5, 8}}},
  };
  return s;
}

std::string to_string(Regime r) {
  switch (r) {
    case Regime::Day: return "day";
    case Regime::Night: return "night";
    case Regime::Mixed: return "mixed";
  }
  return "?";
}

Regime parse_regime(const std::string& s) {
  for (Regime r : {Regime::Day, Regime::Night, Regime::Mixed})
    if (to_string(r) == s) return r;
  throw ConfigError("unknown regime '" + s + "' (day, night, mixed)");
}

std::vector<double> HomeWalk::seconds() const {
  std::vector<double> out(sample.t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (sample.t[i] - sample.t.front()) * 3600.0;
  return out;
}

std::vector<HomeWalk> gen_home_trajectories(const HomePathSpec& spec, std::size_t n, Regime regime,
                                            std::uint64_t seed) {
  spec.validate();
  std::vector<HomeWalk> walks;
  walks.reserve(n);
  const std::size_t m = spec.samples_per_walk;
  for (std::size_t w = 0; w < n; ++w) {
    Rng rng(derive_seed(seed, w));
    bool night = regime == Regime::Night;
    if (regime == Regime::Mixed) night = rng.uniform() < 0.5;
    const double hour = night ? rng.uniform(spec.day_end, spec.day_start + 24.0) : rng.uniform(spec.day_start, spec.day_end);
    const auto& probs = night ? spec.night_probabilities : spec.day_probabilities;
    const double u = rng.uniform();
    std::size_t e = probs.size() - 1;
    double acc = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) {
      acc += probs[k];
      if (u < acc) {
        e = k;
        break;
      }
    }
    const double duration = rng.uniform(spec.min_duration, spec.max_duration);
    const double a[3] = {rng.normal(0.0, spec.lateral_noise), rng.normal(0.0, spec.lateral_noise / 2),
                         rng.normal(0.0, spec.lateral_noise / 3)};
    const Point js{rng.normal(0.0, spec.start_noise), rng.normal(0.0, spec.start_noise)};
    const Point je{rng.normal(0.0, spec.end_noise), rng.normal(0.0, spec.end_noise)};

    std::vector<Point> line{spec.origin};
    for (const auto& p : spec.endpoints[e].waypoints) line.push_back(p);
    std::vector<double> cum{0.0};
    for (std::size_t i = 1; i < line.size(); ++i) cum.push_back(cum.back() + dist(line[i - 1], line[i]));

    HomeWalk walk{{std::vector<double>(m), Tensor({m, 2})}, spec.endpoints[e].name, night ? "night" : "day"};
    for (std::size_t j = 0; j < m; ++j) {
      const double s = static_cast<double>(j) / static_cast<double>(m - 1);
      walk.sample.t[j] = hour + s * duration / 3600.0;
      const double arc = s * cum.back();
      std::size_t seg = 1;
      while (seg + 1 < line.size() && cum[seg] < arc) ++seg;
      const double len = cum[seg] - cum[seg - 1];
      const double f = len > 0.0 ? (arc - cum[seg - 1]) / len : 0.0;
      const double dx = line[seg][0] - line[seg - 1][0], dy = line[seg][1] - line[seg - 1][1];
      const double nx = len > 0.0 ? -dy / len : 0.0, ny = len > 0.0 ? dx / len : 0.0;
      double lateral = 0.0;
      for (int k = 0; k < 3; ++k) lateral += a[k] * std::sin((k + 1) * std::numbers::pi * s);
      walk.sample.X.at(j, 0) = line[seg - 1][0] + f * dx + nx * lateral + (1 - s) * js[0] + s * je[0];
      walk.sample.X.at(j, 1) = line[seg - 1][1] + f * dy + ny * lateral + (1 - s) * js[1] + s * je[1];
    }
    walks.push_back(std::move(walk));
  }
  return walks;
}

// ---- JSON lines ----

std::vector<json> parse_jsonl(const std::string& text, const std::string& what) {
  std::vector<json> out;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw ConfigError(what + " line " + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

namespace {

std::vector<double> row_of(const Tensor& t, std::size_t r) {
  std::vector<double> out(t.cols());
  for (std::size_t c = 0; c < t.cols(); ++c) out[c] = t.at(r, c);
  return out;
}

Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows, const std::string& ctx) {
  if (rows.empty()) throw ConfigError(ctx + ": no rows");
  const std::size_t d = rows.front().size();
  if (d == 0) throw ConfigError(ctx + ": empty vector");
  Tensor t({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != d) throw ConfigError(ctx + ": rows have different lengths");
    for (std::size_t c = 0; c < d; ++c) t.at(r, c) = rows[r][c];
  }
  return t;
}

}  // namespace

std::string classification_to_jsonl(const LabelledPoints& d) {
  d.validate();
  std::string out;
  for (std::size_t i = 0; i < d.size(); ++i) out += json{{"x", row_of(d.x, i)}, {"y", d.y[i]}}.dump() + "\n";
  return out;
}

LabelledPoints classification_from_jsonl(const std::string& text) {
  std::vector<std::vector<double>> xs;
  LabelledPoints d;
  std::size_t max_label = 0;
  for (const auto& j : parse_jsonl(text, "classification")) {
    ju::check_keys(j, "classification", {"x", "y"});
    xs.push_back(ju::get<std::vector<double>>(j, "x", "classification"));
    d.y.push_back(ju::get<std::size_t>(j, "y", "classification"));
    max_label = std::max(max_label, d.y.back());
  }
  d.x = rows_to_tensor(xs, "classification");
  d.num_classes = std::max<std::size_t>(2, max_label + 1);
  d.validate();
  return d;
}

std::string pairs_to_jsonl(const EndpointPairs& d) {
  d.validate();
  std::string out;
  for (std::size_t i = 0; i < d.size(); ++i)
    out += json{{"start", row_of(d.start, i)}, {"target", row_of(d.target, i)}}.dump() + "\n";
  return out;
}

EndpointPairs pairs_from_jsonl(const std::string& text) {
  std::vector<std::vector<double>> s, t;
  for (const auto& j : parse_jsonl(text, "pairs")) {
    ju::check_keys(j, "pairs", {"start", "target"});
    s.push_back(ju::get<std::vector<double>>(j, "start", "pairs"));
    t.push_back(ju::get<std::vector<double>>(j, "target", "pairs"));
  }
  EndpointPairs d{rows_to_tensor(s, "pairs"), rows_to_tensor(t, "pairs")};
  d.validate();
  return d;
}

std::string walks_to_jsonl(const std::vector<HomeWalk>& walks) {
  std::string out;
  for (const auto& w : walks) {
    w.sample.validate();
    json rows = json::array();
    for (std::size_t r = 0; r < w.sample.X.rows(); ++r) rows.push_back(row_of(w.sample.X, r));
    json j{{"t", w.sample.t}, {"X", rows}};
    if (!w.endpoint.empty()) j["endpoint"] = w.endpoint;
    if (!w.regime.empty()) j["regime"] = w.regime;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<HomeWalk> walks_from_jsonl(const std::string& text) {
  std::vector<HomeWalk> out;
  for (const auto& j : parse_jsonl(text, "trajectories")) {
    const std::string ctx = "trajectories";
    ju::check_keys(j, ctx, {"t", "X", "endpoint", "regime"});
    HomeWalk w;
    w.sample.t = ju::get<std::vector<double>>(j, "t", ctx);
    w.sample.X = rows_to_tensor(ju::get<std::vector<std::vector<double>>>(j, "X", ctx), ctx);
    w.endpoint = ju::get_or<std::string>(j, "endpoint", "", ctx);
    w.regime = ju::get_or<std::string>(j, "regime", "", ctx);
    w.sample.validate();
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace svfm::data
