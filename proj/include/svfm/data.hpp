#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "svfm/losses.hpp"
#include "svfm/tensor.hpp"

namespace svfm::data {

struct LabelledPoints {
  Tensor x;                    // [n x D]
  std::vector<std::size_t> y;  // class per row
  std::size_t num_classes = 2;

  std::size_t size() const { return y.size(); }
  void validate() const;
};

/// moons | circles | xor.
LabelledPoints gen_classification(const std::string& name, std::size_t n, std::uint64_t seed);

/// One-dimensional start -> target pairs.
struct EndpointPairs {
  Tensor start;   // [n x 1]
  Tensor target;  // [n x 1]

  std::size_t size() const { return start.rows(); }
  void validate() const;
};

/// crossing | splitting | scaling.
EndpointPairs gen_failure_task(const std::string& name, std::size_t n, std::uint64_t seed);

/// sin(t) + t/10
double cyclic_g(double t);
/// g sampled on [0, 2 pi n_periods] with `samples_per_period` points per period
/// plus the endpoint. The seed is accepted for interface symmetry; the data
/// carry no noise.
losses::TrajectorySample gen_cyclic(std::size_t n_periods, std::size_t samples_per_period, std::uint64_t seed);

using Point = std::array<double, 2>;

struct HomeEndpoint {
  std::string name;
  std::vector<Point> waypoints;  // after the origin, ending at the endpoint
  Point location() const { return waypoints.back(); }
};

struct Room {
  std::string name;
  std::vector<Point> polygon;
};

struct HomePathSpec {
  double width = 10.0;
  double height = 8.0;
  Point origin{3.0, 2.0};
  std::vector<HomeEndpoint> endpoints;
  std::vector<double> day_probabilities;    // parallel to endpoints
  std::vector<double> night_probabilities;  // parallel to endpoints
  double min_duration = 5.0;  // seconds
  double max_duration = 10.0;
  std::size_t samples_per_walk = 21;
  double lateral_noise = 0.15;  // metres, sin-basis amplitude scale
  double start_noise = 0.05;    // metres
  double end_noise = 0.2;       // metres
  double day_start = 8.0;       // hours
  double day_end = 20.0;
  std::vector<Room> rooms;  // drawing only

  /// ConfigError on bad probabilities, waypoints outside the box, or bad ranges.
  void validate() const;
  std::size_t endpoint_index(const std::string& name) const;
  /// Nearest endpoint location.
  std::size_t nearest_endpoint(const Point& p) const;
  bool is_night(double hour_of_day) const;

  nlohmann::json to_json() const;
  static HomePathSpec from_json(const nlohmann::json& j);
};

/// The checked-in floor plan (also shipped as data/home_floorplan.json).
HomePathSpec default_home_spec();

enum class Regime { Day, Night, Mixed };
std::string to_string(Regime r);
Regime parse_regime(const std::string& s);

struct HomeWalk {
  losses::TrajectorySample sample;  // t in hours of day (may pass 24 at night), X in metres
  std::string endpoint;
  std::string regime;  // "day" or "night"

  double start_hour() const { return sample.t.front(); }
  /// Seconds since the start of the walk for each timestamp.
  std::vector<double> seconds() const;
};

std::vector<HomeWalk> gen_home_trajectories(const HomePathSpec& spec, std::size_t n, Regime regime,
                                            std::uint64_t seed);

// ---- JSON lines ----

/// {"x": [...], "y": k}
std::string classification_to_jsonl(const LabelledPoints& d);
LabelledPoints classification_from_jsonl(const std::string& text);
/// {"start": [...], "target": [...]}
std::string pairs_to_jsonl(const EndpointPairs& d);
EndpointPairs pairs_from_jsonl(const std::string& text);
/// {"t": [...], "X": [[...]], "endpoint": name, "regime": name}; the last two
/// are optional on read and omitted on write when empty.
std::string walks_to_jsonl(const std::vector<HomeWalk>& walks);
std::vector<HomeWalk> walks_from_jsonl(const std::string& text);

/// Splits text into non-empty lines and parses each; ConfigError names the line.
std::vector<nlohmann::json> parse_jsonl(const std::string& text, const std::string& what);

}  // namespace svfm::data
