#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "svfm/autodiff.hpp"

namespace svfm::nn {

/// Fully connected ReLU stack with a linear output layer.
struct MlpConfig {
  std::size_t input_dim = 1;
  std::size_t hidden_layers = 1;
  std::size_t hidden_units = 32;
  std::size_t output_dim = 1;

  /// True when the shape sits on the reference architecture grid
  /// (1 or 2 hidden layers, 32 or 64 units).
  bool on_standard_grid() const;
  /// Throws ConfigError on zero sizes.
  void validate() const;

  nlohmann::json to_json() const;
  static MlpConfig from_json(const nlohmann::json& j);
  bool operator==(const MlpConfig&) const = default;
};

/// Adds `<prefix>/w{i}` ([in x out]) and `<prefix>/b{i}` ([1 x out]) for every
/// layer. Weights are Glorot-uniform, biases zero.
void mlp_init(const MlpConfig& config, std::uint64_t seed, ad::ParameterStore& store, const std::string& prefix);

/// x: [B x input_dim] -> [B x output_dim].
ad::Var mlp_forward(ad::ParamBinder& params, const MlpConfig& config, const std::string& prefix, const ad::Var& x);

std::string layer_weight(const std::string& prefix, std::size_t layer);
std::string layer_bias(const std::string& prefix, std::size_t layer);

}  // namespace svfm::nn
