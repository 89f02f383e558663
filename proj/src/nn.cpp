#include "svfm/nn.hpp"

#include <cmath>

#include "svfm/errors.hpp"
#include "svfm/json_util.hpp"
#include "svfm/rng.hpp"

namespace svfm::nn {

bool MlpConfig::on_standard_grid() const {
  return (hidden_layers == 1 || hidden_layers == 2) && (hidden_units == 32 || hidden_units == 64);
}

void MlpConfig::validate() const {
  if (input_dim == 0 || hidden_layers == 0 || hidden_units == 0 || output_dim == 0)
    throw ConfigError("mlp: input_dim, hidden_layers, hidden_units and output_dim must be positive");
}

nlohmann::json MlpConfig::to_json() const {
  return {{"input_dim", input_dim},
          {"hidden_layers", hidden_layers},
          {"hidden_units", hidden_units},
          {"output_dim", output_dim}};
}

MlpConfig MlpConfig::from_json(const nlohmann::json& j) {
  json_util::check_keys(j, "mlp", {"input_dim", "hidden_layers", "hidden_units", "output_dim"});
  MlpConfig c;
  c.input_dim = json_util::get<std::size_t>(j, "input_dim", "mlp");
  c.hidden_layers = json_util::get<std::size_t>(j, "hidden_layers", "mlp");
  c.hidden_units = json_util::get<std::size_t>(j, "hidden_units", "mlp");
  c.output_dim = json_util::get<std::size_t>(j, "output_dim", "mlp");
  c.validate();
  return c;
}

std::string layer_weight(const std::string& prefix, std::size_t layer) { return prefix + "/w" + std::to_string(layer); }
std::string layer_bias(const std::string& prefix, std::size_t layer) { return prefix + "/b" + std::to_string(layer); }

namespace {

std::vector<std::size_t> widths(const MlpConfig& c) {
  std::vector<std::size_t> w{c.input_dim};
  for (std::size_t i = 0; i < c.hidden_layers; ++i) w.push_back(c.hidden_units);
  w.push_back(c.output_dim);
  return w;
}

}  // namespace

void mlp_init(const MlpConfig& config, std::uint64_t seed, ad::ParameterStore& store, const std::string& prefix) {
  config.validate();
  Rng rng(seed);
  const auto w = widths(config);
  for (std::size_t layer = 0; layer + 1 < w.size(); ++layer) {
    const double bound = std::sqrt(6.0 / static_cast<double>(w[layer] + w[layer + 1]));
    Tensor weight({w[layer], w[layer + 1]});
    for (auto& v : weight.values()) v = rng.uniform(-bound, bound);
    store.add(layer_weight(prefix, layer), std::move(weight));
    store.add(layer_bias(prefix, layer), Tensor({1, w[layer + 1]}));
  }
}

ad::Var mlp_forward(ad::ParamBinder& params, const MlpConfig& config, const std::string& prefix, const ad::Var& x) {
  if (x.value().rank() != 2 || x.value().cols() != config.input_dim)
    throw ShapeError("mlp '" + prefix + "' expects [B x " + std::to_string(config.input_dim) + "], got " +
                     shape_string(x.shape()));
  const std::size_t layers = config.hidden_layers + 1;
  ad::Var h = x;
  for (std::size_t layer = 0; layer < layers; ++layer) {
    h = ad::matmul(h, params(layer_weight(prefix, layer))) + params(layer_bias(prefix, layer));
    if (layer + 1 < layers) h = ad::relu(h);
  }
  return h;
}

}  // namespace svfm::nn
