#include <doctest.h>

#include <cmath>

#include "svfm/errors.hpp"
#include "svfm/nn.hpp"
#include "svfm/rng.hpp"

using namespace svfm;
using namespace svfm::ad;

namespace {

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t({r, c});
  for (auto& v : t.values()) v = rng.uniform(-1.0, 1.0);
  return t;
}

Tensor forward(ParameterStore& store, const nn::MlpConfig& cfg, const Tensor& x) {
  ParamBinder p(store, nullptr);
  return nn::mlp_forward(p, cfg, "f", constant(x)).value();
}

}  // namespace

TEST_CASE("initialization is seeded, Glorot-bounded and has zero biases") {
  const nn::MlpConfig cfg{3, 2, 32, 2};
  ParameterStore a, b, c;
  nn::mlp_init(cfg, 17, a, "f");
  nn::mlp_init(cfg, 17, b, "f");
  nn::mlp_init(cfg, 18, c, "f");
  CHECK(a == b);
  CHECK_FALSE(a == c);
  for (std::size_t layer = 0; layer < 3; ++layer)
    for (double v : a.value(nn::layer_bias("f", layer)).values()) CHECK(v == 0.0);

  // 32 -> 32 layers: bound sqrt(6/64); sample >= 1e4 weights across seeds.
  const nn::MlpConfig square{32, 1, 32, 32};
  double worst = 0.0;
  std::size_t count = 0;
  for (std::uint64_t seed = 0; count < 10000; ++seed) {
    ParameterStore s;
    nn::mlp_init(square, seed, s, "g");
    for (double v : s.value("g/w0").values()) worst = std::max(worst, std::abs(v));
    count += s.value("g/w0").size();
  }
  CHECK(worst <= std::sqrt(6.0 / 64.0));
  CHECK(worst > 0.95 * std::sqrt(6.0 / 64.0));
}

TEST_CASE("zero network gives zero output") {
  const nn::MlpConfig cfg{2, 2, 32, 3};
  ParameterStore store;
  nn::mlp_init(cfg, 1, store, "f");
  for (const auto& key : store.keys())
    for (auto& v : store.value(key).values()) v = 0.0;
  Rng rng(2);
  const Tensor out = forward(store, cfg, random_tensor(rng, 5, 2));
  for (double v : out.values()) CHECK(v == 0.0);
}

TEST_CASE("hand-computed single hidden layer") {
  // h = relu(x W0 + b0), y = h W1 + b1
  const nn::MlpConfig cfg{2, 1, 2, 1};
  ParameterStore store;
  nn::mlp_init(cfg, 0, store, "f");
  store.value("f/w0") = Tensor::matrix({{1, 0}, {0, 1}});
  store.value("f/b0") = Tensor::matrix({{0, -1}});
  store.value("f/w1") = Tensor::matrix({{2}, {3}});
  store.value("f/b1") = Tensor::matrix({{0.5}});
  // x = (1, 2): h = (1, 1), y = 2 + 3 + 0.5
  CHECK(forward(store, cfg, Tensor::matrix({{1, 2}})).item() == 5.5);
  // x = (-1, 0.5): h = (0, 0), y = 0.5
  CHECK(forward(store, cfg, Tensor::matrix({{-1, 0.5}})).item() == 0.5);
}

TEST_CASE("forward matches a per-neuron loop") {
  const nn::MlpConfig cfg{3, 2, 32, 2};
  ParameterStore store;
  nn::mlp_init(cfg, 5, store, "f");
  Rng rng(6);
  for (const auto& key : store.keys())
    if (key.find("/b") != std::string::npos)
      for (auto& v : store.value(key).values()) v = rng.uniform(-0.2, 0.2);
  const Tensor x = random_tensor(rng, 4, 3);
  const Tensor out = forward(store, cfg, x);

  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<double> act(x.values().begin() + static_cast<std::ptrdiff_t>(r * 3),
                            x.values().begin() + static_cast<std::ptrdiff_t>(r * 3 + 3));
    for (std::size_t layer = 0; layer < 3; ++layer) {
      const Tensor& w = store.value(nn::layer_weight("f", layer));
      const Tensor& b = store.value(nn::layer_bias("f", layer));
      std::vector<double> next(w.cols());
      for (std::size_t j = 0; j < w.cols(); ++j) {
        double s = b[j];
        for (std::size_t i = 0; i < w.rows(); ++i) s += act[i] * w.at(i, j);
        next[j] = layer < 2 ? std::max(0.0, s) : s;
      }
      act = next;
    }
    for (std::size_t j = 0; j < 2; ++j) CHECK(std::abs(out.at(r, j) - act[j]) < 1e-12);
  }
}

TEST_CASE("batch forward equals row-wise forwards") {
  const nn::MlpConfig cfg{2, 2, 64, 3};
  ParameterStore store;
  nn::mlp_init(cfg, 9, store, "f");
  Rng rng(10);
  const Tensor x = random_tensor(rng, 7, 2);
  const Tensor batch = forward(store, cfg, x);
  for (std::size_t r = 0; r < 7; ++r) {
    const Tensor row = forward(store, cfg, Tensor({1, 2}, x.row(r)));
    for (std::size_t j = 0; j < 3; ++j) CHECK(row[j] == batch.at(r, j));
  }
}

TEST_CASE("output is piecewise linear along a line") {
  const nn::MlpConfig cfg{2, 2, 32, 1};
  ParameterStore store;
  nn::mlp_init(cfg, 21, store, "f");
  Rng rng(22);
  int linear_triples = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const double x0 = rng.uniform(-1, 1), y0 = rng.uniform(-1, 1);
    const double dx = rng.uniform(-1, 1), dy = rng.uniform(-1, 1);
    const double step = 1e-4;
    Tensor pts({3, 2});
    for (std::size_t k = 0; k < 3; ++k) {
      pts.at(k, 0) = x0 + static_cast<double>(k) * step * dx;
      pts.at(k, 1) = y0 + static_cast<double>(k) * step * dy;
    }
    const Tensor f = forward(store, cfg, pts);
    const double second = f[0] - 2 * f[1] + f[2];
    // A kink inside so short an interval is rare; away from kinks the second
    // difference vanishes to rounding.
    if (std::abs(second) < 1e-12) ++linear_triples;
  }
  CHECK(linear_triples >= 45);
}

TEST_CASE("config validation and grid flag") {
  CHECK(nn::MlpConfig{2, 1, 32, 2}.on_standard_grid());
  CHECK(nn::MlpConfig{2, 2, 64, 2}.on_standard_grid());
  CHECK_FALSE(nn::MlpConfig{2, 3, 32, 2}.on_standard_grid());
  CHECK_FALSE(nn::MlpConfig{2, 1, 16, 2}.on_standard_grid());
  CHECK_THROWS_AS(nn::MlpConfig({0, 1, 32, 2}).validate(), ConfigError);

  const nn::MlpConfig cfg{4, 2, 64, 6};
  CHECK(nn::MlpConfig::from_json(cfg.to_json()) == cfg);
  auto bad = cfg.to_json();
  bad["activation"] = "tanh";
  CHECK_THROWS_WITH_AS(nn::MlpConfig::from_json(bad), doctest::Contains("activation"), ConfigError);

  ParameterStore store;
  nn::mlp_init(cfg, 0, store, "f");
  ParamBinder p(store, nullptr);
  CHECK_THROWS_AS(nn::mlp_forward(p, cfg, "f", constant(Tensor::zeros(3, 5))), ShapeError);
}
