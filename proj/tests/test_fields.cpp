#include <doctest.h>

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "svfm/errors.hpp"
#include "svfm/fields.hpp"

using namespace svfm;
using namespace svfm::fields;
using ad::Var;

namespace {

Tensor random_tensor(Rng& rng, Tensor::Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

FieldSpec small_spec(Variant v, std::size_t k = 1, std::size_t dim = 2) {
  FieldSpec s;
  s.variant = v;
  s.data_dim = dim;
  s.components = k;
  s.hidden_units = 8;
  if (v == Variant::AVF) s.augment_dims = 1;
  return s;
}

// Zero every membership weight and set the output bias to log(p).
void fix_membership(const FieldSpec& spec, ad::ParameterStore& store, const std::vector<double>& p) {
  const auto cfg = spec.membership_mlp();
  for (std::size_t l = 0; l <= cfg.hidden_layers; ++l) {
    for (auto& w : store.value(nn::layer_weight("membership", l)).values()) w = 0.0;
    for (auto& b : store.value(nn::layer_bias("membership", l)).values()) b = 0.0;
  }
  Tensor& out = store.value(nn::layer_bias("membership", cfg.hidden_layers));
  for (std::size_t k = 0; k < p.size(); ++k) out[k] = std::log(p[k]);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("time encodings") {
  TimeEncoding scalar;
  CHECK(encode_time(3.5, scalar) == Tensor({1, 1}, std::vector<double>{3.5}));

  TimeEncoding cyc;
  cyc.mode = TimeEncoding::Mode::Cyclic;  // default l: 24 h period
  const Tensor midnight = encode_time(0.0, cyc);
  CHECK(midnight[0] == 1.0);
  CHECK(midnight[1] == 0.0);
  CHECK(max_abs_diff(encode_time(24.0, cyc), midnight) < 1e-12);
  CHECK(max_abs_diff(encode_time(5.0, cyc), encode_time(29.0, cyc)) < 1e-12);
  const Tensor six = encode_time(6.0, cyc);
  CHECK(std::abs(six[0]) < 1e-12);
  CHECK(six[1] == doctest::Approx(1.0));

  cyc.period_scale = std::numbers::pi / 12.0;  // t/l = 72/pi
  const Tensor lit = encode_time(6.0, cyc);
  CHECK(lit[0] == doctest::Approx(std::cos(72.0 / std::numbers::pi)).epsilon(1e-14));
  CHECK(lit[1] == doctest::Approx(std::sin(72.0 / std::numbers::pi)).epsilon(1e-14));

  cyc.period_scale = 1.0;
  const Tensor e = encode_time(2.0, cyc);
  CHECK(e[0] == doctest::Approx(std::cos(2.0)));
  CHECK(e[1] == doctest::Approx(std::sin(2.0)));
}

TEST_CASE("augment pads with zeros and project drops them") {
  Tensor x = Tensor::matrix({{1, 2}, {3, 4}});
  Tensor a = augment(x, 2);
  CHECK(a == Tensor::matrix({{1, 2, 0, 0}, {3, 4, 0, 0}}));
  CHECK(project(ad::constant(a), 2).value() == x);
  CHECK_THROWS_AS(project(ad::constant(x), 3), ShapeError);
}

TEST_CASE("deterministic field equals the MLP on [state, encoded time]") {
  for (Variant v : {Variant::VF, Variant::AVF}) {
    FieldSpec spec = small_spec(v);
    ad::ParameterStore store;
    init_params(spec, 4, store);
    Rng rng(1);
    Tensor x = random_tensor(rng, {5, spec.state_dim()});
    ad::ParamBinder bind(store, nullptr);
    ModelField field(spec, bind, {}, ad::constant(x), 0.0);
    Var out = field(ad::constant(x), 0.7);

    Tensor in({5, spec.state_dim() + 1});
    for (std::size_t r = 0; r < 5; ++r) {
      for (std::size_t c = 0; c < spec.state_dim(); ++c) in.at(r, c) = x.at(r, c);
      in.at(r, spec.state_dim()) = 0.7;
    }
    Var ref = nn::mlp_forward(bind, spec.component_mlp(), component_prefix(0), ad::constant(in));
    CHECK(out.value() == ref.value());
    CHECK_FALSE(field.stochastic());
  }
}

TEST_CASE("time offsets and time scale enter the encoding per row") {
  FieldSpec spec = small_spec(Variant::VF);
  spec.time.time_scale = 0.5;
  ad::ParameterStore store;
  init_params(spec, 2, store);
  ad::ParamBinder bind(store, nullptr);
  Tensor x({2, 2}, 0.3);
  BindOptions opt;
  opt.time_offsets = {0.0, 1.0};
  ModelField shifted(spec, bind, opt, ad::constant(x), 0.0);
  ModelField plain(spec, bind, {}, ad::constant(x), 0.0);
  // row 1 at t=2: 2 * 0.5 + 1 = 2 = row 0 at t=4
  const Tensor a = shifted(ad::constant(x), 2.0).value();
  const Tensor b = plain(ad::constant(x), 4.0).value();
  CHECK(a.at(1, 0) == b.at(0, 0));
  CHECK(a.at(1, 1) == b.at(0, 1));
  BindOptions bad;
  bad.time_offsets = {1.0};
  CHECK_THROWS_AS(ModelField(spec, bind, bad, ad::constant(x), 0.0), ShapeError);
}

TEST_CASE("stochastic head with zero variance collapses to its mean") {
  Rng rng(3);
  const std::size_t r = 6, s = 3;
  SvfParams p{ad::constant(random_tensor(rng, {r, s})), ad::constant(Tensor({r, s}, 0.0)),
              ad::constant(random_tensor(rng, {r, 1})), ad::constant(Tensor({r, 1}, 0.0))};
  Rng noise(11);
  const Tensor out = svf_sample(p, noise, 1.0).value();
  for (std::size_t i = 0; i < r; ++i) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < s; ++j) n2 += p.mu_u.value().at(i, j) * p.mu_u.value().at(i, j);
    const double len = std::exp(p.log_mu_v.value()[i]);
    for (std::size_t j = 0; j < s; ++j)
      CHECK(std::abs(out.at(i, j) - len * p.mu_u.value().at(i, j) / std::sqrt(n2)) < 1e-12);
  }
  Rng unused(11);
  const Tensor quiet = svf_sample(p, unused, 0.0).value();
  CHECK(max_abs_diff(out, quiet) < 1e-12);
  CHECK(unused == Rng(11));  // noise_scale 0 draws nothing
}

TEST_CASE("stochastic head sample matches a hand-rolled draw") {
  Rng rng(8);
  const std::size_t r = 4, s = 2;
  SvfParams p{ad::constant(random_tensor(rng, {r, s})), ad::constant(random_tensor(rng, {r, s}, 0.01, 0.5)),
              ad::constant(random_tensor(rng, {r, 1})), ad::constant(random_tensor(rng, {r, 1}, 0.01, 0.5))};
  Rng a(21), b(21);
  SvfStats stats;
  const Tensor out = svf_sample(p, a, 1.0, &stats).value();
  CHECK(stats.samples == 4);
  for (std::size_t i = 0; i < r; ++i) {
    const double m0 = p.mu_u.value().at(i, 0), m1 = p.mu_u.value().at(i, 1);
    const double mn = std::hypot(m0, m1);
    const double e0 = b.normal(), e1 = b.normal(), ev = b.normal();
    const double u0 = m0 / mn + std::sqrt(p.tau_u.value().at(i, 0)) * e0;
    const double u1 = m1 / mn + std::sqrt(p.tau_u.value().at(i, 1)) * e1;
    const double un = std::hypot(u0, u1);
    const double len = std::exp(p.log_mu_v.value()[i] + std::sqrt(p.tau_v.value()[i]) * ev);
    CHECK(out.at(i, 0) == doctest::Approx(len * u0 / un).epsilon(1e-12));
    CHECK(out.at(i, 1) == doctest::Approx(len * u1 / un).epsilon(1e-12));
  }
}

TEST_CASE("property: sampled lengths are positive and directions concentrate on the mean") {
  const std::size_t n = 4000;
  Tensor mu({n, 2}), lmv({n, 1}, -0.5);
  for (std::size_t i = 0; i < n; ++i) {
    mu.at(i, 0) = 3.0;
    mu.at(i, 1) = -4.0;
  }
  SvfParams p{ad::constant(mu), ad::constant(Tensor({n, 2}, 0.05)), ad::constant(lmv),
              ad::constant(Tensor({n, 1}, 0.3))};
  Rng rng(5);
  SvfStats stats;
  const Tensor out = svf_sample(p, rng, 1.0, &stats).value();
  double sx = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double len = std::hypot(out.at(i, 0), out.at(i, 1));
    CHECK(len > 0.0);
    sx += out.at(i, 0) / len;
    sy += out.at(i, 1) / len;
  }
  const double cosine = (sx * 0.6 - sy * 0.8) / std::hypot(sx, sy);
  CHECK(cosine > 0.99);
  CHECK(stats.reversed < static_cast<long>(n / 100));
}

TEST_CASE("degenerate mean direction without noise is a numerical error") {
  SvfParams p{ad::constant(Tensor({1, 2}, 0.0)), ad::constant(Tensor({1, 2}, 0.0)), ad::constant(Tensor({1, 1}, 0.0)),
              ad::constant(Tensor({1, 1}, 0.0))};
  Rng rng(1);
  CHECK_THROWS_AS(svf_sample(p, rng, 1.0), NumericalError);
  CHECK_THROWS_AS(svf_sample(p, rng, 0.0), NumericalError);
}

TEST_CASE("stochastic field with zero noise equals its head means") {
  FieldSpec spec = small_spec(Variant::SVF);
  FieldSpec mix = spec;
  mix.variant = Variant::SVFM;
  ad::ParameterStore store;
  init_params(mix, 6, store);
  ad::ParamBinder bind(store, nullptr);
  Rng rng(2);
  Tensor x = random_tensor(rng, {4, 2});
  BindOptions opt;
  opt.noise_scale = 0.0;
  ModelField field(spec, bind, opt, ad::constant(x), 0.0);
  CHECK_FALSE(field.stochastic());
  const Tensor out = field(ad::constant(x), 0.25).value();

  Tensor in({4, 3});
  for (std::size_t r = 0; r < 4; ++r) {
    in.at(r, 0) = x.at(r, 0);
    in.at(r, 1) = x.at(r, 1);
    in.at(r, 2) = 0.25;
  }
  const Tensor raw = nn::mlp_forward(bind, spec.component_mlp(), component_prefix(0), ad::constant(in)).value();
  for (std::size_t r = 0; r < 4; ++r) {
    const double n = std::hypot(raw.at(r, 0), raw.at(r, 1));
    const double len = std::exp(raw.at(r, 4));
    CHECK(std::abs(out.at(r, 0) - len * raw.at(r, 0) / n) < 1e-12);
    CHECK(std::abs(out.at(r, 1) - len * raw.at(r, 1) / n) < 1e-12);
  }

  // a one-component mixture of the same head is the same field
  ModelField single(mix, bind, opt, ad::constant(x), 0.0);
  CHECK(max_abs_diff(single(ad::constant(x), 0.25).value(), out) < 1e-12);
}

TEST_CASE("initial variances follow tau_init and tau_length_init") {
  FieldSpec spec = small_spec(Variant::SVF);
  spec.tau_init = 0.02;
  spec.tau_length_init = 0.3;
  ad::ParameterStore store;
  init_params(spec, 1, store);
  for (auto& w : store.value(nn::layer_weight(component_prefix(0), 1)).values()) w = 0.0;
  ad::ParamBinder bind(store, nullptr);
  Var raw = nn::mlp_forward(bind, spec.component_mlp(), component_prefix(0), ad::constant(Tensor({1, 3}, 0.5)));
  SvfParams p = split_svf_output(raw, 2);
  CHECK(p.tau_u.value()[0] == doctest::Approx(0.02).epsilon(1e-12));
  CHECK(p.tau_v.value()[0] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(p.log_mu_v.value()[0] == 0.0);
}

TEST_CASE("one-component mixture is the plain field") {
  FieldSpec vf = small_spec(Variant::VF);
  FieldSpec vfm = small_spec(Variant::VFM, 1);
  ad::ParameterStore store;
  init_params(vfm, 9, store);
  ad::ParamBinder bind(store, nullptr);
  Rng rng(4);
  Tensor x = random_tensor(rng, {7, 2});
  for (Selection sel : {Selection::Expectation, Selection::HardSample, Selection::GumbelSoftmax, Selection::Conditioned}) {
    BindOptions opt;
    opt.selection = sel;
    ModelField mix(vfm, bind, opt, ad::constant(x), 0.0);
    ModelField plain(vf, bind, {}, ad::constant(x), 0.0);
    CHECK(max_abs_diff(mix(ad::constant(x), 0.4).value(), plain(ad::constant(x), 0.4).value()) < 1e-12);
  }
}

TEST_CASE("pick-and-stick membership is uniform at zero weights and never moves") {
  FieldSpec spec = small_spec(Variant::VFM, 4);
  ad::ParameterStore store;
  init_params(spec, 3, store);
  fix_membership(spec, store, {1.0, 1.0, 1.0, 1.0});
  ad::ParamBinder bind(store, nullptr);
  Rng rng(1);
  Tensor x = random_tensor(rng, {3, 2});
  ModelField field(spec, bind, {}, ad::constant(x), 0.0);
  for (double b : field.belief().value().values()) CHECK(b == doctest::Approx(0.25).epsilon(1e-15));

  ad::ParameterStore fresh;
  init_params(spec, 3, fresh);
  ad::ParamBinder bind2(fresh, nullptr);
  ModelField moving(spec, bind2, {}, ad::constant(x), 0.0);
  const Tensor before = moving.belief().value();
  auto rec = ode::solve_ivp(moving, ad::constant(x), 0.0, 1.0, ode::SolverSpec::rk4(5));
  CHECK(moving.belief().value() == before);
  CHECK(moving.belief_at(0.6).value() == before);
}

TEST_CASE("forward filter identities") {
  Rng rng(12);
  const std::size_t k = 3;
  Tensor prior = random_tensor(rng, {1, k}, 0.1, 1.0);
  double s = 0.0;
  for (double v : prior.values()) s += v;
  for (double& v : prior.values()) v /= s;
  Tensor emis = random_tensor(rng, {1, k}, 0.1, 1.0);

  // identity transition: Bayes update
  Tensor eye({k, k});
  for (std::size_t i = 0; i < k; ++i) eye.at(i, i) = 1.0;
  const Tensor post = forward_filter_step(ad::constant(prior), ad::constant(eye), ad::constant(emis)).value();
  double z = 0.0;
  for (std::size_t i = 0; i < k; ++i) z += prior[i] * emis[i];
  for (std::size_t i = 0; i < k; ++i) CHECK(post[i] == doctest::Approx(prior[i] * emis[i] / z).epsilon(1e-14));

  // uniform transition forgets everything
  const Tensor flat =
      forward_filter_step(ad::constant(prior), ad::constant(Tensor({k, k}, 1.0 / k)), ad::constant(emis)).value();
  for (double v : flat.values()) CHECK(v == doctest::Approx(1.0 / k).epsilon(1e-14));

  // no emission mass: reset to uniform
  std::size_t resets = 0;
  const Tensor reset =
      forward_filter_step(ad::constant(prior), ad::constant(eye), ad::constant(Tensor({1, k}, 0.0)), &resets).value();
  CHECK(resets == 1);
  for (double v : reset.values()) CHECK(v == doctest::Approx(1.0 / k));

  CHECK_THROWS_AS(forward_filter_step(ad::constant(prior), ad::constant(Tensor({2, k})), ad::constant(emis)),
                  ShapeError);
}

TEST_CASE("forward filter matches brute-force path enumeration") {
  // 100 random (prior, transitions, emissions) triples, 10 steps, K = 3:
  // marginal of z_n over all 3^11 paths, weight prior(z0) prod psi_i(z_{i-1}) Psi_i(z_{i-1}, z_i).
  const std::size_t k = 3, steps = 10;
  Rng rng(2024);
  auto simplex_rows = [&](std::size_t rows) {
    Tensor t = random_tensor(rng, {rows, k}, 0.05, 1.0);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += t.at(r, j);
      for (std::size_t j = 0; j < k; ++j) t.at(r, j) /= s;
    }
    return t;
  };
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor prior = simplex_rows(1);
    std::vector<Tensor> trans, emis;
    for (std::size_t i = 0; i < steps; ++i) {
      trans.push_back(simplex_rows(k));
      emis.push_back(random_tensor(rng, {1, k}, 0.05, 1.0));
    }
    Var belief = ad::constant(prior);
    for (std::size_t i = 0; i < steps; ++i)
      belief = forward_filter_step(belief, ad::constant(trans[i]), ad::constant(emis[i]));

    std::vector<double> marginal(k, 0.0);
    std::vector<std::size_t> path(steps + 1, 0);
    const std::size_t total = static_cast<std::size_t>(std::pow(k, steps + 1));
    for (std::size_t code = 0; code < total; ++code) {
      std::size_t c = code;
      for (auto& z : path) {
        z = c % k;
        c /= k;
      }
      double w = prior[path[0]];
      for (std::size_t i = 1; i <= steps; ++i) w *= emis[i - 1][path[i - 1]] * trans[i - 1].at(path[i - 1], path[i]);
      marginal[path[steps]] += w;
    }
    double z = 0.0;
    for (double m : marginal) z += m;
    for (std::size_t j = 0; j < k; ++j)
      worst = std::max(worst, std::abs(belief.value()[j] - marginal[j] / z) / (marginal[j] / z));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("forward-filter field updates its belief once per step") {
  FieldSpec spec = small_spec(Variant::VFM, 3);
  spec.membership = Membership::ForwardFilter;
  ad::ParameterStore store;
  init_params(spec, 5, store);
  ad::ParamBinder bind(store, nullptr);
  Rng rng(7);
  Tensor x = random_tensor(rng, {4, 2});
  ModelField field(spec, bind, {}, ad::constant(x), 0.0);
  const Tensor b0 = field.belief().value();
  auto rec = ode::solve_ivp(field, ad::constant(x), 0.0, 1.0, ode::SolverSpec::rk4(4));
  field.update_belief(rec.final_state(), 1.0);
  for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const Tensor& b = field.belief_at(t).value();
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 3; ++j) s += b.at(r, j);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK(field.belief_at(0.0).value() == b0);
  CHECK_FALSE(field.belief_at(1.0).value() == b0);
  CHECK_THROWS_AS(field.belief_at(0.3), DomainError);
  field.update_belief(rec.final_state(), 0.5);  // not later: ignored
  CHECK(field.belief().value() == field.belief_at(1.0).value());
}

TEST_CASE("hard selection picks exactly one component per row at the belief frequencies") {
  FieldSpec spec = small_spec(Variant::VFM, 3);
  ad::ParameterStore store;
  init_params(spec, 13, store);
  const std::vector<double> p{0.2, 0.5, 0.3};
  fix_membership(spec, store, p);
  ad::ParamBinder bind(store, nullptr);
  const std::size_t n = 4000;
  Tensor x({n, 2}, 0.4);
  const double t = 0.3;
  BindOptions opt;
  opt.selection = Selection::HardSample;
  opt.log_components = true;
  ModelField field(spec, bind, opt, ad::constant(x), 0.0);
  const Tensor out = field(ad::constant(x), t).value();

  Tensor in({1, 3}, std::vector<double>{0.4, 0.4, t});
  std::vector<Tensor> comp;
  for (std::size_t k = 0; k < 3; ++k)
    comp.push_back(nn::mlp_forward(bind, spec.component_mlp(), component_prefix(k), ad::constant(in)).value());
  std::vector<double> count(3, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t k = field.component_log().back()[r];
    CHECK(out.at(r, 0) == comp[k][0]);
    CHECK(out.at(r, 1) == comp[k][1]);
    count[k] += 1.0;
  }
  for (std::size_t k = 0; k < 3; ++k) {
    const double sigma = std::sqrt(p[k] * (1 - p[k]) / n);
    CHECK(std::abs(count[k] / n - p[k]) < 3 * sigma);
  }
}

TEST_CASE("gumbel-softmax weights follow the belief and approach one-hot at low temperature") {
  FieldSpec spec = small_spec(Variant::VFM, 3);
  ad::ParameterStore store;
  init_params(spec, 17, store);
  const std::vector<double> p{0.6, 0.1, 0.3};
  fix_membership(spec, store, p);
  ad::ParamBinder bind(store, nullptr);
  const std::size_t n = 4000;
  Tensor x({n, 2}, -0.2);
  BindOptions opt;
  opt.selection = Selection::GumbelSoftmax;
  opt.temperature = 1e-3;
  opt.seed = 77;
  ModelField field(spec, bind, opt, ad::constant(x), 0.0);
  CHECK(field.stochastic());
  const Tensor out = field(ad::constant(x), 0.0).value();

  Tensor in({1, 3}, std::vector<double>{-0.2, -0.2, 0.0});
  std::vector<Tensor> comp;
  for (std::size_t k = 0; k < 3; ++k)
    comp.push_back(nn::mlp_forward(bind, spec.component_mlp(), component_prefix(k), ad::constant(in)).value());
  std::vector<double> count(3, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < 3; ++k) {
      const double d = std::hypot(out.at(r, 0) - comp[k][0], out.at(r, 1) - comp[k][1]);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    count[best] += 1.0;
  }
  for (std::size_t k = 0; k < 3; ++k) {
    const double sigma = std::sqrt(p[k] * (1 - p[k]) / n);
    CHECK(std::abs(count[k] / n - p[k]) < 3 * sigma);
  }
}

TEST_CASE("expectation selection is the belief-weighted sum") {
  FieldSpec spec = small_spec(Variant::VFM, 2);
  ad::ParameterStore store;
  init_params(spec, 19, store);
  fix_membership(spec, store, {0.25, 0.75});
  ad::ParamBinder bind(store, nullptr);
  Tensor x({1, 2}, std::vector<double>{0.1, 0.9});
  ModelField field(spec, bind, {}, ad::constant(x), 0.0);
  const Tensor out = field(ad::constant(x), 0.5).value();
  Tensor in({1, 3}, std::vector<double>{0.1, 0.9, 0.5});
  const Tensor a = nn::mlp_forward(bind, spec.component_mlp(), component_prefix(0), ad::constant(in)).value();
  const Tensor b = nn::mlp_forward(bind, spec.component_mlp(), component_prefix(1), ad::constant(in)).value();
  for (std::size_t j = 0; j < 2; ++j) CHECK(out[j] == doctest::Approx(0.25 * a[j] + 0.75 * b[j]).epsilon(1e-14));
}

TEST_CASE("conditioned selection runs block k on component k") {
  FieldSpec spec = small_spec(Variant::VFM, 2);
  ad::ParameterStore store;
  init_params(spec, 23, store);
  ad::ParamBinder bind(store, nullptr);
  Rng rng(3);
  Tensor x = random_tensor(rng, {6, 2});
  BindOptions opt;
  opt.selection = Selection::Conditioned;
  ModelField field(spec, bind, opt, ad::constant(x), 0.0);
  CHECK(field.assignment() == std::vector<std::size_t>{0, 0, 0, 1, 1, 1});
  const Tensor out = field(ad::constant(x), 0.0).value();
  Tensor in({6, 3});
  for (std::size_t r = 0; r < 6; ++r) {
    in.at(r, 0) = x.at(r, 0);
    in.at(r, 1) = x.at(r, 1);
  }
  const Tensor a = nn::mlp_forward(bind, spec.component_mlp(), component_prefix(0), ad::constant(in)).value();
  const Tensor b = nn::mlp_forward(bind, spec.component_mlp(), component_prefix(1), ad::constant(in)).value();
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t j = 0; j < 2; ++j) CHECK(out.at(r, j) == (r < 3 ? a : b).at(r, j));
  const Tensor w = field.assigned_weight(0.0).value();
  for (std::size_t r = 0; r < 6; ++r) CHECK(w[r] == field.belief().value().at(r, r / 3));

  Tensor odd = random_tensor(rng, {5, 2});
  CHECK_THROWS_AS(ModelField(spec, bind, opt, ad::constant(odd), 0.0), ShapeError);
}

TEST_CASE("replayed hard selection keeps one component per row across the stages of a step") {
  FieldSpec spec = small_spec(Variant::VFM, 2);
  ad::ParameterStore store;
  init_params(spec, 29, store);
  fix_membership(spec, store, {0.5, 0.5});
  ad::ParamBinder bind(store, nullptr);
  Tensor x({50, 2}, 0.1);
  BindOptions opt;
  opt.selection = Selection::HardSample;
  opt.log_components = true;
  opt.seed = 5;
  ModelField field(spec, bind, opt, ad::constant(x), 0.0);
  ode::ReplayableField replay(field, field.rng());
  auto rec = ode::solve_ivp(replay, ad::constant(x), 0.0, 1.0, ode::SolverSpec::rk4(3));
  const auto& log = field.component_log();
  REQUIRE(log.size() == 12);
  for (std::size_t step = 0; step < 3; ++step)
    for (std::size_t stage = 1; stage < 4; ++stage) CHECK(log[4 * step + stage] == log[4 * step]);
  CHECK_FALSE(log[0] == log[4]);

  // without replay the stages disagree
  ModelField loose(spec, bind, opt, ad::constant(x), 0.0);
  ode::solve_ivp(loose, ad::constant(x), 0.0, 1.0, ode::SolverSpec::rk4(1));
  CHECK_FALSE(loose.component_log()[0] == loose.component_log()[1]);
}

TEST_CASE("frozen hard selection keeps the first draw for the whole solve") {
  FieldSpec spec = small_spec(Variant::VFM, 2);
  ad::ParameterStore store;
  init_params(spec, 31, store);
  fix_membership(spec, store, {0.5, 0.5});
  ad::ParamBinder bind(store, nullptr);
  Tensor x({40, 2}, 0.2);
  BindOptions opt;
  opt.selection = Selection::HardSample;
  opt.freeze_component = true;
  opt.log_components = true;
  ModelField field(spec, bind, opt, ad::constant(x), 0.0);
  CHECK_FALSE(field.stochastic());
  ode::solve_ivp(field, ad::constant(x), 0.0, 1.0, ode::SolverSpec::dopri5());
  for (const auto& entry : field.component_log()) CHECK(entry == field.component_log().front());
  CHECK(field.assigned_weight(0.0).value().shape() == Tensor::Shape{40, 1});
}

TEST_CASE("gradients through a stochastic mixture solve match finite differences") {
  FieldSpec spec = small_spec(Variant::SVFM, 2);
  spec.hidden_units = 4;
  spec.membership = Membership::ForwardFilter;
  ad::ParameterStore store;
  init_params(spec, 37, store);
  Rng rng(2);
  Tensor x = random_tensor(rng, {4, 2});
  auto loss = [&](ad::ParamBinder& bind) {
    BindOptions opt;
    opt.selection = Selection::Conditioned;
    opt.seed = 99;
    ModelField field(spec, bind, opt, ad::constant(x), 0.0);
    ode::ReplayableField replay(field, field.rng());
    auto rec = ode::solve_ivp(replay, ad::constant(x), 0.0, 1.0, ode::SolverSpec::rk4(3));
    field.update_belief(rec.final_state(), 1.0);
    return ad::add(ad::sum(ad::square(rec.final_state())), ad::sum(field.assigned_weight(1.0)));
  };
  ad::Tape tape;
  ad::ParamBinder bind(store, &tape);
  tape.backward(loss(bind), store);
  double worst = 0.0;
  const double eps = 1e-6;
  for (const auto& key : store.keys()) {
    for (std::size_t i = 0; i < store.value(key).size(); i += 3) {
      const double orig = store.value(key)[i];
      auto eval = [&](double v) {
        store.value(key)[i] = v;
        ad::ParamBinder b(store, nullptr);
        return loss(b).value().item();
      };
      const double fd = (eval(orig + eps) - eval(orig - eps)) / (2 * eps);
      store.value(key)[i] = orig;
      const double g = store.grad(key)[i];
      worst = std::max(worst, std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-4}));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("field spec JSON round trip and validation") {
  FieldSpec s = small_spec(Variant::SVFM, 3);
  s.membership = Membership::ForwardFilter;
  s.time.mode = TimeEncoding::Mode::Cyclic;
  s.time.time_scale = 1.0 / 3600.0;
  CHECK(FieldSpec::from_json(s.to_json()) == s);

  auto j = s.to_json();
  j["activation"] = "tanh";
  CHECK_THROWS_AS(FieldSpec::from_json(j), ConfigError);
  CHECK_THROWS_AS(parse_variant("node"), ConfigError);
  CHECK_THROWS_AS(parse_selection("soft"), ConfigError);

  FieldSpec bad = small_spec(Variant::VF);
  bad.components = 2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = small_spec(Variant::VF);
  bad.augment_dims = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = small_spec(Variant::AVF);
  bad.augment_dims = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  for (Selection sel : {Selection::HardSample, Selection::GumbelSoftmax, Selection::Expectation, Selection::Conditioned})
    CHECK(parse_selection(to_string(sel)) == sel);
}

TEST_CASE("parameter layout") {
  FieldSpec s = small_spec(Variant::SVFM, 2);
  s.membership = Membership::ForwardFilter;
  ad::ParameterStore store;
  init_params(s, 1, store);
  for (const char* key : {"field/c0/w0", "field/c1/b1", "membership/w1", "transition/b1", "emission/w0"})
    CHECK(store.contains(key));
  CHECK(store.value("field/c0/w1").shape() == Tensor::Shape{8, 6});
  CHECK(store.value("transition/b1").shape() == Tensor::Shape{1, 4});
  ad::ParameterStore again;
  init_params(s, 1, again);
  CHECK(again == store);
}
