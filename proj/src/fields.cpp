#include "svfm/fields.hpp"

#include <algorithm>
#include <cmath>

#include "svfm/errors.hpp"
#include "svfm/json_util.hpp"

namespace svfm::fields {

using ad::Var;
using nlohmann::json;

namespace {

constexpr double kDegenerateNorm = 1e-12;
constexpr double kResetMass = 1e-300;

double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

}  // namespace

// ---- time encoding ----

Tensor encode_time(double t, const TimeEncoding& enc) {
  if (enc.mode == TimeEncoding::Mode::Scalar) return Tensor({1, 1}, std::vector<double>{t});
  const double a = t / enc.period_scale;
  return Tensor({1, 2}, std::vector<double>{std::cos(a), std::sin(a)});
}

json TimeEncoding::to_json() const {
  return {{"mode", mode == Mode::Scalar ? "scalar" : "cyclic"},
          {"period_scale", period_scale},
          {"time_scale", time_scale}};
}

TimeEncoding TimeEncoding::from_json(const json& j) {
  const std::string ctx = "time_encoding";
  json_util::check_keys(j, ctx, {"mode", "period_scale", "time_scale"});
  TimeEncoding e;
  const auto mode = json_util::get_or<std::string>(j, "mode", "scalar", ctx);
  if (mode == "scalar") {
    e.mode = Mode::Scalar;
  } else if (mode == "cyclic") {
    e.mode = Mode::Cyclic;
  } else {
    throw ConfigError(ctx + ": unknown mode '" + mode + "'");
  }
  e.period_scale = json_util::get_or<double>(j, "period_scale", e.period_scale, ctx);
  e.time_scale = json_util::get_or<double>(j, "time_scale", e.time_scale, ctx);
  return e;
}

// ---- enums ----

std::string to_string(Variant v) {
  switch (v) {
    case Variant::VF: return "vf";
    case Variant::AVF: return "avf";
    case Variant::SVF: return "svf";
    case Variant::VFM: return "vfm";
    case Variant::SVFM: return "svfm";
  }
  return "?";
}

std::string to_string(Membership m) { return m == Membership::PickAndStick ? "pick_and_stick" : "forward_filter"; }

std::string to_string(Selection s) {
  switch (s) {
    case Selection::HardSample: return "hard";
    case Selection::GumbelSoftmax: return "gumbel";
    case Selection::Expectation: return "expectation";
    case Selection::Conditioned: return "conditioned";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::VF, Variant::AVF, Variant::SVF, Variant::VFM, Variant::SVFM})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + s + "' (vf, avf, svf, vfm, svfm)");
}

Membership parse_membership(const std::string& s) {
  for (Membership m : {Membership::PickAndStick, Membership::ForwardFilter})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown membership '" + s + "' (pick_and_stick, forward_filter)");
}

Selection parse_selection(const std::string& s) {
  for (Selection x : {Selection::HardSample, Selection::GumbelSoftmax, Selection::Expectation, Selection::Conditioned})
    if (to_string(x) == s) return x;
  throw ConfigError("unknown selection '" + s + "' (hard, gumbel, expectation, conditioned)");
}

// ---- spec ----

nn::MlpConfig FieldSpec::component_mlp() const {
  const std::size_t s = state_dim();
  return {input_dim(), hidden_layers, hidden_units, stochastic_heads() ? 2 * s + 2 : s};
}
nn::MlpConfig FieldSpec::membership_mlp() const { return {input_dim(), hidden_layers, hidden_units, K()}; }
nn::MlpConfig FieldSpec::transition_mlp() const { return {input_dim(), hidden_layers, hidden_units, K() * K()}; }
nn::MlpConfig FieldSpec::emission_mlp() const { return {input_dim(), hidden_layers, hidden_units, K()}; }

void FieldSpec::validate() const {
  if (data_dim == 0) throw ConfigError("field: data_dim must be positive");
  if (variant == Variant::AVF && augment_dims == 0) throw ConfigError("field: avf needs augment_dims >= 1");
  if (variant == Variant::VF && augment_dims != 0) throw ConfigError("field: vf takes no augment_dims (use avf)");
  if (components == 0) throw ConfigError("field: components must be positive");
  if (!mixture() && components != 1) throw ConfigError("field: components > 1 needs vfm or svfm");
  if (hidden_layers == 0 || hidden_units == 0) throw ConfigError("field: hidden sizes must be positive");
  if (!(time.period_scale > 0.0) || !(time.time_scale > 0.0))
    throw ConfigError("field: time encoding scales must be positive");
  if (!(tau_init > 0.0)) throw ConfigError("field: tau_init must be positive");
  if (!(tau_length_init > 0.0)) throw ConfigError("field: tau_length_init must be positive");
  if (!(max_log_length > 0.0)) throw ConfigError("field: max_log_length must be positive");
}

json FieldSpec::to_json() const {
  return {{"variant", to_string(variant)},
          {"data_dim", data_dim},
          {"augment_dims", augment_dims},
          {"components", components},
          {"membership", to_string(membership)},
          {"hidden_layers", hidden_layers},
          {"hidden_units", hidden_units},
          {"time_encoding", time.to_json()},
          {"tau_init", tau_init},
          {"tau_length_init", tau_length_init},
          {"max_log_length", max_log_length}};
}

FieldSpec FieldSpec::from_json(const json& j) {
  const std::string ctx = "field";
  json_util::check_keys(j, ctx,
                        {"variant", "data_dim", "augment_dims", "components", "membership", "hidden_layers",
                         "hidden_units", "time_encoding", "tau_init", "tau_length_init", "max_log_length"});
  FieldSpec s;
  s.variant = parse_variant(json_util::get<std::string>(j, "variant", ctx));
  s.data_dim = json_util::get_or<std::size_t>(j, "data_dim", s.data_dim, ctx);
  s.augment_dims = json_util::get_or<std::size_t>(j, "augment_dims", s.augment_dims, ctx);
  s.components = json_util::get_or<std::size_t>(j, "components", s.components, ctx);
  s.membership = parse_membership(json_util::get_or<std::string>(j, "membership", to_string(s.membership), ctx));
  s.hidden_layers = json_util::get_or<std::size_t>(j, "hidden_layers", s.hidden_layers, ctx);
  s.hidden_units = json_util::get_or<std::size_t>(j, "hidden_units", s.hidden_units, ctx);
  if (j.contains("time_encoding")) s.time = TimeEncoding::from_json(j.at("time_encoding"));
  s.tau_init = json_util::get_or<double>(j, "tau_init", s.tau_init, ctx);
  s.tau_length_init = json_util::get_or<double>(j, "tau_length_init", s.tau_length_init, ctx);
  s.max_log_length = json_util::get_or<double>(j, "max_log_length", s.max_log_length, ctx);
  s.validate();
  return s;
}

std::string component_prefix(std::size_t k) { return "field/c" + std::to_string(k); }

void init_params(const FieldSpec& spec, std::uint64_t seed, ad::ParameterStore& store) {
  spec.validate();
  const std::size_t s = spec.state_dim();
  const auto cfg = spec.component_mlp();
  for (std::size_t k = 0; k < spec.K(); ++k) {
    const std::string prefix = component_prefix(k);
    nn::mlp_init(cfg, derive_seed(seed, k), store, prefix);
    if (!spec.stochastic_heads()) continue;
    // Output bias: small random mean direction (keeps normalize() away from a
    // zero vector at zero input), softplus^-1 of the initial variances.
    // Zero output weights: constant field at init. Random slopes here put
    // exp(log v) on an explosive branch before training has seen any data.
    Tensor& w = store.value(nn::layer_weight(prefix, cfg.hidden_layers));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.0;
    Tensor& bias = store.value(nn::layer_bias(prefix, cfg.hidden_layers));
    Rng rng(derive_seed(seed, 500 + k));
    for (std::size_t i = 0; i < s; ++i) bias[i] = rng.normal(0.0, 0.1);
    const double raw_tau = inverse_softplus(spec.tau_init);
    for (std::size_t i = s; i < 2 * s; ++i) bias[i] = raw_tau;
    bias[2 * s] = 0.0;
    bias[2 * s + 1] = inverse_softplus(spec.tau_length_init);
  }
  if (!spec.mixture()) return;
  nn::mlp_init(spec.membership_mlp(), derive_seed(seed, 1000), store, "membership");
  if (spec.membership == Membership::ForwardFilter) {
    const auto tcfg = spec.transition_mlp();
    nn::mlp_init(tcfg, derive_seed(seed, 1001), store, "transition");
    nn::mlp_init(spec.emission_mlp(), derive_seed(seed, 1002), store, "emission");
    // start sticky: softmax([3, 0, ...]) keeps ~90% mass on the current component for K = 2
    Tensor& tb = store.value(nn::layer_bias("transition", tcfg.hidden_layers));
    const std::size_t k = spec.K();
    for (std::size_t i = 0; i < k; ++i) tb[i * k + i] = 3.0;
  }
}

Tensor augment(const Tensor& x, std::size_t p) {
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out({r, c + p});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * (c + p) + j] = x[i * c + j];
  return out;
}

Var project(const Var& x, std::size_t d) {
  if (d > x.value().cols()) throw ShapeError("project: state has fewer than " + std::to_string(d) + " columns");
  return d == x.value().cols() ? x : ad::slice_cols(x, 0, d);
}

// ---- stochastic heads ----

SvfParams split_svf_output(const Var& raw, std::size_t s) {
  if (raw.value().cols() != 2 * s + 2)
    throw ShapeError("svf head: expected " + std::to_string(2 * s + 2) + " columns, got " +
                     shape_string(raw.shape()));
  return {ad::slice_cols(raw, 0, s), ad::softplus(ad::slice_cols(raw, s, 2 * s)), ad::slice_cols(raw, 2 * s, 2 * s + 1),
          ad::softplus(ad::slice_cols(raw, 2 * s + 1, 2 * s + 2))};
}

namespace {
Var cap(const Var& x, double hi) {
  if (!std::isfinite(hi)) return x;
  return ad::sub(x, ad::relu(ad::add_scalar(x, -hi)));
}
}  // namespace

Var svf_sample(const SvfParams& p, Rng& rng, double noise_scale, SvfStats* stats, double max_log_length) {
  const Tensor& mu = p.mu_u.value();
  const std::size_t r = mu.rows(), s = mu.cols();
  if (p.tau_u.value().shape() != mu.shape() || p.log_mu_v.value().rows() != r || p.tau_v.value().rows() != r)
    throw ShapeError("svf_sample: head shapes disagree");
  if (!mu.all_finite() || !p.log_mu_v.value().all_finite())
    throw NumericalError("non-finite stochastic field head (state overflow?)");
  Var mhat = ad::normalize_rows(p.mu_u, kDegenerateNorm);
  const Tensor& m = mhat.value();

  if (noise_scale == 0.0) {
    for (std::size_t i = 0; i < r; ++i) {
      double n2 = 0.0;
      for (std::size_t j = 0; j < s; ++j) n2 += m[i * s + j] * m[i * s + j];
      if (n2 == 0.0) throw NumericalError("degenerate direction in stochastic field (zero mean direction)");
    }
    if (stats) stats->samples += static_cast<long>(r);
    return ad::mul(ad::exp(cap(p.log_mu_v, max_log_length)), mhat);
  }

  const Tensor& tu = p.tau_u.value();
  Tensor eu({r, s}), ev({r, 1});
  long reversed = 0;
  for (std::size_t i = 0; i < r; ++i) {
    for (int attempt = 0;; ++attempt) {
      double n2 = 0.0, dot = 0.0;
      for (std::size_t j = 0; j < s; ++j) {
        eu[i * s + j] = noise_scale * rng.normal();
        const double x = m[i * s + j] + std::sqrt(tu[i * s + j]) * eu[i * s + j];
        n2 += x * x;
        dot += x * m[i * s + j];
      }
      ev[i] = noise_scale * rng.normal();
      if (std::sqrt(n2) >= kDegenerateNorm) {
        if (dot < 0.0) ++reversed;
        break;
      }
      if (attempt == 1) throw NumericalError("degenerate direction in stochastic field after resampling");
    }
  }
  if (stats) {
    stats->samples += static_cast<long>(r);
    stats->reversed += reversed;
  }
  Var u = ad::normalize_rows(ad::add(mhat, ad::mul(ad::sqrt(p.tau_u), ad::constant(std::move(eu)))), kDegenerateNorm);
  Var log_v = ad::add(p.log_mu_v, ad::mul(ad::sqrt(p.tau_v), ad::constant(std::move(ev))));
  return ad::mul(ad::exp(cap(log_v, max_log_length)), u);
}

// ---- forward filter ----

Var forward_filter_step(const Var& prior, const Var& transition, const Var& emission, std::size_t* resets) {
  const std::size_t r = prior.value().rows(), k = prior.value().cols();
  if (emission.value().shape() != prior.value().shape())
    throw ShapeError("forward_filter_step: emission " + shape_string(emission.shape()) + " vs prior " +
                     shape_string(prior.shape()));
  if (transition.value().rows() != r * k || transition.value().cols() != k)
    throw ShapeError("forward_filter_step: transition must be [" + std::to_string(r * k) + "x" + std::to_string(k) +
                     "], got " + shape_string(transition.shape()));
  // w[r,i] = psi[r,i] prior[r,i]; u[r,j] = sum_i w[r,i] Psi[r,i,j]
  Var w = ad::reshape(ad::mul(emission, prior), {r * k, 1});
  Var weighted = ad::reshape(ad::mul(w, transition), {r, k * k});
  Tensor fold({k * k, k});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) fold[(i * k + j) * k + j] = 1.0;
  Var u = ad::matmul(weighted, ad::constant(std::move(fold)));

  const Tensor& uv = u.value();
  Tensor keep({r, 1}, 1.0), fill({r, k}, 0.0);
  bool any = false;
  for (std::size_t i = 0; i < r; ++i) {
    double mass = 0.0;
    for (std::size_t j = 0; j < k; ++j) mass += uv[i * k + j];
    if (mass < kResetMass) {
      keep[i] = 0.0;
      for (std::size_t j = 0; j < k; ++j) fill[i * k + j] = 1.0;
      any = true;
      if (resets) ++*resets;
    }
  }
  if (any) u = ad::add(ad::mul(u, ad::constant(std::move(keep))), ad::constant(std::move(fill)));
  return ad::div(u, ad::row_sum(u));
}

// ---- bound model ----

ModelField::ModelField(const FieldSpec& spec, ad::ParamBinder& params, BindOptions options, const Var& state0,
                       double t0)
    : spec_(spec), params_(params), opt_(std::move(options)), rows_(state0.value().rows()), rng_(opt_.seed) {
  spec_.validate();
  if (state0.value().rank() != 2 || state0.value().cols() != spec_.state_dim())
    throw ShapeError("field: initial state must be [rows x " + std::to_string(spec_.state_dim()) + "], got " +
                     shape_string(state0.shape()));
  if (!opt_.time_offsets.empty() && opt_.time_offsets.size() != rows_)
    throw ShapeError("field: time_offsets needs one entry per row");
  if (!(opt_.temperature > 0.0)) throw ConfigError("field: temperature must be positive");
  if (!(opt_.noise_scale >= 0.0)) throw ConfigError("field: noise_scale must be non-negative");
  const std::size_t k = spec_.K();
  if (spec_.mixture()) {
    Var input = ad::concat_cols(std::vector<Var>{state0, time_input(t0, rows_)});
    belief_ = ad::softmax(nn::mlp_forward(params_, spec_.membership_mlp(), "membership", input));
  } else {
    belief_ = ad::constant(Tensor({rows_, 1}, 1.0));
  }
  belief_history_.emplace_back(t0, belief_);
  if (opt_.selection == Selection::Conditioned) {
    if (rows_ % k != 0) throw ShapeError("field: conditioned rows must split into K equal blocks");
    assignment_.resize(rows_);
    for (std::size_t i = 0; i < rows_; ++i) assignment_[i] = i / (rows_ / k);
  }
}

Var ModelField::time_input(double t, std::size_t rows) const {
  Tensor out({rows, spec_.time.width()});
  for (std::size_t i = 0; i < rows; ++i) {
    const double off = opt_.time_offsets.empty() ? 0.0 : opt_.time_offsets[i];
    const Tensor e = encode_time(t * spec_.time.time_scale + off, spec_.time);
    for (std::size_t j = 0; j < e.size(); ++j) out[i * e.size() + j] = e[j];
  }
  return ad::constant(std::move(out));
}

Var ModelField::component_field(std::size_t k, const Var& input) {
  Var raw = nn::mlp_forward(params_, spec_.component_mlp(), component_prefix(k), input);
  if (!spec_.stochastic_heads()) return raw;
  return svf_sample(split_svf_output(raw, spec_.state_dim()), rng_, opt_.noise_scale, &stats_, spec_.max_log_length);
}

Var ModelField::grouped_field(const Var& input, const std::vector<std::size_t>& assign) {
  std::vector<Var> parts;
  std::vector<std::size_t> order;
  order.reserve(rows_);
  for (std::size_t k = 0; k < spec_.K(); ++k) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < rows_; ++i)
      if (assign[i] == k) rows.push_back(i);
    if (rows.empty()) continue;
    const bool contiguous = rows.back() - rows.front() + 1 == rows.size();
    Var sub = contiguous ? ad::slice_rows(input, rows.front(), rows.back() + 1) : ad::gather_rows(input, rows);
    parts.push_back(component_field(k, sub));
    order.insert(order.end(), rows.begin(), rows.end());
  }
  Var stacked = parts.size() == 1 ? parts.front() : ad::concat_rows(parts);
  bool identity = true;
  for (std::size_t i = 0; i < order.size(); ++i) identity = identity && order[i] == i;
  if (identity) return stacked;
  std::vector<std::size_t> inverse(rows_);
  for (std::size_t i = 0; i < order.size(); ++i) inverse[order[i]] = i;
  return ad::gather_rows(stacked, std::move(inverse));
}

Var ModelField::operator()(const Var& state, double t) {
  if (state.value().rows() != rows_ || state.value().cols() != spec_.state_dim())
    throw ShapeError("field: state must be [" + std::to_string(rows_) + "x" + std::to_string(spec_.state_dim()) +
                     "], got " + shape_string(state.shape()));
  Var input = ad::concat_cols(std::vector<Var>{state, time_input(t, rows_)});
  const std::size_t k = spec_.K();
  if (!spec_.mixture()) return component_field(0, input);

  switch (opt_.selection) {
    case Selection::Conditioned:
      return grouped_field(input, assignment_);
    case Selection::HardSample: {
      // one uniform per row on every evaluation, used or not, so the draw count
      // per evaluation is fixed
      std::vector<std::size_t> pick(rows_);
      const Tensor& b = belief_.value();
      for (std::size_t i = 0; i < rows_; ++i) {
        const double u = rng_.uniform();
        double acc = 0.0;
        pick[i] = k - 1;
        for (std::size_t j = 0; j < k; ++j) {
          acc += b[i * k + j];
          if (u < acc) {
            pick[i] = j;
            break;
          }
        }
      }
      if (!frozen_) {
        assignment_ = pick;
        frozen_ = opt_.freeze_component;
      }
      if (opt_.log_components) component_log_.push_back(assignment_);
      return grouped_field(input, assignment_);
    }
    case Selection::GumbelSoftmax:
    case Selection::Expectation: {
      Var w = belief_;
      if (opt_.selection == Selection::GumbelSoftmax) {
        Tensor g({rows_, k});
        for (auto& x : g.values()) x = rng_.gumbel();
        Var logits = ad::add(ad::log(ad::add_scalar(belief_, 1e-30)), ad::constant(std::move(g)));
        w = ad::softmax(ad::scale(logits, 1.0 / opt_.temperature));
      }
      Var out;
      for (std::size_t j = 0; j < k; ++j) {
        Var term = ad::mul(ad::slice_cols(w, j, j + 1), component_field(j, input));
        out = j == 0 ? term : ad::add(out, term);
      }
      return out;
    }
  }
  throw ConfigError("field: unknown selection");
}

Var ModelField::emission_transition_update(const Var& state, double t) {
  const std::size_t k = spec_.K();
  Var input = ad::concat_cols(std::vector<Var>{state, time_input(t, rows_)});
  Var trans = ad::softmax(ad::reshape(nn::mlp_forward(params_, spec_.transition_mlp(), "transition", input), {rows_ * k, k}));
  Var emis = ad::softmax(nn::mlp_forward(params_, spec_.emission_mlp(), "emission", input));
  return forward_filter_step(belief_, trans, emis, &resets_);
}

void ModelField::update_belief(const Var& state, double t) {
  if (!spec_.mixture() || spec_.membership != Membership::ForwardFilter) return;
  if (t <= belief_history_.back().first) return;
  belief_ = emission_transition_update(state, t);
  belief_history_.emplace_back(t, belief_);
}

void ModelField::begin_step(const Var& state, double t) { update_belief(state, t); }

bool ModelField::stochastic() const {
  if (spec_.stochastic_heads() && opt_.noise_scale > 0.0) return true;
  if (!spec_.mixture() || spec_.K() == 1) return false;
  return opt_.selection == Selection::GumbelSoftmax ||
         (opt_.selection == Selection::HardSample && !opt_.freeze_component);
}

const Var& ModelField::belief_at(double t) const {
  if (!spec_.mixture() || spec_.membership != Membership::ForwardFilter) return belief_;
  for (const auto& [time, b] : belief_history_)
    if (std::abs(time - t) <= 1e-12 * std::max(1.0, std::abs(t))) return b;
  throw DomainError("field: no belief recorded at t=" + std::to_string(t));
}

Var ModelField::assigned_weight(double t) const {
  if (assignment_.empty()) throw ConfigError("field: assigned_weight needs conditioned or frozen hard selection");
  return ad::pick_per_row(belief_at(t), assignment_);
}

}  // namespace svfm::fields
