#include "svfm/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "svfm/errors.hpp"
#include "svfm/json_util.hpp"

namespace svfm::losses {

using ad::Var;

namespace {

Var mean_rows(const Var& per_row) { return ad::mean(per_row); }

void require_rows(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

}  // namespace

// ---- MDL ----

Var mdl_rows(const GaussianMixture& mixture, const Tensor& target) {
  const std::size_t k = mixture.means.size();
  if (k == 0 || mixture.variances.size() != k) throw ShapeError("mdl: need one mean and one variance per component");
  const Tensor& w = mixture.weights.value();
  if (w.rows() != target.rows() || w.cols() != k)
    throw ShapeError("mdl: weights must be [" + std::to_string(target.rows()) + "x" + std::to_string(k) + "], got " +
                     shape_string(w.shape()));
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (w.at(r, j) < 0.0) throw DomainError("mdl: negative mixture weight");
      s += w.at(r, j);
    }
    if (std::abs(s - 1.0) > 1e-6) throw DomainError("mdl: mixture weights do not sum to 1");
  }
  const Var y = ad::constant(target);
  std::vector<Var> log_terms;
  log_terms.reserve(k);
  for (std::size_t j = 0; j < k; ++j) {
    require_rows(mixture.means[j].value(), target, "mdl mean");
    require_rows(mixture.variances[j].value(), target, "mdl variance");
    for (double v : mixture.variances[j].value().values())
      if (!(v > 0.0)) throw DomainError("mdl: variance must be positive");
    const Var& tau = mixture.variances[j];
    Var quad = ad::div(ad::square(ad::sub(y, mixture.means[j])), tau);
    Var logdet = ad::log(ad::scale(tau, 2.0 * std::numbers::pi));
    log_terms.push_back(ad::scale(ad::row_sum(ad::add(quad, logdet)), -0.5));
  }
  Var logits = ad::add(ad::concat_cols(log_terms), ad::log(ad::add_scalar(mixture.weights, 1e-300)));
  return ad::neg(ad::logsumexp_rows(logits));
}

Var mdl(const GaussianMixture& mixture, const Tensor& target) { return mean_rows(mdl_rows(mixture, target)); }

GaussianMixture moment_match(const Var& samples, const Var& weights, std::size_t m, double variance_floor) {
  const std::size_t k = weights.value().cols(), r = weights.value().rows(), d = samples.value().cols();
  if (m == 0) throw ConfigError("moment_match: need at least one sample per component");
  if (samples.value().rows() != k * m * r)
    throw ShapeError("moment_match: expected " + std::to_string(k * m * r) + " sample rows, got " +
                     shape_string(samples.shape()));
  if (!(variance_floor > 0.0)) throw ConfigError("moment_match: variance floor must be positive");
  GaussianMixture out{weights, {}, {}};
  const Var avg = ad::constant(Tensor({1, m}, 1.0 / static_cast<double>(m)));
  for (std::size_t j = 0; j < k; ++j) {
    Var block = ad::reshape(ad::slice_rows(samples, j * m * r, (j + 1) * m * r), {m, r * d});
    Var mu = ad::matmul(avg, block);
    Var var;
    if (m > 1) {
      const Var unbiased = ad::constant(Tensor({1, m}, 1.0 / static_cast<double>(m - 1)));
      var = ad::add_scalar(ad::matmul(unbiased, ad::square(ad::sub(block, mu))), variance_floor);
    } else {
      var = ad::constant(Tensor({1, r * d}, variance_floor));
    }
    out.means.push_back(ad::reshape(mu, {r, d}));
    out.variances.push_back(ad::reshape(var, {r, d}));
  }
  return out;
}

// ---- path regularisers ----

Var transport_loss(std::span<const Var> h) {
  if (h.size() < 2) throw ShapeError("transport_loss: need at least two checkpoints");
  Var total;
  for (std::size_t i = 1; i < h.size(); ++i) {
    Var seg = ad::row_sum(ad::square(ad::sub(h[i], h[i - 1])));
    total = i == 1 ? seg : ad::add(total, seg);
  }
  return ad::scale(mean_rows(total), 1.0 / static_cast<double>(h.size() - 1));
}

Var directional_variance_loss(std::span<const Var> g) {
  if (g.empty()) throw ShapeError("directional_variance_loss: need at least one evaluation");
  const double inv = 1.0 / static_cast<double>(g.size());
  std::vector<double> coeffs(g.size(), inv);
  Var avg = ad::lincomb(ad::constant(Tensor(g.front().shape(), 0.0)), coeffs, g);
  Var total;
  for (std::size_t i = 0; i < g.size(); ++i) {
    Var dev = ad::row_sum(ad::square(ad::sub(g[i], avg)));
    total = i == 0 ? dev : ad::add(total, dev);
  }
  return ad::scale(mean_rows(total), inv);
}

// ---- interpolation ----

void TrajectorySample::validate() const {
  if (t.size() < 2) throw ConfigError("trajectory: need at least two timestamps");
  if (X.rank() != 2 || X.rows() != t.size())
    throw ConfigError("trajectory: X must have one row per timestamp, got " + shape_string(X.shape()));
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) throw ConfigError("trajectory: non-finite timestamp");
    if (i > 0 && !(t[i] > t[i - 1])) throw ConfigError("trajectory: timestamps must be strictly increasing");
  }
  if (!X.all_finite()) throw ConfigError("trajectory: non-finite measurement");
}

CubicSpline::CubicSpline(std::vector<double> t, Tensor X) : t_(std::move(t)), x_(std::move(X)) {
  TrajectorySample{t_, x_}.validate();
  const std::size_t n = t_.size(), d = x_.cols();
  m_ = Tensor({n, d});
  if (n < 3) return;
  // tridiagonal system for the interior second derivatives, natural ends
  std::vector<double> h(n - 1);
  for (std::size_t i = 0; i + 1 < n; ++i) h[i] = t_[i + 1] - t_[i];
  const std::size_t m = n - 2;
  std::vector<double> diag(m), upper(m), rhs(m);
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t i = 1; i + 1 < n; ++i) {
      diag[i - 1] = 2.0 * (h[i - 1] + h[i]);
      upper[i - 1] = h[i];
      rhs[i - 1] = 6.0 * ((x_.at(i + 1, c) - x_.at(i, c)) / h[i] - (x_.at(i, c) - x_.at(i - 1, c)) / h[i - 1]);
    }
    // Thomas: sub-diagonal entry of row j is h[j]
    for (std::size_t j = 1; j < m; ++j) {
      const double f = h[j] / diag[j - 1];
      diag[j] -= f * upper[j - 1];
      rhs[j] -= f * rhs[j - 1];
    }
    for (std::size_t j = m; j-- > 0;) {
      const double next = j + 1 < m ? m_.at(j + 2, c) : 0.0;
      m_.at(j + 1, c) = (rhs[j] - upper[j] * next) / diag[j];
    }
  }
}

Tensor CubicSpline::operator()(double t) const {
  if (!(t >= t_.front() && t <= t_.back()))
    throw DomainError("cubic_interp: t=" + std::to_string(t) + " outside [" + std::to_string(t_.front()) + ", " +
                      std::to_string(t_.back()) + "]");
  const std::size_t d = x_.cols();
  std::size_t i = static_cast<std::size_t>(std::upper_bound(t_.begin(), t_.end(), t) - t_.begin());
  i = std::min(i, t_.size() - 1) - 1;
  Tensor out({1, d});
  const double h = t_[i + 1] - t_[i];
  const double a = (t_[i + 1] - t) / h, b = (t - t_[i]) / h;
  for (std::size_t c = 0; c < d; ++c) {
    out[c] = a * x_.at(i, c) + b * x_.at(i + 1, c) +
             ((a * a * a - a) * m_.at(i, c) + (b * b * b - b) * m_.at(i + 1, c)) * h * h / 6.0;
  }
  return out;
}

Tensor cubic_interp(const TrajectorySample& sample, double t) { return CubicSpline(sample.t, sample.X)(t); }

// ---- forecasting ----

Var squared_error_rows(const Var& h, const Tensor& target) {
  require_rows(h.value(), target, "squared_error");
  return ad::row_sum(ad::square(ad::sub(h, ad::constant(target))));
}

Var forecast_loss(std::span<const Var> predictions, std::span<const Tensor> targets) {
  if (predictions.empty() || predictions.size() != targets.size())
    throw ShapeError("forecast_loss: need one target per prediction");
  Var total;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    Var term = mean_rows(squared_error_rows(predictions[i], targets[i]));
    total = i == 0 ? term : ad::add(total, term);
  }
  return ad::scale(total, 1.0 / static_cast<double>(predictions.size()));
}

Var forecast_loss(const ode::SolveRecord& record, const TrajectorySample& sample) {
  if (record.times.size() < 2) throw ShapeError("forecast_loss: record has no checkpoints after t0");
  CubicSpline spline(sample.t, sample.X);
  std::vector<Var> preds(record.states.begin() + 1, record.states.end());
  std::vector<Tensor> targets;
  for (std::size_t i = 1; i < record.times.size(); ++i) {
    const Tensor x = spline(record.times[i]);
    const std::size_t rows = record.states[i].value().rows(), d = x.size();
    Tensor tiled({rows, d});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < d; ++c) tiled.at(r, c) = x[c];
    targets.push_back(std::move(tiled));
  }
  return forecast_loss(preds, targets);
}

Var forecast_loss_mdl(std::span<const GaussianMixture> predictions, std::span<const Tensor> targets) {
  if (predictions.empty() || predictions.size() != targets.size())
    throw ShapeError("forecast_loss: need one target per prediction");
  Var total;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    Var term = mdl(predictions[i], targets[i]);
    total = i == 0 ? term : ad::add(total, term);
  }
  return ad::scale(total, 1.0 / static_cast<double>(predictions.size()));
}

// ---- classification ----

Var cross_entropy(const Var& logits, std::span<const std::size_t> labels) {
  if (labels.size() != logits.value().rows()) throw ShapeError("cross_entropy: need one label per row");
  Var log_probs = ad::sub(logits, ad::logsumexp_rows(logits));
  return ad::neg(ad::mean(ad::pick_per_row(log_probs, {labels.begin(), labels.end()})));
}

Var mixture_cross_entropy(const Var& weights, std::span<const Var> probs, std::span<const std::size_t> labels) {
  const std::size_t k = weights.value().cols();
  if (probs.size() != k) throw ShapeError("mixture_cross_entropy: need one probability table per component");
  if (labels.size() != weights.value().rows()) throw ShapeError("mixture_cross_entropy: need one label per row");
  std::vector<std::size_t> idx(labels.begin(), labels.end());
  Var like;
  for (std::size_t j = 0; j < k; ++j) {
    Var term = ad::mul(ad::slice_cols(weights, j, j + 1), ad::pick_per_row(probs[j], idx));
    like = j == 0 ? term : ad::add(like, term);
  }
  return ad::neg(ad::mean(ad::log(ad::add_scalar(like, 1e-300))));
}

// ---- configuration ----

std::string to_string(Term t) {
  switch (t) {
    case Term::MDL: return "MDL";
    case Term::TL: return "TL";
    case Term::DV: return "DV";
    case Term::FL: return "FL";
    case Term::CE: return "CE";
  }
  return "?";
}

Term parse_term(const std::string& s) {
  for (Term t : {Term::MDL, Term::TL, Term::DV, Term::FL, Term::CE})
    if (to_string(t) == s) return t;
  throw ConfigError("unknown loss term '" + s + "' (MDL, TL, DV, FL, CE)");
}

void LossConfig::validate() const {
  if (terms.empty()) throw ConfigError("loss: no terms configured");
  if (has(Term::FL) && (has(Term::TL) || has(Term::DV)))
    throw ConfigError("loss: FL cannot be combined with TL or DV");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("loss: lambda must be a finite non-negative number");
}

nlohmann::json LossConfig::to_json() const {
  nlohmann::json names = nlohmann::json::array();
  for (Term t : terms) names.push_back(to_string(t));
  return {{"terms", names}, {"lambda", lambda}, {"inner", inner == InnerLoss::MDL ? "MDL" : "squared_error"}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j) {
  const std::string ctx = "loss";
  json_util::check_keys(j, ctx, {"terms", "lambda", "inner"});
  LossConfig c;
  if (j.contains("terms")) {
    c.terms.clear();
    for (const auto& s : json_util::get<std::vector<std::string>>(j, "terms", ctx)) c.terms.insert(parse_term(s));
  }
  c.lambda = json_util::get_or<double>(j, "lambda", c.lambda, ctx);
  const auto inner = json_util::get_or<std::string>(j, "inner", "squared_error", ctx);
  if (inner == "MDL") {
    c.inner = InnerLoss::MDL;
  } else if (inner == "squared_error") {
    c.inner = InnerLoss::SquaredError;
  } else {
    throw ConfigError("loss: unknown inner loss '" + inner + "' (squared_error, MDL)");
  }
  c.validate();
  return c;
}

Var combined_loss(const LossConfig& config, const LossParts& parts) {
  config.validate();
  auto need = [&](Term t, const std::optional<Var>& v) -> const Var& {
    if (!v) throw ConfigError("loss: term " + to_string(t) + " is configured but was not computed");
    return *v;
  };
  std::optional<Var> total;
  auto plus = [&](const Var& v) { total = total ? ad::add(*total, v) : v; };
  if (config.has(Term::CE)) plus(need(Term::CE, parts.ce));
  if (config.has(Term::MDL)) plus(need(Term::MDL, parts.mdl));
  if (config.has(Term::FL)) plus(need(Term::FL, parts.fl));
  if (config.lambda > 0.0) {
    if (config.has(Term::TL)) plus(ad::scale(need(Term::TL, parts.tl), config.lambda));
    if (config.has(Term::DV)) plus(ad::scale(need(Term::DV, parts.dv), config.lambda));
  }
  if (!total) throw ConfigError("loss: no predictive term configured");
  return *total;
}

}  // namespace svfm::losses
