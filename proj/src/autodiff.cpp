#include "svfm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "svfm/errors.hpp"

namespace svfm::ad {

namespace {

struct Dims {
  std::size_t rows;
  std::size_t cols;
};

Dims dims_of(const Tensor& t) { return {t.rows(), t.cols()}; }

// Output shape of a broadcast between a and b.
Tensor::Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  const Dims da = dims_of(a), db = dims_of(b);
  auto pick = [&](std::size_t x, std::size_t y) -> std::size_t {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()) + " are not broadcast-compatible");
  };
  const std::size_t r = pick(da.rows, db.rows);
  const std::size_t c = pick(da.cols, db.cols);
  if (a.rank() == 1 && b.rank() == 1) return {c};
  return {r, c};
}

// Sums `g` (shaped like the broadcast output) down to the shape of `target`.
Tensor reduce_to(const Tensor& g, const Tensor& target) {
  if (g.shape() == target.shape()) return g;
  const Dims dg = dims_of(g), dt = dims_of(target);
  Tensor out(target.shape());
  for (std::size_t r = 0; r < dg.rows; ++r) {
    const std::size_t tr = dt.rows == 1 ? 0 : r;
    for (std::size_t c = 0; c < dg.cols; ++c) {
      const std::size_t tc = dt.cols == 1 ? 0 : c;
      out[tr * dt.cols + tc] += g[r * dg.cols + c];
    }
  }
  return out;
}

template <typename F>
Tensor broadcast_apply(const Tensor& a, const Tensor& b, const char* op, F&& f) {
  Tensor out(broadcast_shape(a, b, op));
  const Dims da = dims_of(a), db = dims_of(b), d = dims_of(out);
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  for (std::size_t r = 0; r < d.rows; ++r) {
    const std::size_t ar = da.rows == 1 ? 0 : r, br = db.rows == 1 ? 0 : r;
    for (std::size_t c = 0; c < d.cols; ++c) {
      const std::size_t ac = da.cols == 1 ? 0 : c, bc = db.cols == 1 ? 0 : c;
      out[r * d.cols + c] = f(a[ar * da.cols + ac], b[br * db.cols + bc]);
    }
  }
  return out;
}

// Broadcasts `t` up to `shape` (a valid broadcast target).
Tensor expand(const Tensor& t, const Tensor::Shape& shape) {
  if (t.shape() == shape) return t;
  Tensor out(shape);
  const Dims dt = dims_of(t), d = dims_of(out);
  for (std::size_t r = 0; r < d.rows; ++r)
    for (std::size_t c = 0; c < d.cols; ++c)
      out[r * d.cols + c] = t[(dt.rows == 1 ? 0 : r) * dt.cols + (dt.cols == 1 ? 0 : c)];
  return out;
}

template <typename F>
Tensor map(const Tensor& a, F&& f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Param: return "param";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Neg: return "neg";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Relu: return "relu";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Tanh: return "tanh";
    case OpKind::Square: return "square";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Softplus: return "softplus";
    case OpKind::MatMul: return "matmul";
    case OpKind::Sum: return "sum";
    case OpKind::RowSum: return "row_sum";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSumExpRows: return "logsumexp_rows";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::Reshape: return "reshape";
    case OpKind::NormalizeRows: return "normalize_rows";
    case OpKind::PickPerRow: return "pick_per_row";
    case OpKind::LinComb: return "lincomb";
    case OpKind::GatherRows: return "gather_rows";
  }
  return "?";
}

Tape* common_tape(std::span<const Var* const> inputs) {
  Tape* tape = nullptr;
  for (const Var* v : inputs) {
    if (!v->defined()) throw std::invalid_argument("operation on an undefined Var");
    if (!v->tracked()) continue;
    if (v->generation() != v->tape()->generation())
      throw std::logic_error("Var refers to a tape that was cleared");
    if (tape && tape != v->tape()) throw std::logic_error("operands recorded on different tapes");
    tape = v->tape();
  }
  return tape;
}

Var finish(OpKind op, std::initializer_list<const Var*> ins, Tensor value, double scalar = 0.0,
           std::size_t i0 = 0, std::size_t i1 = 0, std::vector<std::size_t> index = {}) {
  if (!value.all_finite()) throw NumericalError(std::string("non-finite result in ") + op_name(op));
  std::vector<const Var*> inputs(ins);
  Tape* tape = common_tape(inputs);
  if (!tape) return Var(std::move(value));
  Tape::Node node;
  node.op = op;
  node.value = std::make_shared<const Tensor>(std::move(value));
  node.scalar = scalar;
  node.i0 = i0;
  node.i1 = i1;
  node.index = std::move(index);
  node.inputs.reserve(inputs.size());
  for (const Var* v : inputs) node.inputs.push_back({v->tracked() ? v->index() : -1, v->shared_value()});
  return tape->record(std::move(node));
}

Var finish_n(OpKind op, std::span<const Var> ins, Tensor value, std::size_t i0 = 0) {
  if (!value.all_finite()) throw NumericalError(std::string("non-finite result in ") + op_name(op));
  std::vector<const Var*> inputs;
  inputs.reserve(ins.size());
  for (const auto& v : ins) inputs.push_back(&v);
  Tape* tape = common_tape(inputs);
  if (!tape) return Var(std::move(value));
  Tape::Node node;
  node.op = op;
  node.value = std::make_shared<const Tensor>(std::move(value));
  node.i0 = i0;
  for (const Var* v : inputs) node.inputs.push_back({v->tracked() ? v->index() : -1, v->shared_value()});
  return tape->record(std::move(node));
}

void accumulate(std::vector<Tensor>& grads, std::int64_t index, const Tensor& g) {
  if (index < 0) return;
  Tensor& slot = grads[static_cast<std::size_t>(index)];
  if (slot.empty()) {
    slot = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
}

Tensor matmul_raw(const Tensor& a, bool ta, const Tensor& b, bool tb) {
  const std::size_t m = ta ? a.cols() : a.rows();
  const std::size_t k = ta ? a.rows() : a.cols();
  const std::size_t kb = tb ? b.cols() : b.rows();
  const std::size_t n = tb ? b.rows() : b.cols();
  if (k != kb)
    throw ShapeError("matmul: inner dimensions differ for " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  Tensor out({m, n});
  const std::size_t ac = a.cols(), bc = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? a[p * ac + i] : a[i * ac + p];
      if (av == 0.0) continue;
      if (!tb) {
        const double* brow = &b.values()[p * bc];
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * b[j * bc + p];
      }
    }
  }
  return out;
}

}  // namespace

Var::Var(Tensor value) : value_(std::make_shared<const Tensor>(std::move(value))) {}

// ---------------------------------------------------------------------------
// ParameterStore

void ParameterStore::add(const std::string& key, Tensor value) {
  if (slots_.count(key)) throw ConfigError("duplicate parameter key '" + key + "'");
  Tensor grad(value.shape());
  slots_.emplace(key, Slot{std::move(value), std::move(grad)});
}

const Tensor& ParameterStore::value(const std::string& key) const {
  auto it = slots_.find(key);
  if (it == slots_.end()) throw std::out_of_range("unknown parameter '" + key + "'");
  return it->second.value;
}

Tensor& ParameterStore::value(const std::string& key) {
  auto it = slots_.find(key);
  if (it == slots_.end()) throw std::out_of_range("unknown parameter '" + key + "'");
  return it->second.value;
}

const Tensor& ParameterStore::grad(const std::string& key) const {
  auto it = slots_.find(key);
  if (it == slots_.end()) throw std::out_of_range("unknown parameter '" + key + "'");
  return it->second.grad;
}

Tensor& ParameterStore::grad(const std::string& key) {
  auto it = slots_.find(key);
  if (it == slots_.end()) throw std::out_of_range("unknown parameter '" + key + "'");
  return it->second.grad;
}

std::vector<std::string> ParameterStore::keys() const {
  std::vector<std::string> out;
  out.reserve(slots_.size());
  for (const auto& [k, _] : slots_) out.push_back(k);
  return out;
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, s] : slots_) n += s.value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [_, s] : slots_) std::fill(s.grad.values().begin(), s.grad.values().end(), 0.0);
}

std::string ParameterStore::to_json() const {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [k, s] : slots_) params[k] = {{"shape", s.value.shape()}, {"values", s.value.data()}};
  return nlohmann::json{{"params", params}}.dump();
}

ParameterStore ParameterStore::from_json(const std::string& text) {
  const auto doc = nlohmann::json::parse(text);
  if (!doc.is_object() || !doc.contains("params") || !doc.at("params").is_object())
    throw ConfigError("parameter document must be an object with a \"params\" object");
  ParameterStore store;
  for (const auto& [k, slot] : doc.at("params").items()) {
    for (const auto& [field, _] : slot.items())
      if (field != "shape" && field != "values")
        throw ConfigError("unknown key '" + field + "' in parameter '" + k + "'");
    Tensor value(slot.at("shape").get<Tensor::Shape>(), slot.at("values").get<std::vector<double>>());
    if (!value.all_finite()) throw ConfigError("non-finite value in parameter '" + k + "'");
    store.add(k, std::move(value));
  }
  return store;
}

bool ParameterStore::operator==(const ParameterStore& other) const {
  if (slots_.size() != other.slots_.size()) return false;
  for (const auto& [k, s] : slots_) {
    auto it = other.slots_.find(k);
    if (it == other.slots_.end() || !(it->second.value == s.value)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::record(Node node) {
  Var v;
  v.value_ = node.value;
  v.tape_ = this;
  v.index_ = static_cast<std::int64_t>(nodes_.size());
  v.generation_ = generation_;
  nodes_.push_back(std::move(node));
  return v;
}

Var Tape::param(ParameterStore& store, const std::string& key) {
  if (bound_store_ && bound_store_ != &store)
    throw std::logic_error("a tape binds parameters from a single store");
  bound_store_ = &store;
  if (auto it = param_nodes_.find(key); it != param_nodes_.end()) {
    const auto& n = nodes_[static_cast<std::size_t>(it->second)];
    Var v;
    v.value_ = n.value;
    v.tape_ = this;
    v.index_ = it->second;
    v.generation_ = generation_;
    return v;
  }
  Node node;
  node.op = OpKind::Param;
  node.value = std::make_shared<const Tensor>(store.value(key));
  node.i0 = param_keys_.size();
  param_keys_.push_back(key);
  Var v = record(std::move(node));
  param_nodes_[key] = v.index();
  return v;
}

Var Tape::leaf(Tensor value) {
  Node node;
  node.op = OpKind::Leaf;
  node.value = std::make_shared<const Tensor>(std::move(value));
  return record(std::move(node));
}

void Tape::clear() {
  nodes_.clear();
  grads_.clear();
  param_nodes_.clear();
  param_keys_.clear();
  bound_store_ = nullptr;
  has_grads_ = false;
  ++generation_;
}

const Tensor& Tape::grad(const Var& v) const {
  if (!has_grads_) throw std::logic_error("grad() requested before backward()");
  if (v.tape() != this || v.generation() != generation_) throw std::logic_error("Var is not on this tape");
  const auto& g = grads_[static_cast<std::size_t>(v.index())];
  if (g.empty()) {
    static thread_local Tensor zero;
    zero = Tensor(v.shape());
    return zero;
  }
  return g;
}

void Tape::backward(const Var& root, ParameterStore& store) {
  if (!root.defined() || !root.tracked()) throw std::logic_error("backward: root is not traced");
  if (root.tape() != this) throw std::logic_error("backward: root belongs to another tape");
  if (root.generation() != generation_) throw std::logic_error("backward: tape was cleared");
  if (root.value().size() != 1)
    throw ShapeError("backward: root must be scalar, got " + shape_string(root.shape()));
  if (bound_store_ && bound_store_ != &store)
    throw std::logic_error("backward: store differs from the one parameters were bound from");

  store.zero_grad();
  grads_.assign(nodes_.size(), Tensor());
  grads_[static_cast<std::size_t>(root.index())] = Tensor(root.shape(), 1.0);
  has_grads_ = true;

  for (std::int64_t i = root.index(); i >= 0; --i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    const Tensor& g = grads_[static_cast<std::size_t>(i)];
    if (g.empty()) continue;
    const Tensor& out = *n.value;
    auto in = [&](std::size_t k) -> const Tensor& { return *n.inputs[k].value; };
    auto idx = [&](std::size_t k) { return n.inputs[k].index; };
    auto wants = [&](std::size_t k) { return n.inputs[k].index >= 0; };

    switch (n.op) {
      case OpKind::Leaf:
        break;
      case OpKind::Param: {
        Tensor& slot = store.grad(param_keys_[n.i0]);
        for (std::size_t j = 0; j < g.size(); ++j) slot[j] += g[j];
        break;
      }
      case OpKind::Add:
        if (wants(0)) accumulate(grads_, idx(0), reduce_to(g, in(0)));
        if (wants(1)) accumulate(grads_, idx(1), reduce_to(g, in(1)));
        break;
      case OpKind::Sub:
        if (wants(0)) accumulate(grads_, idx(0), reduce_to(g, in(0)));
        if (wants(1)) accumulate(grads_, idx(1), reduce_to(map(g, [](double x) { return -x; }), in(1)));
        break;
      case OpKind::Mul: {
        if (wants(0)) {
          const Tensor bb = expand(in(1), g.shape());
          Tensor t(g.shape());
          for (std::size_t j = 0; j < g.size(); ++j) t[j] = g[j] * bb[j];
          accumulate(grads_, idx(0), reduce_to(t, in(0)));
        }
        if (wants(1)) {
          const Tensor aa = expand(in(0), g.shape());
          Tensor t(g.shape());
          for (std::size_t j = 0; j < g.size(); ++j) t[j] = g[j] * aa[j];
          accumulate(grads_, idx(1), reduce_to(t, in(1)));
        }
        break;
      }
      case OpKind::Div: {
        const Tensor bb = expand(in(1), g.shape());
        if (wants(0)) {
          Tensor t(g.shape());
          for (std::size_t j = 0; j < g.size(); ++j) t[j] = g[j] / bb[j];
          accumulate(grads_, idx(0), reduce_to(t, in(0)));
        }
        if (wants(1)) {
          Tensor t(g.shape());
          for (std::size_t j = 0; j < g.size(); ++j) t[j] = -g[j] * out[j] / bb[j];
          accumulate(grads_, idx(1), reduce_to(t, in(1)));
        }
        break;
      }
      case OpKind::Neg:
        accumulate(grads_, idx(0), map(g, [](double x) { return -x; }));
        break;
      case OpKind::Scale: {
        const double c = n.scalar;
        accumulate(grads_, idx(0), map(g, [c](double x) { return c * x; }));
        break;
      }
      case OpKind::AddScalar:
        accumulate(grads_, idx(0), g);
        break;
      case OpKind::Relu: {
        Tensor t(g.shape());
        for (std::size_t j = 0; j < g.size(); ++j) t[j] = in(0)[j] > 0.0 ? g[j] : 0.0;
        accumulate(grads_, idx(0), t);
        break;
      }
      case OpKind::Exp: {
        Tensor t(g.shape());
        for (std::size_t j = 0; j < g.size(); ++j) t[j] = g[j] * out[j];
        accumulate(grads_, idx(0), t);
        break;
      }
      case OpKind::Log: {
        Tensor t(g.shape());
        for (std::size_t j = 0; j < g.size(); ++j) t[j] = g[j] / in(0)[j];
        accumulate(grads_, idx(0), t);
        break;
      }
      case OpKind::Tanh: {
        Tensor t(g.shape());
        for (std::size_t j = 0; j < g.size(); ++j) t[j] = g[j] * (1.0 - out[j] * out[j]);
        accumulate(grads_, idx(0), t);
        break;
      }
      case OpKind::Square: {
        Tensor t(g.shape());
        for (std::size_t j = 0; j < g.size(); ++j) t[j] = 2.0 * g[j] * in(0)[j];
        accumulate(grads_, idx(0), t);
        break;
      }
      case OpKind::Sqrt: {
        // Subgradient 0 at the origin, where the derivative is unbounded.
        Tensor t(g.shape());
        for (std::size_t j = 0; j < g.size(); ++j) t[j] = out[j] > 0.0 ? g[j] / (2.0 * out[j]) : 0.0;
        accumulate(grads_, idx(0), t);
        break;
      }
      case OpKind::Softplus: {
        Tensor t(g.shape());
        for (std::size_t j = 0; j < g.size(); ++j) {
          const double x = in(0)[j];
          const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
          t[j] = g[j] * s;
        }
        accumulate(grads_, idx(0), t);
        break;
      }
      case OpKind::MatMul:
        if (wants(0)) accumulate(grads_, idx(0), matmul_raw(g, false, in(1), true).reshaped(in(0).shape()));
        if (wants(1)) accumulate(grads_, idx(1), matmul_raw(in(0), true, g, false).reshaped(in(1).shape()));
        break;
      case OpKind::Sum:
        accumulate(grads_, idx(0), Tensor(in(0).shape(), g[0]));
        break;
      case OpKind::RowSum: {
        const Tensor& x = in(0);
        const std::size_t r = x.rows(), c = x.cols();
        Tensor t(x.shape());
        for (std::size_t a = 0; a < r; ++a)
          for (std::size_t b = 0; b < c; ++b) t[a * c + b] = g[a];
        accumulate(grads_, idx(0), t);
        break;
      }
      case OpKind::Softmax: {
        const std::size_t r = out.rows(), c = out.cols();
        Tensor t(out.shape());
        for (std::size_t a = 0; a < r; ++a) {
          double dot = 0.0;
          for (std::size_t b = 0; b < c; ++b) dot += g[a * c + b] * out[a * c + b];
          for (std::size_t b = 0; b < c; ++b) t[a * c + b] = out[a * c + b] * (g[a * c + b] - dot);
        }
        accumulate(grads_, idx(0), t);
        break;
      }
      case OpKind::LogSumExpRows: {
        const Tensor& x = in(0);
        const std::size_t r = x.rows(), c = x.cols();
        Tensor t(x.shape());
        for (std::size_t a = 0; a < r; ++a)
          for (std::size_t b = 0; b < c; ++b) t[a * c + b] = g[a] * std::exp(x[a * c + b] - out[a]);
        accumulate(grads_, idx(0), t);
        break;
      }
      case OpKind::ConcatCols: {
        const std::size_t r = out.rows(), c = out.cols();
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& x = in(k);
          const std::size_t w = x.cols();
          if (wants(k)) {
            Tensor t(x.shape());
            for (std::size_t a = 0; a < r; ++a)
              for (std::size_t b = 0; b < w; ++b) t[a * w + b] = g[a * c + offset + b];
            accumulate(grads_, idx(k), t);
          }
          offset += w;
        }
        break;
      }
      case OpKind::SliceCols: {
        const Tensor& x = in(0);
        const std::size_t r = x.rows(), c = x.cols(), w = n.i1 - n.i0;
        Tensor t(x.shape());
        for (std::size_t a = 0; a < r; ++a)
          for (std::size_t b = 0; b < w; ++b) t[a * c + n.i0 + b] = g[a * w + b];
        accumulate(grads_, idx(0), t);
        break;
      }
      case OpKind::ConcatRows: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& x = in(k);
          if (wants(k)) {
            Tensor t(x.shape());
            std::copy_n(g.values().begin() + static_cast<std::ptrdiff_t>(offset), x.size(), t.values().begin());
            accumulate(grads_, idx(k), t);
          }
          offset += x.size();
        }
        break;
      }
      case OpKind::SliceRows: {
        const Tensor& x = in(0);
        Tensor t(x.shape());
        const std::size_t c = x.cols();
        std::copy(g.values().begin(), g.values().end(), t.values().begin() + static_cast<std::ptrdiff_t>(n.i0 * c));
        accumulate(grads_, idx(0), t);
        break;
      }
      case OpKind::Reshape:
        accumulate(grads_, idx(0), g.reshaped(in(0).shape()));
        break;
      case OpKind::NormalizeRows: {
        const Tensor& x = in(0);
        const std::size_t r = x.rows(), c = x.cols();
        Tensor t(x.shape());
        for (std::size_t a = 0; a < r; ++a) {
          double norm2 = 0.0, dot = 0.0;
          for (std::size_t b = 0; b < c; ++b) {
            norm2 += x[a * c + b] * x[a * c + b];
            dot += out[a * c + b] * g[a * c + b];
          }
          const double norm = std::sqrt(norm2);
          if (norm < n.scalar) continue;
          for (std::size_t b = 0; b < c; ++b) t[a * c + b] = (g[a * c + b] - out[a * c + b] * dot) / norm;
        }
        accumulate(grads_, idx(0), t);
        break;
      }
      case OpKind::PickPerRow: {
        const Tensor& x = in(0);
        const std::size_t c = x.cols();
        Tensor t(x.shape());
        for (std::size_t a = 0; a < n.index.size(); ++a) t[a * c + n.index[a]] = g[a];
        accumulate(grads_, idx(0), t);
        break;
      }
      case OpKind::LinComb: {
        if (wants(0)) accumulate(grads_, idx(0), g);
        for (std::size_t k = 1; k < n.inputs.size(); ++k) {
          if (!wants(k)) continue;
          const double c = n.coeffs[k - 1];
          accumulate(grads_, idx(k), map(g, [c](double x) { return c * x; }));
        }
        break;
      }
      case OpKind::GatherRows: {
        const Tensor& x = in(0);
        const std::size_t c = x.cols();
        Tensor t(x.shape());
        for (std::size_t a = 0; a < n.index.size(); ++a)
          for (std::size_t b = 0; b < c; ++b) t[n.index[a] * c + b] += g[a * c + b];
        accumulate(grads_, idx(0), t);
        break;
      }
    }
  }
}

Var ParamBinder::operator()(const std::string& key) {
  if (tape_) return tape_->param(*store_, key);
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  return cache_.emplace(key, Var(store_->value(key))).first->second;
}

// ---------------------------------------------------------------------------
// Operations

Var add(const Var& a, const Var& b) {
  return finish(OpKind::Add, {&a, &b}, broadcast_apply(a.value(), b.value(), "add", std::plus<>()));
}

Var sub(const Var& a, const Var& b) {
  return finish(OpKind::Sub, {&a, &b}, broadcast_apply(a.value(), b.value(), "sub", std::minus<>()));
}

Var mul(const Var& a, const Var& b) {
  return finish(OpKind::Mul, {&a, &b}, broadcast_apply(a.value(), b.value(), "mul", std::multiplies<>()));
}

Var div(const Var& a, const Var& b) {
  return finish(OpKind::Div, {&a, &b}, broadcast_apply(a.value(), b.value(), "div", std::divides<>()));
}

Var neg(const Var& a) { return finish(OpKind::Neg, {&a}, map(a.value(), [](double x) { return -x; })); }

Var scale(const Var& a, double c) {
  return finish(OpKind::Scale, {&a}, map(a.value(), [c](double x) { return c * x; }), c);
}

Var add_scalar(const Var& a, double c) {
  return finish(OpKind::AddScalar, {&a}, map(a.value(), [c](double x) { return x + c; }), c);
}

Var relu(const Var& a) {
  return finish(OpKind::Relu, {&a}, map(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }));
}

Var exp(const Var& a) { return finish(OpKind::Exp, {&a}, map(a.value(), [](double x) { return std::exp(x); })); }

Var log(const Var& a) {
  for (double x : a.value().values())
    if (!(x > 0.0)) throw DomainError("log of non-positive value " + std::to_string(x));
  return finish(OpKind::Log, {&a}, map(a.value(), [](double x) { return std::log(x); }));
}

Var tanh(const Var& a) { return finish(OpKind::Tanh, {&a}, map(a.value(), [](double x) { return std::tanh(x); })); }

Var square(const Var& a) { return finish(OpKind::Square, {&a}, map(a.value(), [](double x) { return x * x; })); }

Var sqrt(const Var& a) {
  for (double x : a.value().values())
    if (x < 0.0) throw DomainError("sqrt of negative value " + std::to_string(x));
  return finish(OpKind::Sqrt, {&a}, map(a.value(), [](double x) { return std::sqrt(x); }));
}

Var softplus(const Var& a) {
  return finish(OpKind::Softplus, {&a},
                map(a.value(), [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }));
}

Var matmul(const Var& a, const Var& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2)
    throw ShapeError("matmul expects rank-2 operands, got " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  return finish(OpKind::MatMul, {&a, &b}, matmul_raw(a.value(), false, b.value(), false));
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  return finish(OpKind::Sum, {&a}, Tensor::scalar(s));
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var row_sum(const Var& a) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out({r, 1});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += x[i * c + j];
  return finish(OpKind::RowSum, {&a}, std::move(out));
}

Var softmax(const Var& a) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) m = std::max(m, x[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (out[i * c + j] = std::exp(x[i * c + j] - m));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
  }
  return finish(OpKind::Softmax, {&a}, std::move(out));
}

Var logsumexp_rows(const Var& a) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out({r, 1});
  for (std::size_t i = 0; i < r; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) m = std::max(m, x[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(x[i * c + j] - m);
    out[i] = m + std::log(s);
  }
  return finish(OpKind::LogSumExpRows, {&a}, std::move(out));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of zero tensors");
  const std::size_t r = parts[0].value().rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != r)
      throw ShapeError("concat_cols: row mismatch " + shape_string(parts[0].shape()) + " vs " +
                       shape_string(p.shape()));
    c += p.value().cols();
  }
  Tensor out({r, c});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const Tensor& x = p.value();
    const std::size_t w = x.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * c + offset + j] = x[i * w + j];
    offset += w;
  }
  return finish_n(OpKind::ConcatCols, parts, std::move(out));
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  if (begin >= end || end > c)
    throw ShapeError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                     shape_string(x.shape()));
  const std::size_t w = end - begin;
  Tensor out({r, w});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * c + begin + j];
  return finish(OpKind::SliceCols, {&a}, std::move(out), 0.0, begin, end);
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of zero tensors");
  const std::size_t c = parts[0].value().cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != c)
      throw ShapeError("concat_rows: column mismatch " + shape_string(parts[0].shape()) + " vs " +
                       shape_string(p.shape()));
    r += p.value().rows();
  }
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& p : parts) values.insert(values.end(), p.value().data().begin(), p.value().data().end());
  return finish_n(OpKind::ConcatRows, parts, Tensor({r, c}, std::move(values)));
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  if (begin >= end || end > r)
    throw ShapeError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                     shape_string(x.shape()));
  std::vector<double> values(x.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                             x.data().begin() + static_cast<std::ptrdiff_t>(end * c));
  return finish(OpKind::SliceRows, {&a}, Tensor({end - begin, c}, std::move(values)), 0.0, begin, end);
}

Var reshape(const Var& a, Tensor::Shape shape) {
  return finish(OpKind::Reshape, {&a}, a.value().reshaped(std::move(shape)));
}

Var normalize_rows(const Var& a, double min_norm) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < c; ++j) n2 += x[i * c + j] * x[i * c + j];
    const double n = std::sqrt(n2);
    if (n < min_norm) continue;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] / n;
  }
  return finish(OpKind::NormalizeRows, {&a}, std::move(out), min_norm);
}

Var pick_per_row(const Var& a, std::vector<std::size_t> index) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  if (index.size() != r) throw ShapeError("pick_per_row: need one index per row");
  Tensor out({r, 1});
  for (std::size_t i = 0; i < r; ++i) {
    if (index[i] >= c) throw ShapeError("pick_per_row: index out of range");
    out[i] = x[i * c + index[i]];
  }
  return finish(OpKind::PickPerRow, {&a}, std::move(out), 0.0, 0, 0, std::move(index));
}

Var gather_rows(const Var& a, std::vector<std::size_t> index) {
  const Tensor& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out({index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) throw ShapeError("gather_rows: index out of range");
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[index[i] * c + j];
  }
  return finish(OpKind::GatherRows, {&a}, std::move(out), 0.0, 0, 0, std::move(index));
}

Var lincomb(const Var& base, std::span<const double> coeffs, std::span<const Var> terms) {
  if (coeffs.size() != terms.size()) throw ShapeError("lincomb: coefficient count differs from term count");
  Tensor out = base.value();
  std::vector<const Var*> inputs{&base};
  std::vector<double> used;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (coeffs[k] == 0.0) continue;
    const Tensor& x = terms[k].value();
    if (x.shape() != out.shape())
      throw ShapeError("lincomb: " + shape_string(out.shape()) + " vs " + shape_string(x.shape()));
    for (std::size_t j = 0; j < x.size(); ++j) out[j] += coeffs[k] * x[j];
    inputs.push_back(&terms[k]);
    used.push_back(coeffs[k]);
  }
  if (!out.all_finite()) throw NumericalError("non-finite result in lincomb");
  Tape* tape = common_tape(inputs);
  if (!tape) return Var(std::move(out));
  Tape::Node node;
  node.op = OpKind::LinComb;
  node.value = std::make_shared<const Tensor>(std::move(out));
  node.coeffs = std::move(used);
  for (const Var* v : inputs) node.inputs.push_back({v->tracked() ? v->index() : -1, v->shared_value()});
  return tape->record(std::move(node));
}

}  // namespace svfm::ad
