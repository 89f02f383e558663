#pragma once

// Reverse-mode automatic differentiation over small dense tensors.
//
// A Var is an immutable value plus, optionally, a position on a Tape. Operations
// record a node only when at least one input is tracked, so computations built
// purely from constants and untracked parameters cost no tape memory. That is
// how inference runs: bind parameters without a tape and nothing is recorded.

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "svfm/tensor.hpp"

namespace svfm::ad {

class Tape;

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value);

  const Tensor& value() const { return *value_; }
  const Tensor::Shape& shape() const { return value_->shape(); }
  bool defined() const { return static_cast<bool>(value_); }
  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::int64_t index() const { return index_; }
  std::uint64_t generation() const { return generation_; }
  std::shared_ptr<const Tensor> shared_value() const { return value_; }

 private:
  friend class Tape;
  std::shared_ptr<const Tensor> value_;
  Tape* tape_ = nullptr;
  std::int64_t index_ = -1;
  std::uint64_t generation_ = 0;
};

inline Var constant(Tensor t) { return Var(std::move(t)); }

/// Named parameter tensors with gradient slots of identical shape.
class ParameterStore {
 public:
  void add(const std::string& key, Tensor value);
  bool contains(const std::string& key) const { return slots_.count(key) != 0; }
  const Tensor& value(const std::string& key) const;
  Tensor& value(const std::string& key);
  const Tensor& grad(const std::string& key) const;
  Tensor& grad(const std::string& key);
  std::vector<std::string> keys() const;
  std::size_t parameter_count() const;
  void zero_grad();

  // {"params": {path: {"shape": [...], "values": [...]}}}
  std::string to_json() const;
  static ParameterStore from_json(const std::string& text);

  bool operator==(const ParameterStore& other) const;

 private:
  struct Slot {
    Tensor value;
    Tensor grad;
  };
  std::map<std::string, Slot> slots_;
};

enum class OpKind {
  Leaf,
  Param,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,
  AddScalar,
  Relu,
  Exp,
  Log,
  Tanh,
  Square,
  Sqrt,
  Softplus,
  MatMul,
  Sum,
  RowSum,
  Softmax,
  LogSumExpRows,
  ConcatCols,
  SliceCols,
  ConcatRows,
  SliceRows,
  Reshape,
  NormalizeRows,
  PickPerRow,
  LinComb,
  GatherRows,
};

/// Append-only record of a computation. Nodes are stored in creation order,
/// so parents always precede their children and the reverse sweep needs no sort.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Tracked leaf bound to a store slot; repeated calls within one generation
  /// return the same node.
  Var param(ParameterStore& store, const std::string& key);
  /// Tracked leaf not tied to a store; its gradient is available through grad().
  Var leaf(Tensor value);

  /// Reverse sweep from a scalar root. Every gradient slot of `store` is
  /// overwritten: reachable parameters receive d(root)/d(param), others zero.
  void backward(const Var& root, ParameterStore& store);
  /// Gradient of the last backward() with respect to a tracked node.
  const Tensor& grad(const Var& v) const;

  void clear();
  std::size_t size() const { return nodes_.size(); }
  std::uint64_t generation() const { return generation_; }

  struct Input {
    std::int64_t index = -1;
    std::shared_ptr<const Tensor> value;
  };
  struct Node {
    OpKind op = OpKind::Leaf;
    std::vector<Input> inputs;
    std::shared_ptr<const Tensor> value;
    double scalar = 0.0;
    std::size_t i0 = 0;
    std::size_t i1 = 0;
    std::vector<std::size_t> index;
    std::vector<double> coeffs;
  };

  // Used by operation implementations.
  Var record(Node node);

 private:
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::map<std::string, std::int64_t> param_nodes_;
  std::vector<std::string> param_keys_;
  const ParameterStore* bound_store_ = nullptr;
  std::uint64_t generation_ = 1;
  bool has_grads_ = false;
};

/// Resolves parameter paths to Vars: tracked leaves when a tape is given,
/// cached constants otherwise.
class ParamBinder {
 public:
  ParamBinder(ParameterStore& store, Tape* tape) : store_(&store), tape_(tape) {}
  Var operator()(const std::string& key);
  ParameterStore& store() const { return *store_; }
  Tape* tape() const { return tape_; }

 private:
  ParameterStore* store_;
  Tape* tape_;
  std::map<std::string, Var> cache_;
};

// Elementwise binary operations broadcast a dimension of size 1 against any size.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var relu(const Var& a);
Var exp(const Var& a);
/// Throws DomainError on any non-positive input.
Var log(const Var& a);
Var tanh(const Var& a);
Var square(const Var& a);
/// Throws DomainError on negative input.
Var sqrt(const Var& a);
Var softplus(const Var& a);

Var matmul(const Var& a, const Var& b);

/// Sum of all entries, shape [1].
Var sum(const Var& a);
Var mean(const Var& a);
/// Per-row sums, shape [rows x 1].
Var row_sum(const Var& a);
/// Softmax over the last dimension with max subtraction.
Var softmax(const Var& a);
/// log(sum(exp(row))) per row, shape [rows x 1].
Var logsumexp_rows(const Var& a);

Var concat_cols(std::span<const Var> parts);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var reshape(const Var& a, Tensor::Shape shape);
/// Scales each row to unit Euclidean norm. Rows whose norm is below
/// `min_norm` map to zero and pass no gradient.
Var normalize_rows(const Var& a, double min_norm = 1e-12);
/// out[r] = a[r, index[r]], shape [rows x 1].
Var pick_per_row(const Var& a, std::vector<std::size_t> index);
/// base + sum_i coeffs[i] * terms[i]; all operands share one shape. Zero
/// coefficients are skipped.
Var lincomb(const Var& base, std::span<const double> coeffs, std::span<const Var> terms);
/// out[i] = a[index[i]]; rows may repeat.
Var gather_rows(const Var& a, std::vector<std::size_t> index);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

}  // namespace svfm::ad
