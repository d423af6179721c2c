#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace bscst::grad {

/// Dense row-major fp64 matrix. Vectors are 1 x n.
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Tensor(std::size_t r, std::size_t c, std::vector<double> values);

  std::size_t size() const { return data.size(); }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  std::string shape_string() const;
};

struct AdamState {
  Tensor m;
  Tensor v;
  std::uint64_t step = 0;
};

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  AdamState adam;
};

/// Named trainable parameters. References returned by add()/get() stay valid
/// for the lifetime of the store; copies are deep.
class ParamStore {
 public:
  /// Throws std::invalid_argument on a duplicate name.
  Parameter& add(std::string name, Tensor init);
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

  std::size_t size() const { return params_.size(); }
  std::size_t num_scalars() const;
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  /// All gradients concatenated in registration order.
  std::vector<double> flat_grad() const;
  double grad_norm() const;

 private:
  std::deque<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected ADAM update of every parameter; gradients are zeroed
/// afterwards.
void adam_step(ParamStore& store, const AdamConfig& config);

/// Binary checkpoint: "BSCST1", parameter count, per-parameter records
/// (name length, name, rank, dims, little-endian fp64 data), ADAM state, and a
/// trailing CRC32 of everything before it.
void save_checkpoint(const ParamStore& store, const std::filesystem::path& path);
/// Overwrites values and ADAM state of `store`; names and shapes must match.
void load_checkpoint(ParamStore& store, const std::filesystem::path& path);

class Tape;

/// Handle to a node on a Tape.
class Value {
 public:
  Value() = default;
  Value(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& data() const;
  /// Gradient after Tape::backward (zeros when nothing flowed here).
  Tensor grad() const;
  std::size_t rows() const { return data().rows; }
  std::size_t cols() const { return data().cols; }
  /// Scalar content of a 1x1 value.
  double item() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode computation record. A tape built with record = false only
/// evaluates forward values.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Value constant(Tensor t);
  /// Free leaf that receives a gradient (tests, probes).
  Value variable(Tensor t);
  /// Leaf bound to a parameter; backward() adds its gradient into p.grad.
  /// Repeated calls with the same parameter return the same node.
  Value param(Parameter& p);

  /// Accumulates d(loss)/d(node) for every node reachable from `loss`, then
  /// adds parameter-leaf gradients into their Parameter::grad. `loss` must be
  /// 1x1. A tape can be differentiated once.
  void backward(Value loss);

  const Tensor& data(std::size_t id) const { return nodes_[id].value; }
  Tensor grad(std::size_t id) const;

  // Op-authoring interface.
  Value push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  Tensor& grad_mut(std::size_t id);
  const Tensor& upstream(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    Parameter* param = nullptr;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  bool record_;
  bool consumed_ = false;
};

// Primitive operations. All operands must live on the same tape; shape
// mismatches throw std::invalid_argument.

/// a + b; b may also be a 1 x cols row broadcast over a's rows.
Value add(Value a, Value b);
Value sub(Value a, Value b);
/// Elementwise a * b; either side may be a rows x 1 column broadcast.
Value mul(Value a, Value b);
Value scale(Value a, double s);
Value matmul(Value a, Value b);
Value tanh(Value a);
Value sigmoid(Value a);
Value exp(Value a);
/// Throws std::domain_error on a non-positive entry.
Value log(Value a);
/// Softmax along axis 0 (columns) or 1 (rows).
Value softmax(Value a, int axis = 1);
/// Row-wise log-softmax, computed stably.
Value log_softmax(Value a);
/// Rows of `table` selected by `indices`.
Value gather(Value table, std::span<const int> indices);
/// rows x 1 column holding a(r, indices[r]).
Value pick(Value a, std::span<const int> indices);
/// Column-wise concatenation.
Value concat(std::span<const Value> parts);
Value slice_cols(Value a, std::size_t start, std::size_t width);
/// Inverted dropout with a caller-supplied 0/1 mask: a * mask / (1 - rate).
Value dropout(Value a, const Tensor& mask, double rate);
/// Sum of all entries, 1x1.
Value sum(Value a);
Value mean(Value a);

}  // namespace bscst::grad
