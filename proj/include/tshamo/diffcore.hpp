// Minimal reverse-mode differentiation over dense row-major double tensors.
//
// A Tape records every primitive applied to operands that participate in
// differentiation. Values live on the tape and are addressed through Var
// handles; backward() walks the tape once in reverse append order.

#ifndef TSHAMO_DIFFCORE_HPP
#define TSHAMO_DIFFCORE_HPP

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace tshamo::diffcore {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string to_string(const Shape& shape);
Index num_elements(const Shape& shape);

class Tensor {
 public:
  Tensor() : shape_{}, data_(Eigen::VectorXd::Zero(1)) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, Eigen::VectorXd data);
  Tensor(Shape shape, std::initializer_list<double> values);

  static Tensor scalar(double value);
  static Tensor from_matrix(const Eigen::Ref<const RowMatrix>& m);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const;
  Index size() const { return data_.size(); }

  Eigen::VectorXd& data() { return data_; }
  const Eigen::VectorXd& data() const { return data_; }
  double& operator[](Index i) { return data_[i]; }
  double operator[](Index i) const { return data_[i]; }
  double item() const;

  // Row-major view with the last dimension as columns.
  MatrixMap matrix();
  ConstMatrixMap matrix() const;
  MatrixMap matrix(Index rows, Index cols);
  ConstMatrixMap matrix(Index rows, Index cols) const;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Eigen::VectorXd data_;
};

class Tape;

// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> grads, std::vector<bool> present)
      : grads_(std::move(grads)), present_(std::move(present)) {}

  bool has(const Var& v) const { return v.id() < present_.size() && present_[v.id()]; }
  const Tensor& operator[](const Var& v) const;

 private:
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var variable(Tensor value) { return leaf(std::move(value), true); }

  // Records a primitive result. `backward` is dropped when no operand
  // participates in differentiation.
  Var record(const char* primitive, Tensor value, bool requires_grad, BackwardFn backward);

  Gradients backward(const Var& loss);
  void reset();

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of node `id`, allocated as zeros on first use.
  Tensor& grad(std::size_t id);

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<bool> grad_present_;
  bool backward_done_ = false;
};

// Primitives. Every primitive validates shapes, rejects non-finite results,
// and records itself on the operands' tape when any operand requires grad.

// [.., m, k] x [k, n] (shared right operand) or [B, m, k] x [B, k, n].
Var matmul(const Var& a, const Var& b);
// Same shapes, a row-vector bias over the last axis, or a scalar right operand.
Var add(const Var& a, const Var& b);
Var subtract(const Var& a, const Var& b);
// Elementwise product of equal shapes, or tensor times scalar tensor.
Var multiply(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var sum(const Var& a);
Var mean(const Var& a);
Var concat(const std::vector<Var>& parts, int axis);
Var slice(const Var& a, int axis, Index begin, Index end);
Var reshape(const Var& a, Shape shape);
// Swaps the last two axes.
Var transpose(const Var& a);
Var permute(const Var& a, const std::vector<int>& order);
// Tiles a size-1 axis `count` times.
Var repeat(const Var& a, int axis, Index count);
// x * Phi(x) with the exact error function.
Var gelu(const Var& a);
// Softmax over the last axis.
Var softmax(const Var& a);
// Softmax over the last axis of [G, Tq, Tk] where keys at or beyond
// key_lengths[g] receive zero probability.
Var masked_softmax(const Var& a, const std::vector<Index>& key_lengths);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var embedding(const Var& table, const std::vector<Index>& rows);
// sum(weights * (pred - target)^2) / sum(weights); weights are constants.
Var squared_error(const Var& pred, const Var& target, const Tensor& weights);
// Mean negative log-likelihood of the labelled class for [B, C] logits.
Var cross_entropy(const Var& logits, const std::vector<Index>& labels);
// Same-padded 1-D convolution of channels-last x [B, L, Cin] with
// w [K * Cin, Cout] (odd K, taps major).
Var conv1d(const Var& x, const Var& w);
// Pairwise mean over the length axis of [B, L, C]; L must be even.
Var avg_pool2(const Var& x);
// Nearest-neighbour doubling of the length axis of [B, L, C].
Var upsample2(const Var& x);

// Named parameter tensors, ordered by name.
using ParameterSet = std::map<std::string, Tensor>;
using Bindings = std::map<std::string, Var>;
using GradientSet = std::map<std::string, Tensor>;

Bindings bind(Tape& tape, const ParameterSet& params, bool requires_grad);
GradientSet collect(const Gradients& grads, const Bindings& bindings);
Index parameter_count(const ParameterSet& params);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::map<std::string, Eigen::VectorXd> m;
  std::map<std::string, Eigen::VectorXd> v;
  long step = 0;
};

// One bias-corrected Adam update. Parameters absent from `grads` take a zero
// gradient.
void adam_step(ParameterSet& params, const GradientSet& grads, AdamState& state, double lr,
               const AdamConfig& config = {});

}  // namespace tshamo::diffcore

#endif  // TSHAMO_DIFFCORE_HPP
