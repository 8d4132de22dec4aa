#pragma once

#include "partcraft/tensor.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

/// Minimal tape-based reverse-mode differentiation over dense matrices.
///
/// A Tape records every operation applied to its Vars. Calling backward() on
/// a 1x1 result walks the tape in reverse and accumulates gradients into the
/// trainable Parameters that were bound to it. Frozen parameters are read but
/// never receive gradient.
namespace partcraft::ad {

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = false;

  Parameter() = default;
  Parameter(std::string n, Matrix v, bool train)
      : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())), trainable(train) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  /// Receives the node's output gradient; must add into the parents' grads.
  using BackwardFn = std::function<void(const Matrix& out_grad, std::vector<Matrix*>& parent_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);
  Var param(Parameter& p);

  Var record(Matrix value, std::vector<Var> parents, BackwardFn backward);

  /// With gradients disabled, parameters enter as constants and nothing is
  /// recorded for backward; used for inference.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  void backward(Var loss);

  const Matrix& value(int id) const { return nodes_[id]->value; }
  const Matrix& grad(int id) const { return nodes_[id]->grad; }
  bool requires_grad(int id) const { return nodes_[id]->requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<int> parents;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  std::vector<std::unique_ptr<Node>> nodes_;
  bool grad_enabled_ = true;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// a (n x m) + row (1 x m) broadcast over rows.
Var add_row(Var a, Var row);
Var relu(Var a);
Var tanh(Var a);
Var softmax_rows(Var a);
Var transpose(Var a);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var select_cols(Var a, const std::vector<int>& cols);
Var select_rows(Var a, const std::vector<int>& rows);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
/// Elementwise mean of same-shaped Vars.
Var average(const std::vector<Var>& parts);
Var sum_all(Var a);
Var mean_all(Var a);
/// Mean squared error over all entries.
Var mse(Var a, Var b);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, double s) { return scale(a, s); }

}  // namespace partcraft::ad
