#include "partcraft/autodiff.hpp"

#include "partcraft/error.hpp"

namespace partcraft::ad {

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Matrix value) {
  auto node = std::make_unique<Node>();
  node->value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::variable(Matrix value) {
  Var v = constant(std::move(value));
  nodes_.back()->requires_grad = grad_enabled_;
  return v;
}

Var Tape::param(Parameter& p) {
  Var v = constant(p.value);
  nodes_.back()->requires_grad = p.trainable && grad_enabled_;
  nodes_.back()->param = &p;
  return v;
}

Var Tape::record(Matrix value, std::vector<Var> parents, BackwardFn backward) {
  auto node = std::make_unique<Node>();
  node->value = std::move(value);
  for (const Var& p : parents) {
    if (p.tape() != this) throw InternalError("autodiff: mixing vars from different tapes");
    node->parents.push_back(p.id());
    node->requires_grad = node->requires_grad || nodes_[p.id()]->requires_grad;
  }
  if (node->requires_grad) node->backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw InternalError("autodiff: loss from a different tape");
  Node& root = *nodes_[loss.id()];
  if (root.value.size() != 1) throw InternalError("autodiff: backward needs a scalar");
  if (!root.requires_grad) return;
  for (auto& n : nodes_) n->grad.resize(0, 0);
  root.grad = Matrix::Ones(1, 1);

  std::vector<Matrix*> parent_grads;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = *nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) {
      parent_grads.clear();
      for (int pid : n.parents) {
        Node& p = *nodes_[pid];
        if (p.requires_grad) {
          if (p.grad.size() == 0) p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
          parent_grads.push_back(&p.grad);
        } else {
          parent_grads.push_back(nullptr);
        }
      }
      n.backward(n.grad, parent_grads);
    }
    if (n.param != nullptr && n.param->trainable) {
      if (n.param->grad.rows() != n.value.rows() || n.param->grad.cols() != n.value.cols()) n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InternalError(std::string("autodiff: shape mismatch in ") + op);
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw InternalError("autodiff: shape mismatch in matmul");
  Matrix out = a.value() * b.value();
  if (!a.requires_grad() && !b.requires_grad()) return a.tape()->record(std::move(out), {a, b}, nullptr);
  Matrix av = a.value(), bv = b.value();
  return a.tape()->record(std::move(out), {a, b}, [av, bv](const Matrix& g, std::vector<Matrix*>& pg) {
    if (pg[0]) pg[0]->noalias() += g * bv.transpose();
    if (pg[1]) pg[1]->noalias() += av.transpose() * g;
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  return a.tape()->record(a.value() + b.value(), {a, b}, [](const Matrix& g, std::vector<Matrix*>& pg) {
    if (pg[0]) *pg[0] += g;
    if (pg[1]) *pg[1] += g;
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  return a.tape()->record(a.value() - b.value(), {a, b}, [](const Matrix& g, std::vector<Matrix*>& pg) {
    if (pg[0]) *pg[0] += g;
    if (pg[1]) *pg[1] -= g;
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Matrix av = a.value(), bv = b.value();
  return a.tape()->record(av.cwiseProduct(bv), {a, b}, [av, bv](const Matrix& g, std::vector<Matrix*>& pg) {
    if (pg[0]) *pg[0] += g.cwiseProduct(bv);
    if (pg[1]) *pg[1] += g.cwiseProduct(av);
  });
}

Var scale(Var a, double s) {
  return a.tape()->record(a.value() * s, {a}, [s](const Matrix& g, std::vector<Matrix*>& pg) {
    if (pg[0]) *pg[0] += g * s;
  });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw InternalError("autodiff: shape mismatch in add_row");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(out), {a, row}, [](const Matrix& g, std::vector<Matrix*>& pg) {
    if (pg[0]) *pg[0] += g;
    if (pg[1]) *pg[1] += g.colwise().sum();
  });
}

Var relu(Var a) {
  Matrix out = a.value().cwiseMax(0.0);
  Matrix av = a.value();
  return a.tape()->record(std::move(out), {a}, [av](const Matrix& g, std::vector<Matrix*>& pg) {
    if (pg[0]) *pg[0] += (av.array() > 0.0).select(g, 0.0);
  });
}

Var tanh(Var a) {
  Matrix out = a.value().array().tanh().matrix();
  Matrix ov = out;
  return a.tape()->record(std::move(out), {a}, [ov](const Matrix& g, std::vector<Matrix*>& pg) {
    if (pg[0]) *pg[0] += g.cwiseProduct((1.0 - ov.array().square()).matrix());
  });
}

Var softmax_rows(Var a) {
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    double mx = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  Matrix ov = out;
  return a.tape()->record(std::move(out), {a}, [ov](const Matrix& g, std::vector<Matrix*>& pg) {
    if (!pg[0]) return;
    Matrix dot = (g.cwiseProduct(ov)).rowwise().sum();
    Matrix gi = ov.cwiseProduct((g.colwise() - dot.col(0)));
    *pg[0] += gi;
  });
}

Var transpose(Var a) {
  return a.tape()->record(a.value().transpose(), {a}, [](const Matrix& g, std::vector<Matrix*>& pg) {
    if (pg[0]) *pg[0] += g.transpose();
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.cols()) throw InternalError("autodiff: slice_cols out of range");
  Matrix out = a.value().middleCols(start, count);
  return a.tape()->record(std::move(out), {a}, [start, count](const Matrix& g, std::vector<Matrix*>& pg) {
    if (pg[0]) pg[0]->middleCols(start, count) += g;
  });
}

Var select_cols(Var a, const std::vector<int>& cols) {
  Matrix out(a.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (cols[j] < 0 || cols[j] >= a.cols()) throw InternalError("autodiff: select_cols out of range");
    out.col(static_cast<Eigen::Index>(j)) = a.value().col(cols[j]);
  }
  return a.tape()->record(std::move(out), {a}, [cols](const Matrix& g, std::vector<Matrix*>& pg) {
    if (!pg[0]) return;
    for (std::size_t j = 0; j < cols.size(); ++j) pg[0]->col(cols[j]) += g.col(static_cast<Eigen::Index>(j));
  });
}

Var select_rows(Var a, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw InternalError("autodiff: select_rows out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  return a.tape()->record(std::move(out), {a}, [rows](const Matrix& g, std::vector<Matrix*>& pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < rows.size(); ++i) pg[0]->row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw InternalError("autodiff: concat_rows of nothing");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) throw InternalError("autodiff: shape mismatch in concat_rows");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    offsets.push_back(r);
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return parts.front().tape()->record(std::move(out), parts, [offsets](const Matrix& g, std::vector<Matrix*>& pg) {
    for (std::size_t i = 0; i < pg.size(); ++i) {
      if (pg[i]) *pg[i] += g.middleRows(offsets[i], pg[i]->rows());
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw InternalError("autodiff: concat_cols of nothing");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  for (const Var& p : parts) {
    if (p.rows() != rows) throw InternalError("autodiff: shape mismatch in concat_cols");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    offsets.push_back(c);
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return parts.front().tape()->record(std::move(out), parts, [offsets](const Matrix& g, std::vector<Matrix*>& pg) {
    for (std::size_t i = 0; i < pg.size(); ++i) {
      if (pg[i]) *pg[i] += g.middleCols(offsets[i], pg[i]->cols());
    }
  });
}

Var average(const std::vector<Var>& parts) {
  if (parts.empty()) throw InternalError("autodiff: average of nothing");
  Matrix out = parts.front().value();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    require_same_shape(out, parts[i].value(), "average");
    out += parts[i].value();
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  out *= inv;
  return parts.front().tape()->record(std::move(out), parts, [inv](const Matrix& g, std::vector<Matrix*>& pg) {
    for (Matrix* p : pg)
      if (p) *p += g * inv;
  });
}

Var sum_all(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->record(std::move(out), {a}, [](const Matrix& g, std::vector<Matrix*>& pg) {
    if (pg[0]) pg[0]->array() += g(0, 0);
  });
}

Var mean_all(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum_all(a), 1.0 / n);
}

Var mse(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mse");
  Matrix diff = a.value() - b.value();
  const double n = static_cast<double>(diff.size());
  Matrix out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  return a.tape()->record(std::move(out), {a, b}, [diff, n](const Matrix& g, std::vector<Matrix*>& pg) {
    const double s = 2.0 * g(0, 0) / n;
    if (pg[0]) *pg[0] += diff * s;
    if (pg[1]) *pg[1] -= diff * s;
  });
}

}  // namespace partcraft::ad
