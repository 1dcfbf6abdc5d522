#include "parattn/tensor.hpp"

#include "parattn/errors.hpp"

#include <cassert>
#include <cmath>
#include <sstream>

namespace parattn {

std::string shape_string(const Matrix& m) {
  std::ostringstream os;
  os << '[' << m.rows() << ',' << m.cols() << ']';
  return os.str();
}

Parameter::Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {}

void Parameter::zero_grad() const { grad = Matrix::Zero(value.rows(), value.cols()); }

const Matrix& Tensor::value() const { return tape_->node(id_).value; }

Matrix Tensor::grad() const {
  const auto& n = tape_->node(id_);
  if (n.has_grad) return n.grad;
  return Matrix::Zero(n.value.rows(), n.value.cols());
}

bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }

Tape& Tensor::tape() const { return *tape_; }

Tensor Tape::push(Node n) {
  assert(n.value.allFinite() && "non-finite value recorded on tape");
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Tensor Tape::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  return push(std::move(n));
}

Tensor Tape::parameter(const Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = grad_enabled_;
  n.param = grad_enabled_ ? &p : nullptr;
  return push(std::move(n));
}

Tensor Tape::record(Matrix value, std::initializer_list<Tensor> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Tensor Tape::record(Matrix value, std::span<const Tensor> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (const auto& in : inputs) {
      if (in.tape_ != this) throw ContractError("tensor operands live on different tapes");
      if (node(in.id_).requires_grad) n.requires_grad = true;
    }
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Tensor Tape::record_composite(Matrix value, std::span<const Tensor> inputs, BackwardFn backward) {
  for (const auto& in : inputs)
    if (in.tape_ != this) throw ContractError("tensor operands live on different tapes");
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

void Tape::ensure_grad(Node& n) {
  if (!n.has_grad) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
}

void Tape::accumulate(const Tensor& t, const Matrix& g) {
  auto& n = node(t.id_);
  if (!n.requires_grad) return;
  if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
    throw DimensionError("gradient shape " + shape_string(g) + " does not match value " +
                         shape_string(n.value));
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Tape::accumulate_block(const Tensor& t, Index row, Index col, const Matrix& g) {
  auto& n = node(t.id_);
  if (!n.requires_grad) return;
  ensure_grad(n);
  n.grad.block(row, col, g.rows(), g.cols()) += g;
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape_ != this) throw ContractError("loss was not recorded on this tape");
  const auto& root = node(loss.id_);
  if (root.value.rows() != 1 || root.value.cols() != 1)
    throw ContractError("backward needs a scalar loss, got " + shape_string(root.value));
  backward(loss, Matrix::Ones(1, 1));
}

void Tape::backward(const Tensor& root_tensor, const Matrix& seed) {
  if (root_tensor.tape_ != this) throw ContractError("root was not recorded on this tape");
  if (backward_done_) throw ContractError("backward already ran on this tape; call reset() first");
  auto& root = node(root_tensor.id_);
  if (seed.rows() != root.value.rows() || seed.cols() != root.value.cols())
    throw DimensionError("backward seed " + shape_string(seed) + " does not match root " +
                         shape_string(root.value));
  backward_done_ = true;
  if (!root.requires_grad) return;
  ensure_grad(root);
  root.grad += seed;

  for (int id = root_tensor.id_; id >= 0; --id) {
    auto& n = node(id);
    if (!n.has_grad) continue;
    if (n.backward) n.backward(n.grad, n.value);
    if (n.param != nullptr) {
      auto& pg = n.param->grad;
      if (pg.rows() != n.grad.rows() || pg.cols() != n.grad.cols())
        pg = Matrix::Zero(n.grad.rows(), n.grad.cols());
      pg += n.grad;
    }
  }
}

void Tape::reset() {
  nodes_.clear();
  backward_done_ = false;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.value()) + " and " +
                         shape_string(b.value()) + " differ");
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions of " + shape_string(a.value()) + " and " +
                         shape_string(b.value()) + " disagree");
  Matrix out = a.value() * b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](const Matrix& g, const Matrix&) {
    auto& tape = a.tape();
    if (a.requires_grad()) tape.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) tape.accumulate(b, a.value().transpose() * g);
  });
}

Tensor transpose(const Tensor& a) {
  Matrix out = a.value().transpose();
  return a.tape().record(std::move(out), {a}, [a](const Matrix& g, const Matrix&) {
    a.tape().accumulate(a, g.transpose());
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Matrix out = a.value() + b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](const Matrix& g, const Matrix&) {
    a.tape().accumulate(a, g);
    a.tape().accumulate(b, g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Matrix out = a.value() - b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](const Matrix& g, const Matrix&) {
    a.tape().accumulate(a, g);
    a.tape().accumulate(b, -g);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](const Matrix& g, const Matrix&) {
    auto& tape = a.tape();
    if (a.requires_grad()) tape.accumulate(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) tape.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Tensor scale(const Tensor& a, Scalar s) {
  Matrix out = a.value() * s;
  return a.tape().record(std::move(out), {a}, [a, s](const Matrix& g, const Matrix&) {
    a.tape().accumulate(a, g * s);
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols())
    throw DimensionError("add_bias: bias " + shape_string(bias.value()) + " does not fit " +
                         shape_string(a.value()));
  Matrix out = a.value().rowwise() + bias.value().row(0);
  return a.tape().record(std::move(out), {a, bias}, [a, bias](const Matrix& g, const Matrix&) {
    a.tape().accumulate(a, g);
    if (bias.requires_grad()) a.tape().accumulate(bias, g.colwise().sum());
  });
}

Tensor relu(const Tensor& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape().record(std::move(out), {a}, [a](const Matrix& g, const Matrix&) {
    Matrix d = (a.value().array() > 0.0).select(g, 0.0);
    a.tape().accumulate(a, d);
  });
}

namespace {

Matrix softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

}  // namespace

Tensor softmax(const Tensor& a) {
  if (a.cols() < 1) throw DimensionError("softmax over an empty axis");
  Matrix out = softmax_rows(a.value());
  return a.tape().record(std::move(out), {a}, [a](const Matrix& g, const Matrix& y) {
    Matrix inner = g.cwiseProduct(y).rowwise().sum();
    Matrix d = y.cwiseProduct(g - inner.replicate(1, g.cols()));
    a.tape().accumulate(a, d);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Scalar eps) {
  const Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d)
    throw DimensionError("layer_norm: gain/bias must be [1," + std::to_string(d) + "]");
  const Matrix& xv = x.value();
  Matrix xhat(xv.rows(), d);
  RowVector inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const Scalar mean = xv.row(r).mean();
    const Scalar var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return x.tape().record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Matrix& g, const Matrix&) {
        auto& tape = x.tape();
        if (gain.requires_grad()) tape.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
        if (bias.requires_grad()) tape.accumulate(bias, g.colwise().sum());
        if (!x.requires_grad()) return;
        const Scalar n = static_cast<Scalar>(g.cols());
        Matrix dxhat = (g.array().rowwise() * gain.value().row(0).array()).matrix();
        Matrix dx(g.rows(), g.cols());
        for (Index r = 0; r < g.rows(); ++r) {
          const Scalar mean_d = dxhat.row(r).sum() / n;
          const Scalar mean_dx = dxhat.row(r).dot(xhat.row(r)) / n;
          dx.row(r) =
              (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx) * inv_std(r);
        }
        tape.accumulate(x, dx);
      });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows)
      throw DimensionError("concat_cols: row counts differ (" + shape_string(parts.front().value()) +
                           " vs " + shape_string(p.value()) + ")");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return parts.front().tape().record(std::move(out), parts, [inputs](const Matrix& g, const Matrix&) {
    Index c = 0;
    for (const auto& p : inputs) {
      if (p.requires_grad()) p.tape().accumulate(p, g.middleCols(c, p.cols()));
      c += p.cols();
    }
  });
}

Tensor slice_cols(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols())
    throw DimensionError("slice_cols: [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") outside " + shape_string(a.value()));
  Matrix out = a.value().middleCols(start, count);
  return a.tape().record(std::move(out), {a}, [a, start](const Matrix& g, const Matrix&) {
    a.tape().accumulate_block(a, 0, start, g);
  });
}

Tensor slice_rows(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows())
    throw DimensionError("slice_rows: [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") outside " + shape_string(a.value()));
  Matrix out = a.value().middleRows(start, count);
  return a.tape().record(std::move(out), {a}, [a, start](const Matrix& g, const Matrix&) {
    a.tape().accumulate_block(a, start, 0, g);
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  Matrix out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows())
      throw VocabularyError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                            std::to_string(table.rows()) + " rows");
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return table.tape().record(std::move(out), {table}, [table, idx = std::move(idx)](const Matrix& g, const Matrix&) {
    Matrix d = Matrix::Zero(table.rows(), table.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += g.row(static_cast<Index>(i));
    table.tape().accumulate(table, d);
  });
}

Tensor reshape(const Tensor& a, Index rows, Index cols) {
  if (rows * cols != a.value().size())
    throw DimensionError("reshape: cannot view " + shape_string(a.value()) + " as [" +
                         std::to_string(rows) + "," + std::to_string(cols) + "]");
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  const Index r0 = a.rows();
  const Index c0 = a.cols();
  return a.tape().record(std::move(out), {a}, [a, r0, c0](const Matrix& g, const Matrix&) {
    a.tape().accumulate(a, Eigen::Map<const Matrix>(g.data(), r0, c0));
  });
}

Tensor masked_fill(const Tensor& a, const BoolMatrix& mask, Scalar fill) {
  if (mask.rows() != a.rows() || mask.cols() != a.cols())
    throw DimensionError("masked_fill: mask [" + std::to_string(mask.rows()) + "," +
                         std::to_string(mask.cols()) + "] does not match " +
                         shape_string(a.value()));
  Matrix out = mask.select(Matrix::Constant(a.rows(), a.cols(), fill), a.value());
  return a.tape().record(std::move(out), {a}, [a, mask](const Matrix& g, const Matrix&) {
    a.tape().accumulate(a, mask.select(Matrix::Zero(g.rows(), g.cols()), g));
  });
}

Tensor sum(const Tensor& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record(std::move(out), {a}, [a](const Matrix& g, const Matrix&) {
    a.tape().accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

}  // namespace parattn
