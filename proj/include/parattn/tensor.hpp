#pragma once

// Dense 2-D tensors with a reverse-mode gradient tape.
//
// Every value in the engine is a row-major matrix. Sequences are stored as
// [positions, features]; a padded batch is stacked as [batch * len, features].
// A scalar is a 1x1 matrix.

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace parattn {

using Scalar = double;
using Index = Eigen::Index;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A trainable weight. `grad` is the accumulator written by Tape::backward;
/// it is scratch space and may be written through a const reference.
struct Parameter {
  std::string name;
  Matrix value;
  mutable Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v);

  Index size() const { return value.size(); }
  void zero_grad() const;
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives
/// and has not been reset.
class Tensor {
 public:
  Tensor() = default;

  const Matrix& value() const;
  /// Accumulated gradient, or zeros when nothing flowed back.
  Matrix grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const;
  int id() const { return id_; }

 private:
  friend class Tape;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Records operations in execution order and replays their gradient rules in
/// reverse. Single writer; not copyable or movable since Tensors point at it.
class Tape {
 public:
  /// Receives the gradient of this node and its recorded output value.
  using BackwardFn = std::function<void(const Matrix& grad_out, const Matrix& value)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Matrix value);
  /// Leaf that collects a gradient on the tape itself.
  Tensor variable(Matrix value);
  /// Leaf bound to a Parameter; backward adds into `p.grad`.
  Tensor parameter(const Parameter& p);

  /// Record the result of an op. The gradient rule is kept only when grads are
  /// enabled and at least one input requires a gradient.
  Tensor record(Matrix value, std::initializer_list<Tensor> inputs, BackwardFn backward);
  Tensor record(Matrix value, std::span<const Tensor> inputs, BackwardFn backward);

  /// Record a node whose gradient rule reaches state held outside this tape (for
  /// example sub-tapes owning parameter leaves). The rule is kept whenever grads are
  /// enabled, even if no input requires a gradient.
  Tensor record_composite(Matrix value, std::span<const Tensor> inputs, BackwardFn backward);

  /// Add `g` into the gradient of `t`. No-op for tensors that need no gradient.
  void accumulate(const Tensor& t, const Matrix& g);
  /// Add `g` into the block of `t`'s gradient starting at (row, col).
  void accumulate_block(const Tensor& t, Index row, Index col, const Matrix& g);

  /// Seeds d(loss)=1 and runs every recorded rule in reverse order. The loss must
  /// be 1x1; a second call without reset() throws ContractError.
  void backward(const Tensor& loss);
  /// Backward from a non-scalar root seeded with `seed` (same shape as the root).
  void backward(const Tensor& root, const Matrix& seed);
  void reset();

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Tensor;

  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
    const Parameter* param = nullptr;
  };

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Tensor push(Node n);
  void ensure_grad(Node& n);

  std::deque<Node> nodes_;
  bool grad_enabled_;
  bool backward_done_ = false;
};

// Structural and arithmetic ops. All operands must live on the same tape.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Scalar s);
/// Adds a 1xN row to every row of an MxN tensor.
Tensor add_bias(const Tensor& a, const Tensor& bias);
Tensor relu(const Tensor& a);
/// Row-wise softmax with max subtraction.
Tensor softmax(const Tensor& a);
/// Row-wise normalization to zero mean / unit variance, then gain and bias (both 1xN).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Scalar eps);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, Index start, Index count);
Tensor slice_rows(const Tensor& a, Index start, Index count);
/// Row gather; `ids` index rows of `table`.
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
/// Row-major reinterpretation to a new shape with the same element count.
Tensor reshape(const Tensor& a, Index rows, Index cols);
/// Positions where `mask` is true are replaced by `fill`; no gradient flows through them.
Tensor masked_fill(const Tensor& a, const BoolMatrix& mask, Scalar fill);
/// Sum of all entries as a 1x1 tensor.
Tensor sum(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }

std::string shape_string(const Matrix& m);

}  // namespace parattn
