#pragma once

// Dense tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to a row-major value buffer plus an optional
// gradient buffer. Differentiable operations are free functions that take the
// Tape of the current session as their first argument; an operation records a
// backward closure only when one of its inputs requires a gradient.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ldeprompt/errors.hpp"

namespace ldep {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

std::string to_string(const Shape& shape);
Index shape_size(const Shape& shape);

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
class Tensor {
 public:
  using VectorType = Vector<Scalar>;
  using MatrixType = RowMatrix<Scalar>;
  using MatrixMap = Eigen::Map<MatrixType>;
  using ConstMatrixMap = Eigen::Map<const MatrixType>;

  // An undefined tensor; defined() is false.
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, VectorType values, bool requires_grad = false);

  static Tensor from_matrix(const Eigen::Ref<const MatrixType>& m, bool requires_grad = false);
  static Tensor scalar(Scalar v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  Index size() const;
  Index rank() const { return static_cast<Index>(shape().size()); }

  // Rank-2 view: all leading dimensions are folded into rows.
  Index rows() const;
  Index cols() const;

  VectorType& value();
  const VectorType& value() const;
  MatrixMap matrix();
  ConstMatrixMap matrix() const;
  Scalar item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  // Allocates a zero gradient if none is present.
  VectorType& grad();
  const VectorType& grad() const;
  ConstMatrixMap grad_matrix() const;
  void clear_grad();

  // Deep copy of the value; the copy does not require grad.
  Tensor detach() const;

  bool is_same(const Tensor& other) const { return node_ == other.node_; }

 private:
  struct Node {
    Shape shape;
    VectorType value;
    VectorType grad;
    bool has_grad = false;
    bool requires_grad = false;
  };
  std::shared_ptr<Node> node_;
};

// Ordered record of executed differentiable operations.
template <typename Scalar>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn);

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse.
  // Throws ContractError for a non-scalar loss or a second call without reset().
  void backward(Tensor<Scalar>& loss);

  void reset();
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
};

// --- differentiable operations -------------------------------------------

template <typename Scalar>
Tensor<Scalar> matmul(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> transpose(Tape<Scalar>& tape, const Tensor<Scalar>& a);

template <typename Scalar>
Tensor<Scalar> add(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b);

// x[..., D] + bias[D]; the only broadcast supported.
template <typename Scalar>
Tensor<Scalar> add_bias(Tape<Scalar>& tape, const Tensor<Scalar>& x, const Tensor<Scalar>& bias);

template <typename Scalar>
Tensor<Scalar> mul(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> scale(Tape<Scalar>& tape, const Tensor<Scalar>& a, Scalar factor);

template <typename Scalar>
Tensor<Scalar> sum(Tape<Scalar>& tape, const Tensor<Scalar>& a);

// tanh approximation
template <typename Scalar>
Tensor<Scalar> gelu(Tape<Scalar>& tape, const Tensor<Scalar>& x);

// Softmax over the last dimension, max-subtracted.
template <typename Scalar>
Tensor<Scalar> softmax_rows(Tape<Scalar>& tape, const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> layer_norm(Tape<Scalar>& tape, const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                          const Tensor<Scalar>& bias, Scalar eps = Scalar(1e-5));

// Mean over the batch of -log softmax(logits)[target].
template <typename Scalar>
Tensor<Scalar> cross_entropy_logits(Tape<Scalar>& tape, const Tensor<Scalar>& logits,
                                    std::span<const int> targets);

template <typename Scalar>
Tensor<Scalar> reshape(Tape<Scalar>& tape, const Tensor<Scalar>& x, Shape shape);

template <typename Scalar>
Tensor<Scalar> slice_rows(Tape<Scalar>& tape, const Tensor<Scalar>& x, Index begin, Index count);

template <typename Scalar>
Tensor<Scalar> slice_cols(Tape<Scalar>& tape, const Tensor<Scalar>& x, Index begin, Index count);

template <typename Scalar>
Tensor<Scalar> gather_rows(Tape<Scalar>& tape, const Tensor<Scalar>& x, std::span<const Index> rows);

template <typename Scalar>
Tensor<Scalar> concat_rows(Tape<Scalar>& tape, std::span<const Tensor<Scalar>> parts);

template <typename Scalar>
Tensor<Scalar> concat_cols(Tape<Scalar>& tape, std::span<const Tensor<Scalar>> parts);

// sum_i weights[i] * parts[i]; all parts share one shape.
template <typename Scalar>
Tensor<Scalar> linear_combination(Tape<Scalar>& tape, std::span<const Tensor<Scalar>> parts,
                                  std::span<const Scalar> weights);

// --- optimization -----------------------------------------------------------

// p <- p - lr * (grad(p) + weight_decay * p), then clears the gradient.
// Tensors that do not require grad are skipped; a trainable tensor without a
// gradient is a ContractError.
template <typename Scalar>
void sgd_step(std::span<Tensor<Scalar>> params, Scalar lr, Scalar weight_decay);

// FNV-1a over the raw value bytes; used to prove tensors were not mutated.
template <typename Scalar>
std::uint64_t checksum(const Tensor<Scalar>& t);

}  // namespace ldep
