#include "ldeprompt/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace ldep {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

// --- Tensor -----------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, bool requires_grad) : node_(std::make_shared<Node>()) {
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
  node_->value = VectorType::Zero(shape_size(shape));
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, VectorType values, bool requires_grad) : node_(std::make_shared<Node>()) {
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
  if (shape_size(shape) != values.size()) {
    throw ShapeError("shape " + to_string(shape) + " does not match " + std::to_string(values.size()) +
                     " values");
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_matrix(const Eigen::Ref<const MatrixType>& m, bool requires_grad) {
  VectorType v(m.size());
  Eigen::Map<MatrixType>(v.data(), m.rows(), m.cols()) = m;
  return Tensor({m.rows(), m.cols()}, std::move(v), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar v, bool requires_grad) {
  VectorType values(1);
  values(0) = v;
  return Tensor(Shape{}, std::move(values), requires_grad);
}

template <typename Scalar>
const Shape& Tensor<Scalar>::shape() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->shape;
}

template <typename Scalar>
Index Tensor<Scalar>::size() const {
  return value().size();
}

template <typename Scalar>
Index Tensor<Scalar>::cols() const {
  const Shape& s = shape();
  return s.empty() ? 1 : s.back();
}

template <typename Scalar>
Index Tensor<Scalar>::rows() const {
  return size() / cols();
}

template <typename Scalar>
typename Tensor<Scalar>::VectorType& Tensor<Scalar>::value() {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->value;
}

template <typename Scalar>
const typename Tensor<Scalar>::VectorType& Tensor<Scalar>::value() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->value;
}

template <typename Scalar>
typename Tensor<Scalar>::MatrixMap Tensor<Scalar>::matrix() {
  return MatrixMap(value().data(), rows(), cols());
}

template <typename Scalar>
typename Tensor<Scalar>::ConstMatrixMap Tensor<Scalar>::matrix() const {
  return ConstMatrixMap(value().data(), rows(), cols());
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return value()(0);
}

template <typename Scalar>
bool Tensor<Scalar>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <typename Scalar>
void Tensor<Scalar>::set_requires_grad(bool flag) {
  if (!node_) throw ContractError("use of an undefined tensor");
  node_->requires_grad = flag;
}

template <typename Scalar>
bool Tensor<Scalar>::has_grad() const {
  return node_ && node_->has_grad;
}

template <typename Scalar>
typename Tensor<Scalar>::VectorType& Tensor<Scalar>::grad() {
  if (!node_) throw ContractError("use of an undefined tensor");
  if (!node_->has_grad) {
    node_->grad = VectorType::Zero(node_->value.size());
    node_->has_grad = true;
  }
  return node_->grad;
}

template <typename Scalar>
const typename Tensor<Scalar>::VectorType& Tensor<Scalar>::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

template <typename Scalar>
typename Tensor<Scalar>::ConstMatrixMap Tensor<Scalar>::grad_matrix() const {
  return ConstMatrixMap(grad().data(), rows(), cols());
}

template <typename Scalar>
void Tensor<Scalar>::clear_grad() {
  if (!node_) return;
  node_->grad.resize(0);
  node_->has_grad = false;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  return Tensor(shape(), value(), false);
}

// --- Tape -------------------------------------------------------------------

template <typename Scalar>
void Tape<Scalar>::record(std::function<void()> backward_fn) {
  entries_.push_back(std::move(backward_fn));
}

template <typename Scalar>
void Tape<Scalar>::backward(Tensor<Scalar>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (consumed_) throw ContractError("backward already ran on this tape; reset() first");
  consumed_ = true;
  loss.grad().setConstant(Scalar(1));
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

template <typename Scalar>
void Tape<Scalar>::reset() {
  entries_.clear();
  consumed_ = false;
}

// --- operations -------------------------------------------------------------

namespace {

template <typename Scalar>
bool any_requires_grad(std::initializer_list<const Tensor<Scalar>*> ts) {
  for (const auto* t : ts) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename Scalar>
bool any_requires_grad(std::span<const Tensor<Scalar>> ts) {
  for (const auto& t : ts) {
    if (t.requires_grad()) return true;
  }
  return false;
}

void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) throw ShapeError(std::string(op) + " expects a rank-2 tensor, got " + to_string(s));
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> matmul(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_rank2(a.shape(), "matmul");
  require_rank2(b.shape(), "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul inner dimensions disagree: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const bool track = any_requires_grad<Scalar>({&a, &b});
  Tensor<Scalar> out({a.rows(), b.cols()}, track);
  out.matrix().noalias() = a.matrix() * b.matrix();
  if (track) {
    tape.record([a = a, b = b, out]() mutable {
      if (!out.has_grad()) return;
      const auto dc = out.grad_matrix();
      if (a.requires_grad()) {
        Eigen::Map<RowMatrix<Scalar>>(a.grad().data(), a.rows(), a.cols()).noalias() += dc * b.matrix().transpose();
      }
      if (b.requires_grad()) {
        Eigen::Map<RowMatrix<Scalar>>(b.grad().data(), b.rows(), b.cols()).noalias() += a.matrix().transpose() * dc;
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> transpose(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  require_rank2(a.shape(), "transpose");
  const bool track = a.requires_grad();
  Tensor<Scalar> out({a.cols(), a.rows()}, track);
  out.matrix() = a.matrix().transpose();
  if (track) {
    tape.record([a = a, out]() mutable {
      if (!out.has_grad()) return;
      Eigen::Map<RowMatrix<Scalar>>(a.grad().data(), a.rows(), a.cols()) += out.grad_matrix().transpose();
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> add(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const bool track = any_requires_grad<Scalar>({&a, &b});
  Tensor<Scalar> out(a.shape(), a.value() + b.value(), track);
  if (track) {
    tape.record([a = a, b = b, out]() mutable {
      if (!out.has_grad()) return;
      if (a.requires_grad()) a.grad() += out.grad();
      if (b.requires_grad()) b.grad() += out.grad();
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> add_bias(Tape<Scalar>& tape, const Tensor<Scalar>& x, const Tensor<Scalar>& bias) {
  if (bias.size() != x.cols()) {
    throw ShapeError("add_bias: bias " + to_string(bias.shape()) + " does not match last dimension of " +
                     to_string(x.shape()));
  }
  const bool track = any_requires_grad<Scalar>({&x, &bias});
  Tensor<Scalar> out(x.shape(), track);
  out.matrix() = x.matrix().rowwise() + bias.value().transpose();
  if (track) {
    tape.record([x = x, bias = bias, out]() mutable {
      if (!out.has_grad()) return;
      if (x.requires_grad()) x.grad() += out.grad();
      if (bias.requires_grad()) bias.grad() += out.grad_matrix().colwise().sum().transpose();
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mul(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const bool track = any_requires_grad<Scalar>({&a, &b});
  Tensor<Scalar> out(a.shape(), a.value().cwiseProduct(b.value()), track);
  if (track) {
    tape.record([a = a, b = b, out]() mutable {
      if (!out.has_grad()) return;
      if (a.requires_grad()) a.grad() += out.grad().cwiseProduct(b.value());
      if (b.requires_grad()) b.grad() += out.grad().cwiseProduct(a.value());
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> scale(Tape<Scalar>& tape, const Tensor<Scalar>& a, Scalar factor) {
  const bool track = a.requires_grad();
  Tensor<Scalar> out(a.shape(), a.value() * factor, track);
  if (track) {
    tape.record([a = a, out, factor]() mutable {
      if (!out.has_grad()) return;
      a.grad() += out.grad() * factor;
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> sum(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  const bool track = a.requires_grad();
  Tensor<Scalar> out = Tensor<Scalar>::scalar(a.value().sum(), track);
  if (track) {
    tape.record([a = a, out]() mutable {
      if (!out.has_grad()) return;
      a.grad().array() += out.grad()(0);
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> gelu(Tape<Scalar>& tape, const Tensor<Scalar>& x) {
  const Scalar c = Scalar(0.7978845608028654);  // sqrt(2/pi)
  const Scalar k = Scalar(0.044715);
  const auto& xv = x.value();
  Vector<Scalar> t = (c * (xv.array() + k * xv.array().cube())).tanh().matrix();
  const bool track = x.requires_grad();
  Tensor<Scalar> out(x.shape(), (Scalar(0.5) * xv.array() * (Scalar(1) + t.array())).matrix(), track);
  if (track) {
    tape.record([x = x, out, t, c, k]() mutable {
      if (!out.has_grad()) return;
      const auto xa = x.value().array();
      const auto ta = t.array();
      const auto d = Scalar(0.5) * (Scalar(1) + ta) +
                     Scalar(0.5) * xa * (Scalar(1) - ta.square()) * c * (Scalar(1) + Scalar(3) * k * xa.square());
      x.grad().array() += out.grad().array() * d;
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> softmax_rows(Tape<Scalar>& tape, const Tensor<Scalar>& x) {
  const bool track = x.requires_grad();
  Tensor<Scalar> out(x.shape(), track);
  auto y = out.matrix();
  const auto in = x.matrix();
  for (Index r = 0; r < in.rows(); ++r) {
    const Scalar m = in.row(r).maxCoeff();
    y.row(r) = (in.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  if (track) {
    tape.record([x = x, out]() mutable {
      if (!out.has_grad()) return;
      const auto y = out.matrix();
      const auto dy = out.grad_matrix();
      Eigen::Map<RowMatrix<Scalar>> dx(x.grad().data(), x.rows(), x.cols());
      for (Index r = 0; r < y.rows(); ++r) {
        const Scalar dot = y.row(r).dot(dy.row(r));
        dx.row(r).array() += y.row(r).array() * (dy.row(r).array() - dot);
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> layer_norm(Tape<Scalar>& tape, const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                          const Tensor<Scalar>& bias, Scalar eps) {
  const Index d = x.cols();
  if (gain.size() != d || bias.size() != d) {
    throw ShapeError("layer_norm: gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                     " do not match last dimension of " + to_string(x.shape()));
  }
  const auto in = x.matrix();
  RowMatrix<Scalar> xhat(in.rows(), d);
  Vector<Scalar> rstd(in.rows());
  for (Index r = 0; r < in.rows(); ++r) {
    const Scalar mu = in.row(r).mean();
    const Scalar var = (in.row(r).array() - mu).square().mean();
    rstd(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (in.row(r).array() - mu) * rstd(r);
  }
  const bool track = any_requires_grad<Scalar>({&x, &gain, &bias});
  Tensor<Scalar> out(x.shape(), track);
  out.matrix() = (xhat.array().rowwise() * gain.value().transpose().array()).matrix().rowwise() +
                 bias.value().transpose();
  if (track) {
    tape.record([x = x, gain = gain, bias = bias, out, xhat, rstd]() mutable {
      if (!out.has_grad()) return;
      const auto dy = out.grad_matrix();
      if (gain.requires_grad()) gain.grad() += dy.cwiseProduct(xhat).colwise().sum().transpose();
      if (bias.requires_grad()) bias.grad() += dy.colwise().sum().transpose();
      if (x.requires_grad()) {
        const Index n = xhat.cols();
        Eigen::Map<RowMatrix<Scalar>> dx(x.grad().data(), x.rows(), n);
        for (Index r = 0; r < xhat.rows(); ++r) {
          const Eigen::Array<Scalar, 1, Eigen::Dynamic> dxhat = dy.row(r).array() * gain.value().transpose().array();
          const Scalar s1 = dxhat.sum();
          const Scalar s2 = (dxhat * xhat.row(r).array()).sum();
          dx.row(r).array() +=
              (rstd(r) / Scalar(n)) * (Scalar(n) * dxhat - s1 - xhat.row(r).array() * s2);
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> cross_entropy_logits(Tape<Scalar>& tape, const Tensor<Scalar>& logits,
                                    std::span<const int> targets) {
  require_rank2(logits.shape(), "cross_entropy_logits");
  const Index batch = logits.rows();
  const Index classes = logits.cols();
  if (static_cast<Index>(targets.size()) != batch) {
    throw ShapeError("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for logits " +
                     to_string(logits.shape()));
  }
  for (int t : targets) {
    if (t < 0 || t >= classes) {
      throw IndexError("cross_entropy_logits: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
  }
  const auto z = logits.matrix();
  RowMatrix<Scalar> probs(batch, classes);
  Scalar total = 0;
  for (Index r = 0; r < batch; ++r) {
    const Scalar m = z.row(r).maxCoeff();
    probs.row(r) = (z.row(r).array() - m).exp().matrix();
    const Scalar norm = probs.row(r).sum();
    probs.row(r) /= norm;
    total += m + std::log(norm) - z(r, targets[r]);
  }
  const bool track = logits.requires_grad();
  Tensor<Scalar> out = Tensor<Scalar>::scalar(total / Scalar(batch), track);
  if (track) {
    std::vector<int> tgt(targets.begin(), targets.end());
    tape.record([logits = logits, out, probs, tgt]() mutable {
      if (!out.has_grad()) return;
      RowMatrix<Scalar> d = probs;
      for (Index r = 0; r < d.rows(); ++r) d(r, tgt[r]) -= Scalar(1);
      d *= out.grad()(0) / Scalar(d.rows());
      Eigen::Map<RowMatrix<Scalar>>(logits.grad().data(), d.rows(), d.cols()) += d;
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> reshape(Tape<Scalar>& tape, const Tensor<Scalar>& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  const bool track = x.requires_grad();
  Tensor<Scalar> out(std::move(shape), x.value(), track);
  if (track) {
    tape.record([x = x, out]() mutable {
      if (!out.has_grad()) return;
      x.grad() += out.grad();
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> slice_rows(Tape<Scalar>& tape, const Tensor<Scalar>& x, Index begin, Index count) {
  if (begin < 0 || count <= 0 || begin + count > x.rows()) {
    throw ShapeError("slice_rows [" + std::to_string(begin) + ", +" + std::to_string(count) + ") out of " +
                     to_string(x.shape()));
  }
  const bool track = x.requires_grad();
  Tensor<Scalar> out({count, x.cols()}, track);
  out.matrix() = x.matrix().middleRows(begin, count);
  if (track) {
    tape.record([x = x, out, begin, count]() mutable {
      if (!out.has_grad()) return;
      Eigen::Map<RowMatrix<Scalar>>(x.grad().data(), x.rows(), x.cols()).middleRows(begin, count) +=
          out.grad_matrix();
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> slice_cols(Tape<Scalar>& tape, const Tensor<Scalar>& x, Index begin, Index count) {
  if (begin < 0 || count <= 0 || begin + count > x.cols()) {
    throw ShapeError("slice_cols [" + std::to_string(begin) + ", +" + std::to_string(count) + ") out of " +
                     to_string(x.shape()));
  }
  const bool track = x.requires_grad();
  Tensor<Scalar> out({x.rows(), count}, track);
  out.matrix() = x.matrix().middleCols(begin, count);
  if (track) {
    tape.record([x = x, out, begin, count]() mutable {
      if (!out.has_grad()) return;
      Eigen::Map<RowMatrix<Scalar>>(x.grad().data(), x.rows(), x.cols()).middleCols(begin, count) +=
          out.grad_matrix();
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> gather_rows(Tape<Scalar>& tape, const Tensor<Scalar>& x, std::span<const Index> rows) {
  if (rows.empty()) throw ShapeError("gather_rows needs at least one row");
  for (Index r : rows) {
    if (r < 0 || r >= x.rows()) {
      throw IndexError("gather_rows: row " + std::to_string(r) + " out of " + to_string(x.shape()));
    }
  }
  const bool track = x.requires_grad();
  const Index n = static_cast<Index>(rows.size());
  Tensor<Scalar> out({n, x.cols()}, track);
  for (Index i = 0; i < n; ++i) out.matrix().row(i) = x.matrix().row(rows[i]);
  if (track) {
    std::vector<Index> idx(rows.begin(), rows.end());
    tape.record([x = x, out, idx]() mutable {
      if (!out.has_grad()) return;
      Eigen::Map<RowMatrix<Scalar>> dx(x.grad().data(), x.rows(), x.cols());
      const auto dy = out.grad_matrix();
      for (std::size_t i = 0; i < idx.size(); ++i) dx.row(idx[i]) += dy.row(static_cast<Index>(i));
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> concat_rows(Tape<Scalar>& tape, std::span<const Tensor<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows needs at least one part");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw ShapeError("concat_rows column mismatch: " + to_string(parts.front().shape()) + " vs " +
                       to_string(p.shape()));
    }
    rows += p.rows();
  }
  const bool track = any_requires_grad(parts);
  Tensor<Scalar> out({rows, cols}, track);
  Index at = 0;
  for (const auto& p : parts) {
    out.matrix().middleRows(at, p.rows()) = p.matrix();
    at += p.rows();
  }
  if (track) {
    std::vector<Tensor<Scalar>> ins(parts.begin(), parts.end());
    tape.record([ins, out]() mutable {
      if (!out.has_grad()) return;
      const auto dy = out.grad_matrix();
      Index at = 0;
      for (auto& p : ins) {
        if (p.requires_grad()) {
          Eigen::Map<RowMatrix<Scalar>>(p.grad().data(), p.rows(), p.cols()) += dy.middleRows(at, p.rows());
        }
        at += p.rows();
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> concat_cols(Tape<Scalar>& tape, std::span<const Tensor<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols needs at least one part");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw ShapeError("concat_cols row mismatch: " + to_string(parts.front().shape()) + " vs " +
                       to_string(p.shape()));
    }
    cols += p.cols();
  }
  const bool track = any_requires_grad(parts);
  Tensor<Scalar> out({rows, cols}, track);
  Index at = 0;
  for (const auto& p : parts) {
    out.matrix().middleCols(at, p.cols()) = p.matrix();
    at += p.cols();
  }
  if (track) {
    std::vector<Tensor<Scalar>> ins(parts.begin(), parts.end());
    tape.record([ins, out]() mutable {
      if (!out.has_grad()) return;
      const auto dy = out.grad_matrix();
      Index at = 0;
      for (auto& p : ins) {
        if (p.requires_grad()) {
          Eigen::Map<RowMatrix<Scalar>>(p.grad().data(), p.rows(), p.cols()) += dy.middleCols(at, p.cols());
        }
        at += p.cols();
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> linear_combination(Tape<Scalar>& tape, std::span<const Tensor<Scalar>> parts,
                                  std::span<const Scalar> weights) {
  if (parts.empty() || parts.size() != weights.size()) {
    throw ShapeError("linear_combination: " + std::to_string(parts.size()) + " parts vs " +
                     std::to_string(weights.size()) + " weights");
  }
  for (const auto& p : parts) {
    if (p.shape() != parts.front().shape()) {
      throw ShapeError("linear_combination shape mismatch: " + to_string(parts.front().shape()) + " vs " +
                       to_string(p.shape()));
    }
  }
  const bool track = any_requires_grad(parts);
  Tensor<Scalar> out(parts.front().shape(), track);
  for (std::size_t i = 0; i < parts.size(); ++i) out.value() += weights[i] * parts[i].value();
  if (track) {
    std::vector<Tensor<Scalar>> ins(parts.begin(), parts.end());
    std::vector<Scalar> w(weights.begin(), weights.end());
    tape.record([ins, w, out]() mutable {
      if (!out.has_grad()) return;
      for (std::size_t i = 0; i < ins.size(); ++i) {
        if (ins[i].requires_grad()) ins[i].grad() += w[i] * out.grad();
      }
    });
  }
  return out;
}

template <typename Scalar>
void sgd_step(std::span<Tensor<Scalar>> params, Scalar lr, Scalar weight_decay) {
  for (auto& p : params) {
    if (!p.requires_grad()) continue;
    if (!p.has_grad()) throw ContractError("sgd_step: trainable tensor " + to_string(p.shape()) + " has no gradient");
  }
  for (auto& p : params) {
    if (!p.requires_grad()) continue;
    p.value() -= lr * (p.grad() + weight_decay * p.value());
    p.clear_grad();
  }
}

template <typename Scalar>
std::uint64_t checksum(const Tensor<Scalar>& t) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.value().data());
  const std::size_t n = static_cast<std::size_t>(t.size()) * sizeof(Scalar);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  for (Index d : t.shape()) {
    h ^= static_cast<std::uint64_t>(d);
    h *= 1099511628211ULL;
  }
  return h;
}

#define LDEP_INSTANTIATE_TENSOR(S)                                                                         \
  template class Tensor<S>;                                                                                \
  template class Tape<S>;                                                                                  \
  template Tensor<S> matmul(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                                 \
  template Tensor<S> transpose(Tape<S>&, const Tensor<S>&);                                                \
  template Tensor<S> add(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> add_bias(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> mul(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                                    \
  template Tensor<S> scale(Tape<S>&, const Tensor<S>&, S);                                                 \
  template Tensor<S> sum(Tape<S>&, const Tensor<S>&);                                                      \
  template Tensor<S> gelu(Tape<S>&, const Tensor<S>&);                                                     \
  template Tensor<S> softmax_rows(Tape<S>&, const Tensor<S>&);                                             \
  template Tensor<S> layer_norm(Tape<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);        \
  template Tensor<S> cross_entropy_logits(Tape<S>&, const Tensor<S>&, std::span<const int>);               \
  template Tensor<S> reshape(Tape<S>&, const Tensor<S>&, Shape);                                           \
  template Tensor<S> slice_rows(Tape<S>&, const Tensor<S>&, Index, Index);                                 \
  template Tensor<S> slice_cols(Tape<S>&, const Tensor<S>&, Index, Index);                                 \
  template Tensor<S> gather_rows(Tape<S>&, const Tensor<S>&, std::span<const Index>);                      \
  template Tensor<S> concat_rows(Tape<S>&, std::span<const Tensor<S>>);                                    \
  template Tensor<S> concat_cols(Tape<S>&, std::span<const Tensor<S>>);                                    \
  template Tensor<S> linear_combination(Tape<S>&, std::span<const Tensor<S>>, std::span<const S>);         \
  template void sgd_step(std::span<Tensor<S>>, S, S);                                                      \
  template std::uint64_t checksum(const Tensor<S>&);

LDEP_INSTANTIATE_TENSOR(float)
LDEP_INSTANTIATE_TENSOR(double)

#undef LDEP_INSTANTIATE_TENSOR

}  // namespace ldep
