#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape owns every value produced during a forward pass; Tensor is
// a cheap handle (tape pointer + node index). All primitives are templated on
// the scalar type so the same graph can be evaluated in float for training and
// in double for finite-difference checks.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moment/errors.hpp"

namespace moment {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
class Tape;

template <typename Scalar>
class Tensor {
 public:
  using Mat = Matrix<Scalar>;

  Tensor() = default;
  Tensor(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Mat& value() const { return tape_->value(id_); }
  // Empty (0x0) until backward has reached this node.
  const Mat& grad() const { return tape_->grad(id_); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor<Scalar> variable(Mat value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, {}});
    return Tensor<Scalar>(this, nodes_.size() - 1);
  }

  Tensor<Scalar> constant(Mat value) { return variable(std::move(value), false); }

  // Records a derived value. The backward function is kept only when at least
  // one input participates in differentiation.
  Tensor<Scalar> record(Mat value, std::initializer_list<Tensor<Scalar>> inputs,
                        BackwardFn backward) {
    bool needs = false;
    for (const auto& in : inputs) {
      if (&in.tape() != this) {
        throw ContractError("tensor belongs to a different tape");
      }
      needs = needs || requires_grad(in.id());
    }
    nodes_.push_back(Node{std::move(value), Mat(), needs, needs ? std::move(backward) : BackwardFn{}});
    return Tensor<Scalar>(this, nodes_.size() - 1);
  }

  const Mat& value(std::size_t id) const { return nodes_.at(id).value; }
  const Mat& grad(std::size_t id) const { return nodes_.at(id).grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void backward(const Tensor<Scalar>& loss) {
    if (loss.rows() != 1 || loss.cols() != 1) {
      throw ContractError("backward requires a scalar (1x1) loss, got " +
                          std::to_string(loss.rows()) + "x" + std::to_string(loss.cols()));
    }
    if (backward_done_) throw ContractError("tape has already been traversed by backward");
    backward_done_ = true;
    if (!requires_grad(loss.id())) return;
    nodes_[loss.id()].grad = Mat::Ones(1, 1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

namespace detail {

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
  }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()) + ")");
  }
  Matrix<Scalar> out = a.value() * b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<Scalar>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(a.value() + b.value(), {a, b}, [ia, ib](Tape<Scalar>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(a.value() - b.value(), {a, b}, [ia, ib](Tape<Scalar>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, -t.grad(self));
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a, b, "mul");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(a.value().cwiseProduct(b.value()), {a, b},
                         [ia, ib](Tape<Scalar>& t, std::size_t self) {
                           if (t.requires_grad(ia)) t.accumulate(ia, t.grad(self).cwiseProduct(t.value(ib)));
                           if (t.requires_grad(ib)) t.accumulate(ib, t.grad(self).cwiseProduct(t.value(ia)));
                         });
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, b);
}

template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return sub(a, b);
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s) {
  const std::size_t ia = a.id();
  return a.tape().record(a.value() * s, {a}, [ia, s](Tape<Scalar>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self) * s);
  });
}

// a (R x C) plus a 1 x C row broadcast over every row.
template <typename Scalar>
Tensor<Scalar> add_row(const Tensor<Scalar>& a, const Tensor<Scalar>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: bias must be 1x" + std::to_string(a.cols()));
  }
  Matrix<Scalar> out = a.value().rowwise() + row.value().row(0);
  const std::size_t ia = a.id(), ir = row.id();
  return a.tape().record(std::move(out), {a, row}, [ia, ir](Tape<Scalar>& t, std::size_t self) {
    t.accumulate(ia, t.grad(self));
    if (t.requires_grad(ir)) t.accumulate(ir, t.grad(self).colwise().sum());
  });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  const std::size_t ia = a.id();
  return a.tape().record(a.value().cwiseMax(Scalar(0)), {a}, [ia](Tape<Scalar>& t, std::size_t self) {
    const auto& x = t.value(ia);
    t.accumulate(ia, t.grad(self).cwiseProduct((x.array() > Scalar(0)).template cast<Scalar>().matrix()));
  });
}

template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& a) {
  const std::size_t ia = a.id();
  return a.tape().record(a.value().cwiseAbs2(), {a}, [ia](Tape<Scalar>& t, std::size_t self) {
    t.accumulate(ia, Scalar(2) * t.grad(self).cwiseProduct(t.value(ia)));
  });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  const std::size_t ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return a.tape().record(std::move(out), {a}, [ia, r, c](Tape<Scalar>& t, std::size_t self) {
    t.accumulate(ia, Matrix<Scalar>::Constant(r, c, t.grad(self)(0, 0)));
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.value().size()));
}

// Same data, new shape. Row-major storage makes this a pure relabeling.
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) {
    throw DimensionError("reshape: element count changes from " + std::to_string(a.value().size()) +
                         " to " + std::to_string(rows * cols));
  }
  Matrix<Scalar> out = Eigen::Map<const Matrix<Scalar>>(a.value().data(), rows, cols);
  const std::size_t ia = a.id();
  const auto r = a.rows(), c = a.cols();
  return a.tape().record(std::move(out), {a}, [ia, r, c](Tape<Scalar>& t, std::size_t self) {
    t.accumulate(ia, Eigen::Map<const Matrix<Scalar>>(t.grad(self).data(), r, c));
  });
}

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& x) {
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar m = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> softmax_lastdim(const Tensor<Scalar>& x) {
  if (x.cols() < 1) throw DimensionError("softmax_lastdim: empty last dimension");
  const std::size_t ix = x.id();
  return x.tape().record(softmax_rows(x.value()), {x}, [ix](Tape<Scalar>& t, std::size_t self) {
    const auto& y = t.value(self);
    const auto& g = t.grad(self);
    Matrix<Scalar> dx(y.rows(), y.cols());
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const Scalar dot = g.row(i).dot(y.row(i));
      dx.row(i) = y.row(i).cwiseProduct((g.row(i).array() - dot).matrix());
    }
    t.accumulate(ix, dx);
  });
}

// Bias-free, mean-free layer normalization: gamma * x / rms(x) per row.
template <typename Scalar>
Tensor<Scalar> scale_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, Scalar eps = Scalar(1e-6)) {
  if (gamma.rows() != 1 || gamma.cols() != x.cols()) {
    throw DimensionError("scale_norm: gamma must be 1x" + std::to_string(x.cols()));
  }
  const auto& xv = x.value();
  const Eigen::Index d = xv.cols();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_rms(xv.rows());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) {
    inv_rms(i) = Scalar(1) / std::sqrt(xv.row(i).squaredNorm() / static_cast<Scalar>(d) + eps);
  }
  Matrix<Scalar> out = (inv_rms.asDiagonal() * xv) * gamma.value().row(0).asDiagonal();
  const std::size_t ix = x.id(), ig = gamma.id();
  return x.tape().record(std::move(out), {x, gamma}, [ix, ig, inv_rms, d](Tape<Scalar>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(ix);
    const auto gam = t.value(ig).row(0);
    if (t.requires_grad(ig)) {
      t.accumulate(ig, (inv_rms.asDiagonal() * xv).cwiseProduct(g).colwise().sum());
    }
    if (t.requires_grad(ix)) {
      Matrix<Scalar> gg = g * gam.asDiagonal();
      Matrix<Scalar> dx(xv.rows(), xv.cols());
      for (Eigen::Index i = 0; i < xv.rows(); ++i) {
        const Scalar r = inv_rms(i);
        const Scalar proj = gg.row(i).dot(xv.row(i));
        dx.row(i) = r * gg.row(i) - (r * r * r * proj / static_cast<Scalar>(d)) * xv.row(i);
      }
      t.accumulate(ix, dx);
    }
  });
}

// Rows whose keep flag is 0 are replaced by `fill` (1 x C); others pass through.
template <typename Scalar>
Tensor<Scalar> substitute_rows(const Tensor<Scalar>& a, const Tensor<Scalar>& fill,
                               std::span<const std::uint8_t> keep) {
  if (static_cast<Eigen::Index>(keep.size()) != a.rows()) {
    throw DimensionError("substitute_rows: keep flags must have one entry per row");
  }
  if (fill.rows() != 1 || fill.cols() != a.cols()) {
    throw DimensionError("substitute_rows: fill must be 1x" + std::to_string(a.cols()));
  }
  Matrix<Scalar> out = a.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    if (!keep[static_cast<std::size_t>(i)]) out.row(i) = fill.value().row(0);
  }
  std::vector<std::uint8_t> flags(keep.begin(), keep.end());
  const std::size_t ia = a.id(), ifl = fill.id();
  return a.tape().record(std::move(out), {a, fill},
                         [ia, ifl, flags = std::move(flags)](Tape<Scalar>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           Matrix<Scalar> da = g;
                           RowVector<Scalar> dfill = RowVector<Scalar>::Zero(g.cols());
                           for (Eigen::Index i = 0; i < g.rows(); ++i) {
                             if (!flags[static_cast<std::size_t>(i)]) {
                               dfill += g.row(i);
                               da.row(i).setZero();
                             }
                           }
                           if (t.requires_grad(ia)) t.accumulate(ia, da);
                           if (t.requires_grad(ifl)) t.accumulate(ifl, dfill);
                         });
}

// Optional sink for attention probabilities: one (block_len x block_len)
// matrix per (block, head), block-major.
template <typename Scalar>
struct AttentionCapture {
  std::vector<Matrix<Scalar>> probabilities;
};

// Multi-head self-attention over independent blocks of `block_len` rows
// (one block per series). q, k, v are (blocks*block_len) x D projections;
// bias_table is n_buckets x n_heads and bucket_of(i, j) indexes it for query
// i attending key j. Logits are scaled by 1/sqrt(D/n_heads).
template <typename Scalar>
Tensor<Scalar> multi_head_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                                    const Tensor<Scalar>& bias_table,
                                    const Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& bucket_of,
                                    int n_heads, int block_len, AttentionCapture<Scalar>* capture = nullptr) {
  detail::require_same_shape(q, k, "attention(q,k)");
  detail::require_same_shape(q, v, "attention(q,v)");
  const Eigen::Index rows = q.rows(), d = q.cols();
  if (n_heads <= 0 || d % n_heads != 0) throw DimensionError("attention: model width not divisible by heads");
  if (block_len <= 0 || rows % block_len != 0) throw DimensionError("attention: rows not a multiple of block length");
  if (bucket_of.rows() != block_len || bucket_of.cols() != block_len) {
    throw DimensionError("attention: bucket index must be block_len x block_len");
  }
  if (bias_table.cols() != n_heads) throw DimensionError("attention: bias table needs one column per head");
  const Eigen::Index dh = d / n_heads;
  const Eigen::Index blocks = rows / block_len;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  const auto& table = bias_table.value();

  std::vector<Matrix<Scalar>> probs(static_cast<std::size_t>(blocks * n_heads));
  Matrix<Scalar> out(rows, d);
  Matrix<Scalar> bias(block_len, block_len);
  for (int h = 0; h < n_heads; ++h) {
    for (Eigen::Index i = 0; i < block_len; ++i) {
      for (Eigen::Index j = 0; j < block_len; ++j) bias(i, j) = table(bucket_of(i, j), h);
    }
    for (Eigen::Index b = 0; b < blocks; ++b) {
      const auto qb = qv.block(b * block_len, h * dh, block_len, dh);
      const auto kb = kv.block(b * block_len, h * dh, block_len, dh);
      const auto vb = vv.block(b * block_len, h * dh, block_len, dh);
      Matrix<Scalar> logits = (qb * kb.transpose()) * inv_sqrt + bias;
      Matrix<Scalar> a = softmax_rows(logits);
      out.block(b * block_len, h * dh, block_len, dh).noalias() = a * vb;
      probs[static_cast<std::size_t>(b * n_heads + h)] = std::move(a);
    }
  }
  if (capture != nullptr) capture->probabilities = probs;

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id(), ib = bias_table.id();
  return q.tape().record(
      std::move(out), {q, k, v, bias_table},
      [=, probs = std::move(probs)](Tape<Scalar>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& qv = t.value(iq);
        const auto& kv = t.value(ik);
        const auto& vv = t.value(iv);
        Matrix<Scalar> dq = Matrix<Scalar>::Zero(rows, d);
        Matrix<Scalar> dk = Matrix<Scalar>::Zero(rows, d);
        Matrix<Scalar> dv = Matrix<Scalar>::Zero(rows, d);
        Matrix<Scalar> dtable = Matrix<Scalar>::Zero(t.value(ib).rows(), n_heads);
        for (Eigen::Index b = 0; b < blocks; ++b) {
          for (int h = 0; h < n_heads; ++h) {
            const auto& a = probs[static_cast<std::size_t>(b * n_heads + h)];
            const auto gb = g.block(b * block_len, h * dh, block_len, dh);
            const auto qb = qv.block(b * block_len, h * dh, block_len, dh);
            const auto kb = kv.block(b * block_len, h * dh, block_len, dh);
            const auto vb = vv.block(b * block_len, h * dh, block_len, dh);
            dv.block(b * block_len, h * dh, block_len, dh).noalias() = a.transpose() * gb;
            Matrix<Scalar> da = gb * vb.transpose();
            Matrix<Scalar> ds(block_len, block_len);
            for (Eigen::Index i = 0; i < block_len; ++i) {
              const Scalar dot = da.row(i).dot(a.row(i));
              ds.row(i) = a.row(i).cwiseProduct((da.row(i).array() - dot).matrix());
            }
            for (Eigen::Index i = 0; i < block_len; ++i) {
              for (Eigen::Index j = 0; j < block_len; ++j) dtable(bucket_of(i, j), h) += ds(i, j);
            }
            dq.block(b * block_len, h * dh, block_len, dh).noalias() = (ds * kb) * inv_sqrt;
            dk.block(b * block_len, h * dh, block_len, dh).noalias() = (ds.transpose() * qb) * inv_sqrt;
          }
        }
        t.accumulate(iq, dq);
        t.accumulate(ik, dk);
        t.accumulate(iv, dv);
        t.accumulate(ib, dtable);
      });
}

}  // namespace moment
