#pragma once

// Reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records every operation as a node holding its value and a closure
// that pushes the node's gradient to its inputs. Only the operations the
// tracking pipeline needs are provided; all of them are column-batched so a
// whole training batch flows through one tape.

#include "surgmotion/parameters.hpp"
#include "surgmotion/types.hpp"

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace surgmotion::ad {

template <typename Scalar>
class Tape;

/// Handle to a tape node.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Matrix<Scalar>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using Backprop = std::function<void(Tape&, int)>;

  Var<Scalar> constant(Mat value) { return push(std::move(value), nullptr); }

  /// Leaf bound to a parameter block; backward() adds its gradient into the store.
  Var<Scalar> parameter(ParameterStore<Scalar>& store, int block) {
    return push(Mat(store.value(block)), [&store, block](Tape& t, int self) {
      store.grad(block) += t.grads_[self];
    });
  }

  Var<Scalar> push(Mat value, Backprop backprop) {
    nodes_.push_back({std::move(value), std::move(backprop)});
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat& value(Var<Scalar> v) const { return nodes_[v.id].value; }

  /// Gradient of the last backward() w.r.t. v (empty if v did not influence the loss).
  const Mat& grad(Var<Scalar> v) const { return grads_[v.id]; }

  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    if (grads_[id].size() == 0) {
      grads_[id] = g;
    } else {
      grads_[id] += g;
    }
  }

  const Mat& upstream(int id) const { return grads_[id]; }

  /// Propagates d(loss)/d(node) to every node and into bound parameter stores.
  /// Parameter gradients accumulate across calls.
  void backward(Var<Scalar> loss) {
    if (loss.rows() != 1 || loss.cols() != 1) {
      throw ValidationError("backward() needs a scalar loss, got " + std::to_string(loss.rows()) + "x" +
                            std::to_string(loss.cols()));
    }
    grads_.assign(nodes_.size(), Mat());
    grads_[loss.id] = Mat::Ones(1, 1);
    for (int i = loss.id; i >= 0; --i) {
      if (grads_[i].size() == 0 || !nodes_[i].backprop) continue;
      nodes_[i].backprop(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Backprop backprop;
  };
  std::vector<Node> nodes_;
  std::vector<Mat> grads_;
};

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out;
  out.noalias() = a.value() * b.value();
  return t.push(std::move(out), [a, b](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    t.accumulate(a.id, g * b.value().transpose());
    t.accumulate(b.id, a.value().transpose() * g);
  });
}

/// x + b broadcast over columns, b is rows x 1.
template <typename Scalar>
Var<Scalar> add_bias(Var<Scalar> x, Var<Scalar> b) {
  Tape<Scalar>& t = *x.tape;
  Matrix<Scalar> out = x.value().colwise() + b.value().col(0);
  return t.push(std::move(out), [x, b](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    t.accumulate(x.id, g);
    t.accumulate(b.id, g.rowwise().sum());
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>& t = *a.tape;
  return t.push(a.value() + b.value(), [a, b](Tape<Scalar>& t, int self) {
    t.accumulate(a.id, t.upstream(self));
    t.accumulate(b.id, t.upstream(self));
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>& t = *a.tape;
  return t.push(a.value() - b.value(), [a, b](Tape<Scalar>& t, int self) {
    t.accumulate(a.id, t.upstream(self));
    t.accumulate(b.id, -t.upstream(self));
  });
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> cmul(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return t.push(std::move(out), [a, b](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    t.accumulate(a.id, g.cwiseProduct(b.value()));
    t.accumulate(b.id, g.cwiseProduct(a.value()));
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  Tape<Scalar>& t = *a.tape;
  return t.push(a.value() * s, [a, s](Tape<Scalar>& t, int self) { t.accumulate(a.id, t.upstream(self) * s); });
}

template <typename Scalar>
Var<Scalar> shift(Var<Scalar> a, Scalar s) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value().array() + s;
  return t.push(std::move(out), [a](Tape<Scalar>& t, int self) { t.accumulate(a.id, t.upstream(self)); });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

namespace detail {

template <typename Scalar>
Scalar softplus(Scalar x) {
  // log(1 + e^x) without overflow
  return x > Scalar(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> tanh(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value().array().tanh();
  return t.push(std::move(out), [a](Tape<Scalar>& t, int self) {
    const Matrix<Scalar>& y = t.value(Var<Scalar>{&t, self});
    t.accumulate(a.id, t.upstream(self).cwiseProduct(Matrix<Scalar>(Scalar(1) - y.array().square())));
  });
}

template <typename Scalar>
Var<Scalar> softplus(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value().unaryExpr([](Scalar x) { return detail::softplus(x); });
  return t.push(std::move(out), [a](Tape<Scalar>& t, int self) {
    Matrix<Scalar> d = a.value().unaryExpr([](Scalar x) { return detail::sigmoid(x); });
    t.accumulate(a.id, t.upstream(self).cwiseProduct(d));
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value().unaryExpr([](Scalar x) { return detail::sigmoid(x); });
  return t.push(std::move(out), [a](Tape<Scalar>& t, int self) {
    Matrix<Scalar> s = a.value().unaryExpr([](Scalar x) { return detail::sigmoid(x); });
    t.accumulate(a.id, t.upstream(self).cwiseProduct((s.array() * (Scalar(1) - s.array())).matrix()));
  });
}

template <typename Scalar>
Var<Scalar> exp(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value().array().exp();
  return t.push(std::move(out), [a](Tape<Scalar>& t, int self) {
    t.accumulate(a.id, t.upstream(self).cwiseProduct(t.value(Var<Scalar>{&t, self})));
  });
}

/// |x| with subgradient 0 at 0.
template <typename Scalar>
Var<Scalar> abs(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value().cwiseAbs();
  return t.push(std::move(out), [a](Tape<Scalar>& t, int self) {
    Matrix<Scalar> sign = a.value().unaryExpr([](Scalar x) {
      return x > Scalar(0) ? Scalar(1) : (x < Scalar(0) ? Scalar(-1) : Scalar(0));
    });
    t.accumulate(a.id, t.upstream(self).cwiseProduct(sign));
  });
}

template <typename Scalar>
Var<Scalar> square(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value().array().square();
  return t.push(std::move(out), [a](Tape<Scalar>& t, int self) {
    t.accumulate(a.id, Scalar(2) * t.upstream(self).cwiseProduct(a.value()));
  });
}

/// Clamps to [lo, hi]; gradient is zero where clamped.
template <typename Scalar>
Var<Scalar> clamp(Var<Scalar> a, Scalar lo, Scalar hi) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value().cwiseMax(lo).cwiseMin(hi);
  return t.push(std::move(out), [a, lo, hi](Tape<Scalar>& t, int self) {
    Matrix<Scalar> pass = a.value().unaryExpr([lo, hi](Scalar x) { return (x > lo && x < hi) ? Scalar(1) : Scalar(0); });
    t.accumulate(a.id, t.upstream(self).cwiseProduct(pass));
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename Scalar>
Var<Scalar> rows(Var<Scalar> a, Eigen::Index start, Eigen::Index count) {
  Tape<Scalar>& t = *a.tape;
  return t.push(a.value().middleRows(start, count), [a, start, count](Tape<Scalar>& t, int self) {
    Matrix<Scalar> g = Matrix<Scalar>::Zero(a.rows(), a.cols());
    g.middleRows(start, count) = t.upstream(self);
    t.accumulate(a.id, g);
  });
}

/// Stacks inputs vertically; all must share the column count.
template <typename Scalar>
Var<Scalar> vcat(std::vector<Var<Scalar>> parts) {
  Tape<Scalar>& t = *parts.front().tape;
  Eigen::Index total = 0;
  for (const auto& p : parts) total += p.rows();
  Matrix<Scalar> out(total, parts.front().cols());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.push(std::move(out), [parts](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    Eigen::Index r = 0;
    for (const auto& p : parts) {
      t.accumulate(p.id, g.middleRows(r, p.rows()));
      r += p.rows();
    }
  });
}

/// out.col(i) = a.col(index[i]); backward scatter-adds.
template <typename Scalar>
Var<Scalar> gather_cols(Var<Scalar> a, std::vector<int> index) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out(a.rows(), static_cast<Eigen::Index>(index.size()));
  for (std::size_t i = 0; i < index.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = a.value().col(index[i]);
  return t.push(std::move(out), [a, index = std::move(index)](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    Matrix<Scalar> ga = Matrix<Scalar>::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < index.size(); ++i) ga.col(index[i]) += g.col(static_cast<Eigen::Index>(i));
    t.accumulate(a.id, ga);
  });
}

/// Sums each run of `group` consecutive columns: (r x n*group) -> (r x n).
template <typename Scalar>
Var<Scalar> segment_sum(Var<Scalar> a, Eigen::Index group) {
  Tape<Scalar>& t = *a.tape;
  const Eigen::Index n = a.cols() / group;
  Matrix<Scalar> out = Matrix<Scalar>::Zero(a.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index k = 0; k < group; ++k) out.col(j) += a.value().col(j * group + k);
  return t.push(std::move(out), [a, group, n](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    Matrix<Scalar> ga(a.rows(), a.cols());
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index k = 0; k < group; ++k) ga.col(j * group + k) = g.col(j);
    t.accumulate(a.id, ga);
  });
}

/// Multiplies every row of a (r x n) by the row vector w (1 x n).
template <typename Scalar>
Var<Scalar> mul_rowvec(Var<Scalar> a, Var<Scalar> w) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value().array().rowwise() * w.value().row(0).array();
  return t.push(std::move(out), [a, w](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    t.accumulate(a.id, Matrix<Scalar>(g.array().rowwise() * w.value().row(0).array()));
    t.accumulate(w.id, g.cwiseProduct(a.value()).colwise().sum());
  });
}

/// Divides every row of a (r x n) by the row vector w (1 x n).
template <typename Scalar>
Var<Scalar> div_rowvec(Var<Scalar> a, Var<Scalar> w) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value().array().rowwise() / w.value().row(0).array();
  return t.push(std::move(out), [a, w](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    const auto inv = w.value().row(0).array().inverse();
    t.accumulate(a.id, Matrix<Scalar>(g.array().rowwise() * inv));
    // d(a/w)/dw = -a / w^2
    Matrix<Scalar> ga = g.cwiseProduct(a.value());
    t.accumulate(w.id, Matrix<Scalar>(-(ga.colwise().sum().array() * inv.square())));
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), [a](Tape<Scalar>& t, int self) {
    t.accumulate(a.id, Matrix<Scalar>::Constant(a.rows(), a.cols(), t.upstream(self)(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.value().size()));
}

/// Euclidean norm of every column (1 x n); gradient 0 for zero columns.
template <typename Scalar>
Var<Scalar> col_norm(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  Matrix<Scalar> out = a.value().colwise().norm();
  return t.push(std::move(out), [a](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    const Matrix<Scalar>& n = t.value(Var<Scalar>{&t, self});
    Matrix<Scalar> ga = Matrix<Scalar>::Zero(a.rows(), a.cols());
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      if (n(0, j) > Scalar(0)) ga.col(j) = a.value().col(j) * (g(0, j) / n(0, j));
    }
    t.accumulate(a.id, ga);
  });
}

// ---------------------------------------------------------------------------
// Fused operations used by the renderer

/// Volume-rendering weights w_k = T_k * alpha_k per ray, with
/// alpha_k = 1 - exp(-sigma_k * delta_k) and T_k = prod_{l<k} (1 - alpha_l).
/// `sigma` and `delta` are 1 x (n*K) with each ray's K samples contiguous and
/// depth-ascending.
template <typename Scalar>
Var<Scalar> compositing_weights(Var<Scalar> sigma, Matrix<Scalar> delta, Eigen::Index samples) {
  Tape<Scalar>& t = *sigma.tape;
  const Eigen::Index m = sigma.cols();
  const Eigen::Index n = m / samples;
  Matrix<Scalar> w(1, m);
  Matrix<Scalar> survive(1, m);  // T_{k+1}, transmittance after sample k
  for (Eigen::Index r = 0; r < n; ++r) {
    Scalar transmittance = Scalar(1);
    for (Eigen::Index k = 0; k < samples; ++k) {
      const Eigen::Index i = r * samples + k;
      const Scalar keep = std::exp(-sigma.value()(0, i) * delta(0, i));
      const Scalar alpha = Scalar(1) - keep;
      w(0, i) = transmittance * alpha;
      transmittance *= keep;
      survive(0, i) = transmittance;
    }
  }
  return t.push(std::move(w), [sigma, delta = std::move(delta), survive = std::move(survive), samples, n](
                                  Tape<Scalar>& t, int self) {
    // dL/dsigma_m = delta_m * (g_m T_{m+1} - sum_{k>m} g_k w_k)
    const auto& g = t.upstream(self);
    const Matrix<Scalar>& w = t.value(Var<Scalar>{&t, self});
    Matrix<Scalar> gs(1, sigma.cols());
    for (Eigen::Index r = 0; r < n; ++r) {
      Scalar tail = Scalar(0);
      for (Eigen::Index k = samples - 1; k >= 0; --k) {
        const Eigen::Index i = r * samples + k;
        gs(0, i) = delta(0, i) * (g(0, i) * survive(0, i) - tail);
        tail += g(0, i) * w(0, i);
      }
    }
    t.accumulate(sigma.id, gs);
  });
}

/// [u, sin(2^l pi u), cos(2^l pi u)] for l = 0..octaves-1, stacked as rows.
template <typename Scalar>
Var<Scalar> positional_encoding(Var<Scalar> u, int octaves) {
  Tape<Scalar>& t = *u.tape;
  const Eigen::Index d = u.rows();
  Matrix<Scalar> out(d * (1 + 2 * octaves), u.cols());
  out.topRows(d) = u.value();
  for (int l = 0; l < octaves; ++l) {
    const Scalar f = static_cast<Scalar>(M_PI) * static_cast<Scalar>(1 << l);
    out.middleRows(d * (1 + 2 * l), d) = (u.value() * f).array().sin();
    out.middleRows(d * (2 + 2 * l), d) = (u.value() * f).array().cos();
  }
  return t.push(std::move(out), [u, octaves, d](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    const Matrix<Scalar>& y = t.value(Var<Scalar>{&t, self});
    Matrix<Scalar> gu = g.topRows(d);
    for (int l = 0; l < octaves; ++l) {
      const Scalar f = static_cast<Scalar>(M_PI) * static_cast<Scalar>(1 << l);
      const auto s = y.middleRows(d * (1 + 2 * l), d).array();
      const auto c = y.middleRows(d * (2 + 2 * l), d).array();
      gu.array() += f * (g.middleRows(d * (1 + 2 * l), d).array() * c - g.middleRows(d * (2 + 2 * l), d).array() * s);
    }
    t.accumulate(u.id, gu);
  });
}

/// Bilinear lookup of planes[plane_of[i]] at pixel coordinate points.col(i).
/// Returns 1 x n; differentiable w.r.t. the points.
template <typename Scalar>
Var<Scalar> sample_planes(Var<Scalar> points, std::span<const Plane* const> planes, std::vector<int> plane_of);

}  // namespace surgmotion::ad

#include "surgmotion/image.hpp"

namespace surgmotion::ad {

template <typename Scalar>
Var<Scalar> sample_planes(Var<Scalar> points, std::span<const Plane* const> planes, std::vector<int> plane_of) {
  Tape<Scalar>& t = *points.tape;
  const Eigen::Index n = points.cols();
  Matrix<Scalar> out(1, n);
  Matrix<Scalar> jac(2, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto s = sample_bilinear<Scalar>(*planes[plane_of[i]], points.value()(0, i), points.value()(1, i));
    out(0, i) = s.value;
    jac(0, i) = s.d_dx;
    jac(1, i) = s.d_dy;
  }
  return t.push(std::move(out), [points, jac = std::move(jac)](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    t.accumulate(points.id, Matrix<Scalar>(jac.array().rowwise() * g.row(0).array()));
  });
}

}  // namespace surgmotion::ad
