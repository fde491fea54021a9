#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vpl/errors.hpp"
#include "vpl/tensor.hpp"

namespace vpl {

/// Smallest positive argument accepted by safe_log; inputs below it are
/// clamped so the log stays bounded. Below the clamp the derivative is 0.
inline constexpr double kSafeLogEps = 1e-8;

/// Vector norms under this threshold make a cosine undefined.
inline constexpr double kDegenerateNorm = 1e-12;

using NodeId = std::size_t;

/// Define-by-run reverse-mode tape. Values are computed eagerly as ops are
/// recorded; backward() replays the tape in reverse insertion order, which is
/// a valid topological order by construction.
///
/// A tape is confined to one thread for its lifetime. Each forward pass
/// builds a fresh tape, so the graph topology is free to depend on data
/// (perturbation branches come and go between steps).
class Tape {
 public:
  /// Inserts a leaf node. Gradients are accumulated only for leaves created
  /// with requires_grad = true.
  NodeId leaf(Tensor value, bool requires_grad) {
    Node node;
    node.value = std::move(value);
    node.needs_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
  }

  /// Leaf that is constant with respect to differentiation.
  NodeId constant(Tensor value) { return leaf(std::move(value), false); }

  NodeId scalar_constant(double v) { return constant(Tensor::scalar(v)); }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }

  std::size_t size() const { return nodes_.size(); }

  // ---- arithmetic ---------------------------------------------------------

  NodeId matmul(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows()) {
      throw ShapeError("matmul: incompatible shapes " + shape_str(A.shape()) +
                       " vs " + shape_str(B.shape()));
    }
    const std::size_t r = A.rows(), k = A.cols(), c = B.cols();
    Tensor Y = Tensor::zeros({r, c});
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t t = 0; t < k; ++t) {
        const double av = A.at(i, t);
        for (std::size_t j = 0; j < c; ++j) Y.at(i, j) += av * B.at(t, j);
      }
    }
    return push(std::move(Y), {a, b}, [a, b, r, k, c](Tape& tp, const Tensor& g) {
      const Tensor& A = tp.value(a);
      const Tensor& B = tp.value(b);
      if (tp.wants_grad(a)) {
        Tensor dA = Tensor::zeros({r, k});
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double gv = g.at(i, j);
            for (std::size_t t = 0; t < k; ++t) dA.at(i, t) += gv * B.at(t, j);
          }
        tp.accumulate(a, std::move(dA));
      }
      if (tp.wants_grad(b)) {
        Tensor dB = Tensor::zeros({k, c});
        for (std::size_t t = 0; t < k; ++t)
          for (std::size_t i = 0; i < r; ++i) {
            const double av = A.at(i, t);
            for (std::size_t j = 0; j < c; ++j) dB.at(t, j) += av * g.at(i, j);
          }
        tp.accumulate(b, std::move(dB));
      }
    });
  }

  NodeId matvec(NodeId a, NodeId x) {
    const Tensor& A = value(a);
    const Tensor& v = value(x);
    if (A.rank() != 2 || v.rank() != 1 || A.cols() != v.numel()) {
      throw ShapeError("matvec: incompatible shapes " + shape_str(A.shape()) +
                       " vs " + shape_str(v.shape()));
    }
    const std::size_t r = A.rows(), k = A.cols();
    Tensor y = Tensor::zeros({r});
    for (std::size_t i = 0; i < r; ++i) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += A.at(i, t) * v[t];
      y[i] = acc;
    }
    return push(std::move(y), {a, x}, [a, x, r, k](Tape& tp, const Tensor& g) {
      const Tensor& A = tp.value(a);
      const Tensor& v = tp.value(x);
      if (tp.wants_grad(a)) {
        Tensor dA = Tensor::zeros({r, k});
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t t = 0; t < k; ++t) dA.at(i, t) = g[i] * v[t];
        tp.accumulate(a, std::move(dA));
      }
      if (tp.wants_grad(x)) {
        Tensor dv = Tensor::zeros({k});
        for (std::size_t t = 0; t < k; ++t) {
          double acc = 0.0;
          for (std::size_t i = 0; i < r; ++i) acc += A.at(i, t) * g[i];
          dv[t] = acc;
        }
        tp.accumulate(x, std::move(dv));
      }
    });
  }

  NodeId transpose(NodeId a) {
    const Tensor& A = value(a);
    if (A.rank() != 2) {
      throw ShapeError("transpose: rank-2 required, got " + shape_str(A.shape()));
    }
    const std::size_t r = A.rows(), c = A.cols();
    Tensor Y = Tensor::zeros({c, r});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) Y.at(j, i) = A.at(i, j);
    return push(std::move(Y), {a}, [a, r, c](Tape& tp, const Tensor& g) {
      Tensor dA = Tensor::zeros({r, c});
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dA.at(i, j) = g.at(j, i);
      tp.accumulate(a, std::move(dA));
    });
  }

  NodeId add(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_same_shape(A, B, "add");
    Tensor Y = A;
    for (std::size_t i = 0; i < Y.numel(); ++i) Y[i] += B[i];
    return push(std::move(Y), {a, b}, [a, b](Tape& tp, const Tensor& g) {
      if (tp.wants_grad(a)) tp.accumulate(a, g);
      if (tp.wants_grad(b)) tp.accumulate(b, g);
    });
  }

  /// Adds vector v to every column of matrix m (the "b 1ᵀ" bias pattern).
  NodeId add_bias_cols(NodeId m, NodeId x) {
    const Tensor& M = value(m);
    const Tensor& v = value(x);
    if (M.rank() != 2 || v.rank() != 1 || M.rows() != v.numel()) {
      throw ShapeError("add_bias_cols: incompatible shapes " +
                       shape_str(M.shape()) + " vs " + shape_str(v.shape()));
    }
    const std::size_t r = M.rows(), c = M.cols();
    Tensor Y = M;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) Y.at(i, j) += v[i];
    return push(std::move(Y), {m, x}, [m, x, r, c](Tape& tp, const Tensor& g) {
      if (tp.wants_grad(m)) tp.accumulate(m, g);
      if (tp.wants_grad(x)) {
        Tensor dv = Tensor::zeros({r});
        for (std::size_t i = 0; i < r; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < c; ++j) acc += g.at(i, j);
          dv[i] = acc;
        }
        tp.accumulate(x, std::move(dv));
      }
    });
  }

  NodeId hadamard(NodeId a, NodeId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_same_shape(A, B, "hadamard");
    Tensor Y = A;
    for (std::size_t i = 0; i < Y.numel(); ++i) Y[i] *= B[i];
    return push(std::move(Y), {a, b}, [a, b](Tape& tp, const Tensor& g) {
      const Tensor& A = tp.value(a);
      const Tensor& B = tp.value(b);
      if (tp.wants_grad(a)) {
        Tensor dA = g;
        for (std::size_t i = 0; i < dA.numel(); ++i) dA[i] *= B[i];
        tp.accumulate(a, std::move(dA));
      }
      if (tp.wants_grad(b)) {
        Tensor dB = g;
        for (std::size_t i = 0; i < dB.numel(); ++i) dB[i] *= A[i];
        tp.accumulate(b, std::move(dB));
      }
    });
  }

  NodeId scale(NodeId a, double c) {
    Tensor Y = value(a);
    for (std::size_t i = 0; i < Y.numel(); ++i) Y[i] *= c;
    return push(std::move(Y), {a}, [a, c](Tape& tp, const Tensor& g) {
      Tensor dA = g;
      for (std::size_t i = 0; i < dA.numel(); ++i) dA[i] *= c;
      tp.accumulate(a, std::move(dA));
    });
  }

  NodeId add_scalar(NodeId a, double c) {
    Tensor Y = value(a);
    for (std::size_t i = 0; i < Y.numel(); ++i) Y[i] += c;
    return push(std::move(Y), {a}, [a](Tape& tp, const Tensor& g) {
      tp.accumulate(a, g);
    });
  }

  // ---- nonlinearities -----------------------------------------------------

  NodeId relu(NodeId a) {
    Tensor Y = value(a);
    for (std::size_t i = 0; i < Y.numel(); ++i) Y[i] = Y[i] > 0.0 ? Y[i] : 0.0;
    return push(std::move(Y), {a}, [a](Tape& tp, const Tensor& g) {
      const Tensor& X = tp.value(a);
      Tensor dA = g;
      // subgradient at 0 is 0
      for (std::size_t i = 0; i < dA.numel(); ++i)
        if (X[i] <= 0.0) dA[i] = 0.0;
      tp.accumulate(a, std::move(dA));
    });
  }

  NodeId sigmoid(NodeId a) {
    Tensor Y = value(a);
    for (std::size_t i = 0; i < Y.numel(); ++i) Y[i] = sigmoid_value(Y[i]);
    return push(std::move(Y), {a}, [a, self = nodes_.size()](Tape& tp, const Tensor& g) {
      const Tensor& Y = tp.value(self);
      Tensor dA = g;
      for (std::size_t i = 0; i < dA.numel(); ++i) dA[i] *= Y[i] * (1.0 - Y[i]);
      tp.accumulate(a, std::move(dA));
    });
  }

  NodeId exp(NodeId a) {
    Tensor Y = value(a);
    for (std::size_t i = 0; i < Y.numel(); ++i) Y[i] = std::exp(Y[i]);
    if (!Y.all_finite()) throw NumericError("exp overflowed to non-finite value");
    return push(std::move(Y), {a}, [a, self = nodes_.size()](Tape& tp, const Tensor& g) {
      const Tensor& Y = tp.value(self);
      Tensor dA = g;
      for (std::size_t i = 0; i < dA.numel(); ++i) dA[i] *= Y[i];
      tp.accumulate(a, std::move(dA));
    });
  }

  /// log with the argument clamped at kSafeLogEps from below. Below the clamp
  /// the output is constant, so the derivative there is exactly 0.
  NodeId safe_log(NodeId a) {
    Tensor Y = value(a);
    for (std::size_t i = 0; i < Y.numel(); ++i)
      Y[i] = std::log(Y[i] > kSafeLogEps ? Y[i] : kSafeLogEps);
    return push(std::move(Y), {a}, [a](Tape& tp, const Tensor& g) {
      const Tensor& X = tp.value(a);
      Tensor dA = g;
      for (std::size_t i = 0; i < dA.numel(); ++i)
        dA[i] = X[i] > kSafeLogEps ? dA[i] / X[i] : 0.0;
      tp.accumulate(a, std::move(dA));
    });
  }

  NodeId softplus(NodeId a) {
    Tensor Y = value(a);
    for (std::size_t i = 0; i < Y.numel(); ++i) Y[i] = softplus_value(Y[i]);
    return push(std::move(Y), {a}, [a](Tape& tp, const Tensor& g) {
      const Tensor& X = tp.value(a);
      Tensor dA = g;
      for (std::size_t i = 0; i < dA.numel(); ++i) dA[i] *= sigmoid_value(X[i]);
      tp.accumulate(a, std::move(dA));
    });
  }

  // ---- reductions and vector ops ------------------------------------------

  NodeId sum(NodeId a) {
    const Tensor& A = value(a);
    double acc = 0.0;
    for (std::size_t i = 0; i < A.numel(); ++i) acc += A[i];
    return push(Tensor::scalar(acc), {a}, [a](Tape& tp, const Tensor& g) {
      const double gv = g[0];
      Tensor dA = Tensor::full(tp.value(a).shape(), gv);
      tp.accumulate(a, std::move(dA));
    });
  }

  /// Arithmetic mean of the columns of a rank-2 tensor.
  NodeId mean_pool_cols(NodeId m) {
    const Tensor& M = value(m);
    if (M.rank() != 2) {
      throw ShapeError("mean_pool_cols: rank-2 required, got " +
                       shape_str(M.shape()));
    }
    const std::size_t r = M.rows(), c = M.cols();
    if (c == 0) throw ContractError("mean_pool_cols: empty input (0 columns)");
    Tensor y = Tensor::zeros({r});
    for (std::size_t i = 0; i < r; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < c; ++j) acc += M.at(i, j);
      y[i] = acc / static_cast<double>(c);
    }
    return push(std::move(y), {m}, [m, r, c](Tape& tp, const Tensor& g) {
      Tensor dM = Tensor::zeros({r, c});
      const double inv = 1.0 / static_cast<double>(c);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dM.at(i, j) = g[i] * inv;
      tp.accumulate(m, std::move(dM));
    });
  }

  /// Numerically stable softmax of a rank-1 tensor (max subtraction).
  NodeId softmax(NodeId x) {
    const Tensor& v = value(x);
    if (v.rank() != 1) {
      throw ShapeError("softmax: rank-1 required, got " + shape_str(v.shape()));
    }
    const std::size_t n = v.numel();
    double mx = v[0];
    for (std::size_t i = 1; i < n; ++i) mx = v[i] > mx ? v[i] : mx;
    Tensor p = Tensor::zeros({n});
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = std::exp(v[i] - mx);
      z += p[i];
    }
    for (std::size_t i = 0; i < n; ++i) p[i] /= z;
    return push(std::move(p), {x}, [x, self = nodes_.size(), n](Tape& tp, const Tensor& g) {
      const Tensor& p = tp.value(self);
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += g[i] * p[i];
      Tensor dx = Tensor::zeros({n});
      for (std::size_t i = 0; i < n; ++i) dx[i] = p[i] * (g[i] - dot);
      tp.accumulate(x, std::move(dx));
    });
  }

  /// Cosine similarity of two rank-1 tensors; scalar in [-1, 1].
  NodeId cosine(NodeId u, NodeId v) {
    const Tensor& U = value(u);
    const Tensor& V = value(v);
    if (U.rank() != 1 || V.rank() != 1 || U.numel() != V.numel()) {
      throw ShapeError("cosine: incompatible shapes " + shape_str(U.shape()) +
                       " vs " + shape_str(V.shape()));
    }
    const std::size_t n = U.numel();
    double uu = 0.0, vv = 0.0, uv = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      uu += U[i] * U[i];
      vv += V[i] * V[i];
      uv += U[i] * V[i];
    }
    const double nu = std::sqrt(uu), nv = std::sqrt(vv);
    if (nu < kDegenerateNorm || nv < kDegenerateNorm) {
      throw DegenerateVectorError("cosine: vector norm below " +
                                  std::to_string(kDegenerateNorm));
    }
    const double c = uv / (nu * nv);
    return push(Tensor::scalar(c), {u, v},
                [u, v, nu, nv, c, n](Tape& tp, const Tensor& g) {
                  const Tensor& U = tp.value(u);
                  const Tensor& V = tp.value(v);
                  const double gv = g[0];
                  if (tp.wants_grad(u)) {
                    Tensor du = Tensor::zeros({n});
                    for (std::size_t i = 0; i < n; ++i)
                      du[i] = gv * (V[i] / (nu * nv) - c * U[i] / (nu * nu));
                    tp.accumulate(u, std::move(du));
                  }
                  if (tp.wants_grad(v)) {
                    Tensor dv = Tensor::zeros({n});
                    for (std::size_t i = 0; i < n; ++i)
                      dv[i] = gv * (U[i] / (nu * nv) - c * V[i] / (nv * nv));
                    tp.accumulate(v, std::move(dv));
                  }
                });
  }

  /// Mean of the selected rows of a rank-2 tensor (embedding lookup).
  /// Duplicate ids are allowed and accumulate their share of the gradient.
  NodeId rows_mean(NodeId table, const std::vector<std::size_t>& ids) {
    const Tensor& E = value(table);
    if (E.rank() != 2) {
      throw ShapeError("rows_mean: rank-2 required, got " + shape_str(E.shape()));
    }
    if (ids.empty()) throw ContractError("rows_mean: empty id list");
    const std::size_t r = E.rows(), c = E.cols();
    for (std::size_t id : ids) {
      if (id >= r) {
        throw VocabularyError("rows_mean: id " + std::to_string(id) +
                              " outside table with " + std::to_string(r) +
                              " rows");
      }
    }
    Tensor y = Tensor::zeros({c});
    for (std::size_t id : ids)
      for (std::size_t j = 0; j < c; ++j) y[j] += E.at(id, j);
    const double inv = 1.0 / static_cast<double>(ids.size());
    for (std::size_t j = 0; j < c; ++j) y[j] *= inv;
    return push(std::move(y), {table},
                [table, ids, r, c, inv](Tape& tp, const Tensor& g) {
                  Tensor dE = Tensor::zeros({r, c});
                  for (std::size_t id : ids)
                    for (std::size_t j = 0; j < c; ++j)
                      dE.at(id, j) += g[j] * inv;
                  tp.accumulate(table, std::move(dE));
                });
  }

  // ---- backward -----------------------------------------------------------

  /// Reverse-mode sweep from a scalar loss node. Gradients for leaves with
  /// no path to the loss are exact zeros.
  void backward(NodeId loss) {
    if (value(loss).numel() != 1) {
      throw ContractError("backward: loss must be scalar, got " +
                          shape_str(value(loss).shape()));
    }
    grads_.assign(nodes_.size(), Tensor());
    has_grad_.assign(nodes_.size(), 0);
    grads_[loss] = Tensor::full(value(loss).shape(), 1.0);
    has_grad_[loss] = 1;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (!has_grad_[i] || !nodes_[i].backprop) continue;
      nodes_[i].backprop(*this, grads_[i]);
    }
    backward_done_ = true;
  }

  /// Gradient of the last backward() loss with respect to node id.
  const Tensor& grad(NodeId id) {
    if (!backward_done_) throw ContractError("grad: backward() has not run");
    if (!has_grad_[id]) {
      grads_[id] = Tensor::zeros(nodes_[id].value.shape());
      has_grad_[id] = 1;
    }
    return grads_[id];
  }

  // Used by backward closures.
  bool wants_grad(NodeId id) const { return nodes_[id].needs_grad; }

  void accumulate(NodeId id, Tensor g) {
    if (!nodes_[id].needs_grad) return;
    if (!has_grad_[id]) {
      grads_[id] = std::move(g);
      has_grad_[id] = 1;
    } else {
      grads_[id].add_in_place(g);
    }
  }

  static double sigmoid_value(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                    : std::exp(x) / (1.0 + std::exp(x));
  }

  static double softplus_value(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  }

 private:
  struct Node {
    Tensor value;
    bool needs_grad = false;
    std::function<void(Tape&, const Tensor&)> backprop;
  };

  NodeId push(Tensor value, std::initializer_list<NodeId> inputs,
              std::function<void(Tape&, const Tensor&)> backprop) {
    Node node;
    node.value = std::move(value);
    for (NodeId in : inputs) node.needs_grad |= nodes_[in].needs_grad;
    if (node.needs_grad) node.backprop = std::move(backprop);
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
  }

  // deque keeps value() references stable while the tape grows
  std::deque<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<char> has_grad_;
  bool backward_done_ = false;
};

}  // namespace vpl
