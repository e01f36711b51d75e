#pragma once

// Dense f64 tensors with reverse-mode taped autodiff.
//
// A Tensor is a shared handle to a graph node holding values, an optional
// gradient, and a backward closure. Kernels record their backward rule only
// when grad mode is on and some input requires grad, so frozen-checkpoint
// inference builds no graph. All data is row-major contiguous; matmul is
// backed by Eigen.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "molang/common.hpp"

namespace molang {

using EigenRowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EigenMap = Eigen::Map<EigenRowMat>;
using EigenConstMap = Eigen::Map<const EigenRowMat>;

namespace detail {
inline thread_local bool grad_enabled = true;
}

// Disables graph recording in the current thread for its lifetime.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_mode_enabled() { return detail::grad_enabled; }

struct TensorNode {
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until touched by backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->values.assign(static_cast<size_t>(n->numel()), 0.0);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor from_values(std::vector<int> shape, std::vector<double> values,
                            bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    check(static_cast<int64_t>(values.size()) == n->numel(),
          "tensor values length does not match shape");
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_values({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& ptr() const { return node_; }

  const std::vector<int>& shape() const { return node_->shape; }
  int64_t numel() const { return node_->numel(); }
  int rows() const { return node_->shape.empty() ? 1 : node_->shape[0]; }
  int cols() const {
    if (node_->shape.size() < 2) return node_->shape.empty() ? 1 : 1;
    return node_->shape[1];
  }
  bool is_scalar() const { return numel() == 1; }
  double item() const {
    check(is_scalar(), "item() on non-scalar tensor");
    return node_->values[0];
  }

  std::vector<double>& values() const { return node_->values; }
  std::vector<double>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  void zero_grad() const { node_->grad.assign(node_->values.size(), 0.0); }

  EigenConstMap mat() const {
    return EigenConstMap(node_->values.data(), rows(), cols());
  }
  EigenMap mat_mut() const {
    return EigenMap(node_->values.data(), rows(), cols());
  }
  EigenMap grad_mat() const {
    node_->ensure_grad();
    return EigenMap(node_->grad.data(), rows(), cols());
  }

 private:
  std::shared_ptr<TensorNode> node_;
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

inline void assert_finite(const Tensor& t, const char* kernel) {
#ifndef NDEBUG
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("non-finite value produced by kernel ") + kernel);
    }
  }
#else
  (void)t;
  (void)kernel;
#endif
}

inline bool track(std::initializer_list<Tensor> inputs) {
  if (!grad_enabled) return false;
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

inline Tensor make_result(std::vector<int> shape, std::vector<double> values,
                          std::vector<Tensor> parents,
                          std::function<void(TensorNode&)> backward_fn) {
  auto out = Tensor::from_values(std::move(shape), std::move(values), false);
  bool tracked = grad_enabled;
  if (tracked) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    tracked = any;
  }
  if (tracked) {
    out.node()->requires_grad = true;
    for (auto& p : parents) out.node()->parents.push_back(p.ptr());
    out.node()->backward_fn = std::move(backward_fn);
  }
  return out;
}

}  // namespace detail

// ----------------------------------------------------------------- kernels

inline Tensor add(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  std::vector<double> v(a.values().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  auto an = a.node();
  auto bn = b.node();
  auto out = detail::make_result(a.shape(), std::move(v), {a, b}, [an, bn](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
    }
  });
  detail::assert_finite(out, "add");
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  std::vector<double> v(a.values().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
  auto an = a.node();
  auto bn = b.node();
  auto out = detail::make_result(a.shape(), std::move(v), {a, b}, [an, bn](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    }
  });
  detail::assert_finite(out, "sub");
  return out;
}

// Broadcast-add a [1 x C] row vector to every row of a [N x C] matrix.
inline Tensor add_rowvec(const Tensor& a, const Tensor& b) {
  check(a.shape().size() == 2 && b.numel() == a.cols(),
        "add_rowvec: shape mismatch " + shape_str(a.shape()) + " vs " +
            shape_str(b.shape()));
  int N = a.rows(), C = a.cols();
  std::vector<double> v(a.values().size());
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < C; ++j) v[i * C + j] = a.values()[i * C + j] + b.values()[j];
  auto an = a.node();
  auto bn = b.node();
  auto out = detail::make_result(a.shape(), std::move(v), {a, b}, [an, bn, N, C](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < C; ++j) bn->grad[j] += self.grad[static_cast<size_t>(i) * C + j];
    }
  });
  detail::assert_finite(out, "add_rowvec");
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  std::vector<double> v(a.values().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
  auto an = a.node();
  auto bn = b.node();
  auto out = detail::make_result(a.shape(), std::move(v), {a, b}, [an, bn](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->values[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->values[i];
    }
  });
  detail::assert_finite(out, "mul");
  return out;
}

// Scale every row of a [N x C] matrix elementwise by a [1 x C] row vector.
inline Tensor mul_rowvec(const Tensor& a, const Tensor& b) {
  check(a.shape().size() == 2 && b.numel() == a.cols(),
        "mul_rowvec: shape mismatch " + shape_str(a.shape()) + " vs " +
            shape_str(b.shape()));
  int N = a.rows(), C = a.cols();
  std::vector<double> v(a.values().size());
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < C; ++j) v[i * C + j] = a.values()[i * C + j] * b.values()[j];
  auto an = a.node();
  auto bn = b.node();
  auto out = detail::make_result(a.shape(), std::move(v), {a, b}, [an, bn, N, C](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < C; ++j)
          an->grad[static_cast<size_t>(i) * C + j] +=
              self.grad[static_cast<size_t>(i) * C + j] * bn->values[j];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < C; ++j)
          bn->grad[j] += self.grad[static_cast<size_t>(i) * C + j] *
                         an->values[static_cast<size_t>(i) * C + j];
    }
  });
  detail::assert_finite(out, "mul_rowvec");
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> v(a.values().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * c;
  auto an = a.node();
  auto out = detail::make_result(a.shape(), std::move(v), {a}, [an, c](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
    }
  });
  detail::assert_finite(out, "scale");
  return out;
}

inline Tensor add_const(const Tensor& a, double c) {
  std::vector<double> v(a.values().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + c;
  auto an = a.node();
  auto out = detail::make_result(a.shape(), std::move(v), {a}, [an](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
  });
  detail::assert_finite(out, "add_const");
  return out;
}

// Multiply a tensor by a trainable scalar (1-element tensor), broadcast.
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
  check(s.numel() == 1, "scale_by: scalar tensor expected, got " + shape_str(s.shape()));
  double sv = s.values()[0];
  std::vector<double> v(a.values().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * sv;
  auto an = a.node();
  auto sn = s.node();
  auto out = detail::make_result(a.shape(), std::move(v), {a, s}, [an, sn, sv](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * sv;
    }
    if (sn->requires_grad) {
      sn->ensure_grad();
      double acc = 0.0;
      for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * an->values[i];
      sn->grad[0] += acc;
    }
  });
  detail::assert_finite(out, "scale_by");
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.shape().size() == 2 && b.shape().size() == 2 && a.cols() == b.rows(),
        "matmul: incompatible shapes " + shape_str(a.shape()) + " @ " +
            shape_str(b.shape()));
  int N = a.rows(), K = a.cols(), M = b.cols();
  std::vector<double> v(static_cast<size_t>(N) * M);
  {
    EigenConstMap am(a.values().data(), N, K), bm(b.values().data(), K, M);
    EigenMap om(v.data(), N, M);
    om.noalias() = am * bm;
  }
  auto an = a.node();
  auto bn = b.node();
  auto out = detail::make_result({N, M}, std::move(v), {a, b}, [an, bn, N, K, M](TensorNode& self) {
    EigenConstMap g(self.grad.data(), N, M);
    if (an->requires_grad) {
      an->ensure_grad();
      EigenConstMap bm(bn->values.data(), K, M);
      EigenMap ga(an->grad.data(), N, K);
      ga.noalias() += g * bm.transpose();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      EigenConstMap am(an->values.data(), N, K);
      EigenMap gb(bn->grad.data(), K, M);
      gb.noalias() += am.transpose() * g;
    }
  });
  detail::assert_finite(out, "matmul");
  return out;
}

inline Tensor transpose(const Tensor& a) {
  check(a.shape().size() == 2, "transpose: rank-2 tensor expected, got " + shape_str(a.shape()));
  int N = a.rows(), C = a.cols();
  std::vector<double> v(a.values().size());
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < C; ++j) v[static_cast<size_t>(j) * N + i] = a.values()[static_cast<size_t>(i) * C + j];
  auto an = a.node();
  auto out = detail::make_result({C, N}, std::move(v), {a}, [an, N, C](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < C; ++j)
          an->grad[static_cast<size_t>(i) * C + j] += self.grad[static_cast<size_t>(j) * N + i];
    }
  });
  return out;
}

inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  check(n == a.numel(), "reshape: cannot view " + shape_str(a.shape()) +
                            " as " + shape_str(shape));
  std::vector<double> v = a.values();
  auto an = a.node();
  auto out = detail::make_result(std::move(shape), std::move(v), {a}, [an](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
  });
  return out;
}

inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
  check(a.shape().size() == 2 && 0 <= r0 && r0 < r1 && r1 <= a.rows(),
        "slice_rows: invalid range on " + shape_str(a.shape()));
  int C = a.cols();
  std::vector<double> v(static_cast<size_t>(r1 - r0) * C);
  std::copy(a.values().begin() + static_cast<size_t>(r0) * C,
            a.values().begin() + static_cast<size_t>(r1) * C, v.begin());
  auto an = a.node();
  auto out = detail::make_result({r1 - r0, C}, std::move(v), {a}, [an, r0, C](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        an->grad[static_cast<size_t>(r0) * C + i] += self.grad[i];
    }
  });
  return out;
}

inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
  check(a.shape().size() == 2 && 0 <= c0 && c0 < c1 && c1 <= a.cols(),
        "slice_cols: invalid range on " + shape_str(a.shape()));
  int N = a.rows(), C = a.cols(), W = c1 - c0;
  std::vector<double> v(static_cast<size_t>(N) * W);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < W; ++j) v[static_cast<size_t>(i) * W + j] = a.values()[static_cast<size_t>(i) * C + c0 + j];
  auto an = a.node();
  auto out = detail::make_result({N, W}, std::move(v), {a}, [an, N, C, c0, W](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < W; ++j)
          an->grad[static_cast<size_t>(i) * C + c0 + j] += self.grad[static_cast<size_t>(i) * W + j];
    }
  });
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_rows: empty input list");
  int C = parts[0].cols();
  int N = 0;
  for (const auto& p : parts) {
    check(p.shape().size() == 2 && p.cols() == C,
          "concat_rows: column mismatch " + shape_str(p.shape()));
    N += p.rows();
  }
  std::vector<double> v;
  v.reserve(static_cast<size_t>(N) * C);
  for (const auto& p : parts) v.insert(v.end(), p.values().begin(), p.values().end());
  std::vector<TensorNode*> nodes;
  std::vector<int> rows;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    rows.push_back(p.rows());
  }
  auto out = detail::make_result({N, C}, std::move(v), parts, [nodes, rows, C](TensorNode& self) {
    size_t off = 0;
    for (size_t k = 0; k < nodes.size(); ++k) {
      size_t len = static_cast<size_t>(rows[k]) * C;
      if (nodes[k]->requires_grad) {
        nodes[k]->ensure_grad();
        for (size_t i = 0; i < len; ++i) nodes[k]->grad[i] += self.grad[off + i];
      }
      off += len;
    }
  });
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_cols: empty input list");
  int N = parts[0].rows();
  int C = 0;
  for (const auto& p : parts) {
    check(p.shape().size() == 2 && p.rows() == N,
          "concat_cols: row mismatch " + shape_str(p.shape()));
    C += p.cols();
  }
  std::vector<double> v(static_cast<size_t>(N) * C);
  int c_off = 0;
  for (const auto& p : parts) {
    int W = p.cols();
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < W; ++j)
        v[static_cast<size_t>(i) * C + c_off + j] = p.values()[static_cast<size_t>(i) * W + j];
    c_off += W;
  }
  std::vector<TensorNode*> nodes;
  std::vector<int> widths;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.cols());
  }
  auto out = detail::make_result({N, C}, std::move(v), parts, [nodes, widths, N, C](TensorNode& self) {
    int c_off2 = 0;
    for (size_t k = 0; k < nodes.size(); ++k) {
      int W = widths[k];
      if (nodes[k]->requires_grad) {
        nodes[k]->ensure_grad();
        for (int i = 0; i < N; ++i)
          for (int j = 0; j < W; ++j)
            nodes[k]->grad[static_cast<size_t>(i) * W + j] +=
                self.grad[static_cast<size_t>(i) * C + c_off2 + j];
      }
      c_off2 += W;
    }
  });
  return out;
}

// Rows of `table` gathered by id; backward scatters into the table gradient.
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  check(table.shape().size() == 2, "embedding: table must be rank-2, got " + shape_str(table.shape()));
  int V = table.rows(), C = table.cols();
  int N = static_cast<int>(ids.size());
  std::vector<double> v(static_cast<size_t>(N) * C);
  for (int i = 0; i < N; ++i) {
    check(0 <= ids[i] && ids[i] < V,
          "embedding: id " + std::to_string(ids[i]) + " out of range [0," + std::to_string(V) + ")");
    std::copy(table.values().begin() + static_cast<size_t>(ids[i]) * C,
              table.values().begin() + static_cast<size_t>(ids[i] + 1) * C,
              v.begin() + static_cast<size_t>(i) * C);
  }
  auto tn = table.node();
  auto out = detail::make_result({N, C}, std::move(v), {table}, [tn, ids, C](TensorNode& self) {
    if (tn->requires_grad) {
      tn->ensure_grad();
      for (size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < C; ++j)
          tn->grad[static_cast<size_t>(ids[i]) * C + j] += self.grad[i * C + j];
    }
  });
  return out;
}

// Row-wise max-subtracted softmax.
inline Tensor softmax_rows(const Tensor& a) {
  check(a.shape().size() == 2, "softmax_rows: rank-2 tensor expected, got " + shape_str(a.shape()));
  int N = a.rows(), C = a.cols();
  std::vector<double> v(a.values().size());
  for (int i = 0; i < N; ++i) {
    const double* x = a.values().data() + static_cast<size_t>(i) * C;
    double* y = v.data() + static_cast<size_t>(i) * C;
    double m = x[0];
    for (int j = 1; j < C; ++j) m = std::max(m, x[j]);
    double s = 0.0;
    for (int j = 0; j < C; ++j) {
      y[j] = std::exp(x[j] - m);
      s += y[j];
    }
    for (int j = 0; j < C; ++j) y[j] /= s;
  }
  auto an = a.node();
  auto out = detail::make_result(a.shape(), std::move(v), {a}, [an, N, C](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int i = 0; i < N; ++i) {
      const double* y = self.values.data() + static_cast<size_t>(i) * C;
      const double* g = self.grad.data() + static_cast<size_t>(i) * C;
      double dot = 0.0;
      for (int j = 0; j < C; ++j) dot += g[j] * y[j];
      double* ga = an->grad.data() + static_cast<size_t>(i) * C;
      for (int j = 0; j < C; ++j) ga[j] += y[j] * (g[j] - dot);
    }
  });
  detail::assert_finite(out, "softmax_rows");
  return out;
}

// Row-wise layer normalization without affine parameters.
inline Tensor layer_norm(const Tensor& a, double eps = 1e-5) {
  check(a.shape().size() == 2, "layer_norm: rank-2 tensor expected, got " + shape_str(a.shape()));
  int N = a.rows(), C = a.cols();
  std::vector<double> v(a.values().size());
  std::vector<double> inv_std(N);
  for (int i = 0; i < N; ++i) {
    const double* x = a.values().data() + static_cast<size_t>(i) * C;
    double mu = 0.0;
    for (int j = 0; j < C; ++j) mu += x[j];
    mu /= C;
    double var = 0.0;
    for (int j = 0; j < C; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= C;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    double* y = v.data() + static_cast<size_t>(i) * C;
    for (int j = 0; j < C; ++j) y[j] = (x[j] - mu) * is;
  }
  auto an = a.node();
  auto out = detail::make_result(a.shape(), std::move(v), {a},
                                 [an, N, C, inv_std](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int i = 0; i < N; ++i) {
      const double* y = self.values.data() + static_cast<size_t>(i) * C;
      const double* g = self.grad.data() + static_cast<size_t>(i) * C;
      double gmean = 0.0, gymean = 0.0;
      for (int j = 0; j < C; ++j) {
        gmean += g[j];
        gymean += g[j] * y[j];
      }
      gmean /= C;
      gymean /= C;
      double* ga = an->grad.data() + static_cast<size_t>(i) * C;
      for (int j = 0; j < C; ++j) ga[j] += inv_std[i] * (g[j] - gmean - y[j] * gymean);
    }
  });
  detail::assert_finite(out, "layer_norm");
  return out;
}

// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& a) {
  std::vector<double> v(a.values().size());
  for (size_t i = 0; i < v.size(); ++i) {
    double x = a.values()[i];
    v[i] = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
  }
  auto an = a.node();
  auto out = detail::make_result(a.shape(), std::move(v), {a}, [an](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double x = an->values[i];
      double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      an->grad[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
  detail::assert_finite(out, "gelu");
  return out;
}

namespace detail {
inline void log_softmax_row(const double* x, int C, double* out) {
  double m = x[0];
  for (int j = 1; j < C; ++j) m = std::max(m, x[j]);
  double s = 0.0;
  for (int j = 0; j < C; ++j) s += std::exp(x[j] - m);
  double lse = m + std::log(s);
  for (int j = 0; j < C; ++j) out[j] = x[j] - lse;
}
}  // namespace detail

// Per-row log-probability of the target id: out[i] = log softmax(logits_i)[ids[i]].
inline Tensor row_log_prob(const Tensor& logits, const std::vector<int>& ids) {
  check(logits.shape().size() == 2, "row_log_prob: rank-2 logits expected");
  int N = logits.rows(), C = logits.cols();
  check(static_cast<int>(ids.size()) == N,
        "row_log_prob: ids length " + std::to_string(ids.size()) + " != rows " + std::to_string(N));
  std::vector<double> v(static_cast<size_t>(N));
  std::vector<double> lsm(static_cast<size_t>(N) * C);
  for (int i = 0; i < N; ++i) {
    check(0 <= ids[i] && ids[i] < C, "row_log_prob: id out of range");
    detail::log_softmax_row(logits.values().data() + static_cast<size_t>(i) * C, C,
                            lsm.data() + static_cast<size_t>(i) * C);
    v[static_cast<size_t>(i)] = lsm[static_cast<size_t>(i) * C + ids[i]];
  }
  auto ln = logits.node();
  auto out = detail::make_result({N, 1}, std::move(v), {logits},
                                 [ln, ids, N, C, lsm = std::move(lsm)](TensorNode& self) {
    if (!ln->requires_grad) return;
    ln->ensure_grad();
    for (int i = 0; i < N; ++i) {
      double g = self.grad[static_cast<size_t>(i)];
      if (g == 0.0) continue;
      double* gl = ln->grad.data() + static_cast<size_t>(i) * C;
      const double* ls = lsm.data() + static_cast<size_t>(i) * C;
      for (int j = 0; j < C; ++j) gl[j] -= g * std::exp(ls[j]);
      gl[ids[i]] += g;
    }
  });
  detail::assert_finite(out, "row_log_prob");
  return out;
}

// Cross-entropy summed over rows where mask is true. Pair with the masked
// count to form means across batches.
inline Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int>& ids,
                                const std::vector<bool>& mask) {
  check(logits.shape().size() == 2, "cross_entropy: rank-2 logits expected");
  int N = logits.rows(), C = logits.cols();
  check(static_cast<int>(ids.size()) == N && static_cast<int>(mask.size()) == N,
        "cross_entropy: ids/mask length mismatch with logits rows");
  double total = 0.0;
  std::vector<double> lsm(static_cast<size_t>(N) * C);
  for (int i = 0; i < N; ++i) {
    if (!mask[i]) continue;
    check(0 <= ids[i] && ids[i] < C, "cross_entropy: target id out of range");
    detail::log_softmax_row(logits.values().data() + static_cast<size_t>(i) * C, C,
                            lsm.data() + static_cast<size_t>(i) * C);
    total -= lsm[static_cast<size_t>(i) * C + ids[i]];
  }
  auto ln = logits.node();
  auto out = detail::make_result({1}, {total}, {logits},
                                 [ln, ids, mask, N, C, lsm = std::move(lsm)](TensorNode& self) {
    if (!ln->requires_grad) return;
    ln->ensure_grad();
    double g = self.grad[0];
    for (int i = 0; i < N; ++i) {
      if (!mask[i]) continue;
      double* gl = ln->grad.data() + static_cast<size_t>(i) * C;
      const double* ls = lsm.data() + static_cast<size_t>(i) * C;
      for (int j = 0; j < C; ++j) gl[j] += g * std::exp(ls[j]);
      gl[ids[i]] -= g;
    }
  });
  detail::assert_finite(out, "cross_entropy_sum");
  return out;
}

// Mean cross-entropy over masked positions; fails when nothing is masked in.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& ids,
                            const std::vector<bool>& mask) {
  int m = 0;
  for (bool b : mask) m += b ? 1 : 0;
  check(m > 0, "cross_entropy: no unmasked positions in batch");
  return scale(cross_entropy_sum(logits, ids, mask), 1.0 / m);
}

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  auto an = a.node();
  auto out = detail::make_result({1}, {s}, {a}, [an](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    double g = self.grad[0];
    for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
  });
  return out;
}

inline Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

inline Tensor sqrt_eltwise(const Tensor& a) {
  std::vector<double> v(a.values().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::sqrt(a.values()[i]);
  auto an = a.node();
  auto out = detail::make_result(a.shape(), std::move(v), {a}, [an](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i] * 0.5 / std::max(std::sqrt(an->values[i]), 1e-300);
  });
  return out;
}

inline Tensor exp_eltwise(const Tensor& a) {
  std::vector<double> v(a.values().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a.values()[i]);
  auto an = a.node();
  auto out = detail::make_result(a.shape(), std::move(v), {a}, [an](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * self.values[i];
  });
  detail::assert_finite(out, "exp_eltwise");
  return out;
}

// Gradient passes through where lo <= x <= hi.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  std::vector<double> v(a.values().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::min(std::max(a.values()[i], lo), hi);
  auto an = a.node();
  auto out = detail::make_result(a.shape(), std::move(v), {a}, [an, lo, hi](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double x = an->values[i];
      if (x >= lo && x <= hi) an->grad[i] += self.grad[i];
    }
  });
  return out;
}

// Elementwise minimum; on ties the gradient routes to the first argument.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "minimum: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  std::vector<double> v(a.values().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::min(a.values()[i], b.values()[i]);
  auto an = a.node();
  auto bn = b.node();
  auto out = detail::make_result(a.shape(), std::move(v), {a, b}, [an, bn](TensorNode& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      bool take_a = an->values[i] <= bn->values[i];
      if (take_a && an->requires_grad) {
        an->ensure_grad();
        an->grad[i] += self.grad[i];
      } else if (!take_a && bn->requires_grad) {
        bn->ensure_grad();
        bn->grad[i] += self.grad[i];
      }
    }
  });
  return out;
}

// Row-wise L2 normalization: y_i = x_i / sqrt(|x_i|^2 + eps).
inline Tensor normalize_rows(const Tensor& a, double eps = 1e-12) {
  check(a.shape().size() == 2, "normalize_rows: rank-2 tensor expected");
  int N = a.rows(), C = a.cols();
  std::vector<double> v(a.values().size());
  std::vector<double> inv_norm(N);
  for (int i = 0; i < N; ++i) {
    const double* x = a.values().data() + static_cast<size_t>(i) * C;
    double ss = eps;
    for (int j = 0; j < C; ++j) ss += x[j] * x[j];
    double in = 1.0 / std::sqrt(ss);
    inv_norm[i] = in;
    for (int j = 0; j < C; ++j) v[static_cast<size_t>(i) * C + j] = x[j] * in;
  }
  auto an = a.node();
  auto out = detail::make_result(a.shape(), std::move(v), {a},
                                 [an, N, C, inv_norm](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int i = 0; i < N; ++i) {
      const double* y = self.values.data() + static_cast<size_t>(i) * C;
      const double* g = self.grad.data() + static_cast<size_t>(i) * C;
      double dot = 0.0;
      for (int j = 0; j < C; ++j) dot += g[j] * y[j];
      double* ga = an->grad.data() + static_cast<size_t>(i) * C;
      for (int j = 0; j < C; ++j) ga[j] += inv_norm[i] * (g[j] - y[j] * dot);
    }
  });
  detail::assert_finite(out, "normalize_rows");
  return out;
}

// Stop-gradient: same values, no graph edge.
inline Tensor detach(const Tensor& a) {
  return Tensor::from_values(a.shape(), a.values(), false);
}

// Frobenius norm as a graph scalar.
inline Tensor frobenius_norm(const Tensor& a) {
  return sqrt_eltwise(sum_all(mul(a, a)));
}

// ---------------------------------------------------------------- backward

inline void backward(const Tensor& loss) {
  check(loss.is_scalar(), "backward: loss must be scalar, got " + shape_str(loss.shape()));
  check(loss.requires_grad(), "backward: loss does not require grad (graph not recorded?)");
  // topological order over the recorded graph
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// ---------------------------------------------------- gradient verification

// Central-difference check of d f / d leaves against the recorded backward
// pass: returns max over coordinates of |analytic - fd| / max(1e-8, |fd|).
inline double grad_check(const std::function<Tensor()>& f,
                         const std::vector<Tensor>& leaves, double h = 1e-5) {
  for (const auto& p : leaves) p.zero_grad();
  Tensor loss = f();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& p : leaves) analytic.push_back(p.grad());

  double max_rel = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& vals = leaves[li].values();
    for (size_t ci = 0; ci < vals.size(); ++ci) {
      double keep = vals[ci];
      double fp, fm;
      {
        NoGradGuard ng;
        vals[ci] = keep + h;
        fp = f().item();
        vals[ci] = keep - h;
        fm = f().item();
      }
      vals[ci] = keep;
      check(std::isfinite(fp) && std::isfinite(fm),
            "grad_check: non-finite evaluation at leaf " + std::to_string(li) +
                " coordinate " + std::to_string(ci));
      double fd = (fp - fm) / (2.0 * h);
      double rel = std::fabs(analytic[li][ci] - fd) / std::max(1e-8, std::fabs(fd));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace molang
