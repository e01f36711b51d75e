#pragma once

// Adam, cosine learning-rate schedule, and global-norm gradient clipping.

#include <cmath>
#include <string>
#include <vector>

#include "molang/tensor.hpp"

namespace molang {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step_count = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  void init(const std::vector<Tensor>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.values().size(), 0.0);
      v.emplace_back(p.values().size(), 0.0);
    }
    step_count = 0;
  }
};

inline void adam_step(std::vector<Tensor>& params, AdamState& st, double lr) {
  check(st.m.size() == params.size() && st.v.size() == params.size(),
        "adam_step: state not initialized for this parameter list");
  st.step_count += 1;
  double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step_count));
  double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step_count));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& vals = params[pi].values();
    auto& g = params[pi].grad();
    check(g.size() == vals.size(), "adam_step: grad/value size mismatch on param " + std::to_string(pi));
    auto& m = st.m[pi];
    auto& v = st.v[pi];
    for (size_t i = 0; i < vals.size(); ++i) {
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
      double mh = m[i] / bc1;
      double vh = v[i] / bc2;
      vals[i] -= lr * mh / (std::sqrt(vh) + st.eps);
    }
  }
}

inline double cosine_lr(int64_t step, int64_t total, double lr_max, double lr_min) {
  check(total >= 1, "cosine_lr: total steps must be >= 1");
  check(step >= 0 && step <= total,
        "cosine_lr: step " + std::to_string(step) + " outside [0," + std::to_string(total) + "]");
  double t = static_cast<double>(step) / static_cast<double>(total);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(M_PI * t));
}

// Rescales gradients in place so the global L2 norm is at most max_norm.
// Returns the pre-clip global norm.
inline double clip_global_norm(std::vector<Tensor>& params, double max_norm) {
  check(max_norm > 0.0, "clip_global_norm: max_norm must be positive");
  double ss = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad()) ss += g * g;
  }
  double norm = std::sqrt(ss);
  if (norm > max_norm) {
    double s = max_norm / norm;
    for (auto& p : params) {
      for (double& g : p.grad()) g *= s;
    }
  }
  return norm;
}

inline double global_grad_norm(const std::vector<Tensor>& params) {
  double ss = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad()) ss += g * g;
  }
  return std::sqrt(ss);
}

inline void zero_grads(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace molang
