#pragma once
// Adaptive-moment optimizer with decoupled weight decay, plus the parameter
// identity audits used to prove frozen models never receive updates.

#include <cmath>
#include <unordered_set>
#include <vector>

#include "tensor.hpp"

namespace fuselab {

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Every registered parameter must be a trainable leaf, registered once.
// Parameters that received no gradient since the last step are skipped
// entirely (no moment update, no decay).
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, OptimConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    std::unordered_set<const TensorNode<T>*> seen;
    for (const auto& p : params_) {
      if (!p.defined() || !p.requires_grad() || !p.is_leaf()) {
        throw contract_error("optimizer requires trainable leaf parameters");
      }
      if (!seen.insert(p.node()).second) {
        throw contract_error("parameter registered twice with the optimizer");
      }
    }
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].numel(), 0.0);
      v_[i].assign(params_[i].numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      const auto& g = p.grad();
      auto& x = p.values();
      for (std::size_t j = 0; j < x.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * gj;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * gj * gj;
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        const double xj = static_cast<double>(x[j]);
        x[j] = static_cast<T>(xj - cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                              cfg_.weight_decay * xj));
      }
    }
  }

  void zero_grad() {
    for (const auto& p : params_) p.node()->grad.clear();
  }

  const std::vector<Tensor<T>>& params() const { return params_; }
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  OptimConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

// Identity (not value) comparison of parameter sets: two lists cover the same
// tensors iff the underlying node pointers match as sets.
template <typename T>
std::unordered_set<const TensorNode<T>*> param_identity_set(const std::vector<Tensor<T>>& ps) {
  std::unordered_set<const TensorNode<T>*> s;
  for (const auto& p : ps) s.insert(p.node());
  return s;
}

template <typename T>
bool same_param_set(const std::vector<Tensor<T>>& a, const std::vector<Tensor<T>>& b) {
  return param_identity_set(a) == param_identity_set(b);
}

template <typename T>
std::size_t param_overlap_count(const std::vector<Tensor<T>>& a, const std::vector<Tensor<T>>& b) {
  auto sa = param_identity_set(a);
  std::size_t n = 0;
  for (const auto& p : b) n += sa.count(p.node());
  return n;
}

}  // namespace fuselab
