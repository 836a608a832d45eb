#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "diffcap/tensor.hpp"

namespace diffcap {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Scales gradients in place so their joint L2 norm is at most max_norm.
/// Returns the pre-clip norm.
template <typename S>
double clip_global_norm(const std::vector<Tensor<S>*>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor<S>* g : grads)
    for (std::int64_t i = 0; i < g->numel(); ++i) sq += (double)g->data[i] * (double)g->data[i];
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    S sc = (S)(max_norm / norm);
    for (Tensor<S>* g : grads) g->data *= sc;
  }
  return norm;
}

/// Adam with decoupled weight decay and bias-corrected moments. Moment
/// buffers are allocated on the first step and keyed by parameter order,
/// which must stay fixed across steps.
template <typename S>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(const std::vector<std::pair<std::string, Tensor<S>*>>& params,
            const std::vector<const Tensor<S>*>& grads, double lr) {
    if (params.size() != grads.size())
      throw UsageError("adamw: " + std::to_string(params.size()) + " params vs " +
                       std::to_string(grads.size()) + " grads");
    if (m_.empty()) {
      for (auto& [name, p] : params) {
        m_.push_back(Tensor<S>::zeros(p->shape));
        v_.push_back(Tensor<S>::zeros(p->shape));
      }
    }
    if (m_.size() != params.size())
      throw UsageError("adamw: parameter list changed size mid-run");
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, (double)t_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, (double)t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<S>& p = *params[i].second;
      const Tensor<S>& g = *grads[i];
      if (g.shape != p.shape)
        throw UsageError("adamw: grad shape " + shape_str(g.shape) + " vs param " +
                         shape_str(p.shape) + " for " + params[i].first);
      Tensor<S>& m = m_[i];
      Tensor<S>& v = v_[i];
      for (std::int64_t j = 0; j < p.numel(); ++j) {
        double gd = (double)g.data[j];
        if (!std::isfinite(gd))
          throw std::runtime_error("adamw: non-finite gradient in " + params[i].first +
                                   " at step " + std::to_string(t_));
        double md = cfg_.beta1 * (double)m.data[j] + (1.0 - cfg_.beta1) * gd;
        double vd = cfg_.beta2 * (double)v.data[j] + (1.0 - cfg_.beta2) * gd * gd;
        m.data[j] = (S)md;
        v.data[j] = (S)vd;
        if (lr != 0.0) {
          double pd = (double)p.data[j];
          double upd = (md / bc1) / (std::sqrt(vd / bc2) + cfg_.eps) + cfg_.weight_decay * pd;
          p.data[j] = (S)(pd - lr * upd);
        }
      }
    }
  }

  std::int64_t step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

  // Checkpoint plumbing.
  std::vector<Tensor<S>>& moment1() { return m_; }
  std::vector<Tensor<S>>& moment2() { return v_; }
  void restore(std::vector<Tensor<S>> m, std::vector<Tensor<S>> v, std::int64_t t) {
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = t;
  }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor<S>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace diffcap
