#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "diffcap/tensor.hpp"

namespace diffcap {

struct FdEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct FdReport {
  double max_rel_err = 0.0;
  std::vector<FdEntry> params;

  const FdEntry& worst() const {
    std::size_t w = 0;
    for (std::size_t i = 1; i < params.size(); ++i)
      if (params[i].max_rel_err > params[w].max_rel_err) w = i;
    return params[w];
  }
};

/// Finite-difference audit of analytic gradients. eval() must be a pure
/// deterministic function of the current parameter values. Relative error
/// uses max(|fd|, |analytic|, denom_floor) as denominator so near-zero
/// pairs do not explode. five_point trades two extra evaluations per entry
/// for an O(h^4) truncation term, which lets low-precision scalars use a
/// step large enough to clear their round-off noise.
template <typename S, typename EvalFn>
FdReport fd_check(const std::vector<std::pair<std::string, Tensor<S>*>>& params,
                  const std::vector<Tensor<S>>& analytic, EvalFn&& eval, double h,
                  double denom_floor, bool five_point = false) {
  if (params.size() != analytic.size())
    throw UsageError("fd_check: " + std::to_string(params.size()) + " params vs " +
                     std::to_string(analytic.size()) + " gradients");
  FdReport rep;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<S>& p = *params[i].second;
    const Tensor<S>& g = analytic[i];
    if (g.shape != p.shape)
      throw UsageError("fd_check: gradient shape " + shape_str(g.shape) + " vs param " +
                       shape_str(p.shape) + " for " + params[i].first);
    FdEntry entry{params[i].first, 0.0};
    for (std::int64_t j = 0; j < p.numel(); ++j) {
      S orig = p.data[j];
      double fd;
      if (five_point) {
        p.data[j] = (S)((double)orig + 2.0 * h);
        double f2p = eval();
        p.data[j] = (S)((double)orig + h);
        double f1p = eval();
        p.data[j] = (S)((double)orig - h);
        double f1m = eval();
        p.data[j] = (S)((double)orig - 2.0 * h);
        double f2m = eval();
        fd = (f2m - 8.0 * f1m + 8.0 * f1p - f2p) / (12.0 * h);
      } else {
        p.data[j] = (S)((double)orig + h);
        double fp = eval();
        p.data[j] = (S)((double)orig - h);
        double fm = eval();
        fd = (fp - fm) / (2.0 * h);
      }
      p.data[j] = orig;
      double an = (double)g.data[j];
      double denom = std::max({std::fabs(fd), std::fabs(an), denom_floor});
      double rel = std::fabs(fd - an) / denom;
      if (rel > entry.max_rel_err) entry.max_rel_err = rel;
    }
    if (entry.max_rel_err > rep.max_rel_err) rep.max_rel_err = entry.max_rel_err;
    rep.params.push_back(std::move(entry));
  }
  return rep;
}

}  // namespace diffcap
