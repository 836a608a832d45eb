#pragma once

#include <string>
#include <vector>

#include "diffcap/error.hpp"
#include "diffcap/rng.hpp"
#include "diffcap/vocab.hpp"

namespace diffcap {

/// Forward corruption chain over text-token states plus an absorbing mask
/// state. States 0..text_vocab-1 are text tokens; state text_vocab is the
/// mask. At each step a surviving token keeps its value, absorbs into the
/// mask, or is redrawn uniformly over all text tokens; the mask never
/// leaves. Probabilities are double regardless of model precision.
class NoiseSchedule {
 public:
  static NoiseSchedule build(int total_steps, int text_vocab, double uniform_frac);

  int total_steps() const { return t_total_; }
  int text_vocab() const { return v_; }
  int mask_state() const { return v_; }
  double uniform_frac() const { return c_u_; }

  // Cumulative chain parameters, t in [0, total_steps].
  double keep_bar(int t) const { return keep_bar_[(std::size_t)check_cum(t)]; }
  double mask_bar(int t) const { return mask_bar_[(std::size_t)check_cum(t)]; }
  double replace_bar(int t) const;  // per text token, original included

  // Single-step parameters, t in [1, total_steps].
  double keep_step(int t) const { return keep_step_[(std::size_t)check_step(t)]; }
  double mask_step(int t) const { return mask_step_[(std::size_t)check_step(t)]; }
  double replace_step(int t) const;

  /// q(x_t | x_0): distribution over text_vocab + 1 states for a clean
  /// text token x0.
  std::vector<double> marginal(int x0, int t) const;

  /// One draw from marginal(x0, t); branch order is keep, mask, uniform.
  int sample_marginal(int x0, int t, Rng& rng) const;

  /// One-step transition matrix at t over all states, row = source.
  std::vector<std::vector<double>> step_matrix(int t) const;

  /// Max |product of step matrices 1..t - cumulative marginal| over every
  /// t, source and target. Exact small-matrix arithmetic, verification only.
  double compose_check() const;

  /// Tab-separated dump: t, cumulative keep/mask/replace, step keep/mask.
  std::string to_tsv() const;

 private:
  int check_cum(int t) const;
  int check_step(int t) const;

  int t_total_ = 0;
  int v_ = 0;
  double c_u_ = 0.0;
  std::vector<double> keep_bar_, mask_bar_;    // index t in [0, T]
  std::vector<double> keep_step_, mask_step_;  // index t-1, t in [1, T]
};

/// Applies marginal corruption at level t to every non-PAD position.
TokenSeq corrupt(const TokenSeq& x0, int t, const NoiseSchedule& schedule,
                 const Vocabulary& vocab, Rng& rng);

}  // namespace diffcap
