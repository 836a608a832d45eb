#include "diffcap/schedule.hpp"

#include <cmath>
#include <sstream>

namespace diffcap {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw UsageError("schedule: " + what);
}

}  // namespace

NoiseSchedule NoiseSchedule::build(int total_steps, int text_vocab, double uniform_frac) {
  require(total_steps >= 1, "total steps must be >= 1, got " + std::to_string(total_steps));
  require(text_vocab >= 2, "text vocab must be >= 2, got " + std::to_string(text_vocab));
  require(uniform_frac >= 0.0 && uniform_frac < 1.0,
          "uniform fraction must be in [0,1), got " + std::to_string(uniform_frac));

  NoiseSchedule s;
  s.t_total_ = total_steps;
  s.v_ = text_vocab;
  s.c_u_ = uniform_frac;
  s.keep_bar_.resize((std::size_t)total_steps + 1);
  s.mask_bar_.resize((std::size_t)total_steps + 1);
  for (int t = 0; t <= total_steps; ++t) {
    double frac = (double)t / (double)total_steps;
    double mask = frac;
    double keep = (1.0 - frac) * (1.0 - uniform_frac * frac);
    double replace_total = 1.0 - keep - mask;
    std::string at = " at t=" + std::to_string(t) + " (keep=" + std::to_string(keep) +
                     ", mask=" + std::to_string(mask) + ")";
    require(keep >= 0.0 && keep <= 1.0, "cumulative keep outside [0,1]" + at);
    require(replace_total >= -1e-12, "cumulative replace mass negative" + at);
    if (t > 0) {
      require(mask > s.mask_bar_[(std::size_t)t - 1], "cumulative mask not increasing" + at);
      require(keep < s.keep_bar_[(std::size_t)t - 1], "cumulative keep not decreasing" + at);
    }
    s.keep_bar_[(std::size_t)t] = keep;
    s.mask_bar_[(std::size_t)t] = mask;
  }
  require(s.keep_bar_[0] == 1.0 && s.mask_bar_[0] == 0.0, "chain must start clean");
  require(s.keep_bar_.back() == 0.0 && s.mask_bar_.back() == 1.0,
          "chain must end fully absorbed");

  s.keep_step_.resize((std::size_t)total_steps);
  s.mask_step_.resize((std::size_t)total_steps);
  for (int t = 1; t <= total_steps; ++t) {
    double prev_keep = s.keep_bar_[(std::size_t)t - 1];
    double prev_mask = s.mask_bar_[(std::size_t)t - 1];
    double keep = prev_keep > 0.0 ? s.keep_bar_[(std::size_t)t] / prev_keep : 0.0;
    double mask = prev_mask < 1.0
                      ? (s.mask_bar_[(std::size_t)t] - prev_mask) / (1.0 - prev_mask)
                      : 1.0;
    std::string at = " at t=" + std::to_string(t) + " (keep=" + std::to_string(keep) +
                     ", mask=" + std::to_string(mask) + ")";
    require(keep >= 0.0 && keep <= 1.0, "step keep outside [0,1]" + at);
    require(mask >= 0.0 && mask <= 1.0, "step mask outside [0,1]" + at);
    require(keep + mask <= 1.0 + 1e-12, "step keep + mask exceeds 1" + at);
    s.keep_step_[(std::size_t)t - 1] = keep;
    s.mask_step_[(std::size_t)t - 1] = mask;
  }
  return s;
}

int NoiseSchedule::check_cum(int t) const {
  if (t < 0 || t > t_total_)
    throw UsageError("schedule: t=" + std::to_string(t) + " outside [0, " +
                     std::to_string(t_total_) + "]");
  return t;
}

int NoiseSchedule::check_step(int t) const {
  if (t < 1 || t > t_total_)
    throw UsageError("schedule: step t=" + std::to_string(t) + " outside [1, " +
                     std::to_string(t_total_) + "]");
  return t - 1;
}

double NoiseSchedule::replace_bar(int t) const {
  check_cum(t);
  return (1.0 - keep_bar(t) - mask_bar(t)) / (double)v_;
}

double NoiseSchedule::replace_step(int t) const {
  check_step(t);
  return (1.0 - keep_step(t) - mask_step(t)) / (double)v_;
}

std::vector<double> NoiseSchedule::marginal(int x0, int t) const {
  check_cum(t);
  if (x0 < 0 || x0 >= v_)
    throw UsageError("schedule: marginal needs a text token, got state " +
                     std::to_string(x0) + " of " + std::to_string(v_));
  std::vector<double> p((std::size_t)v_ + 1, replace_bar(t));
  p[(std::size_t)x0] += keep_bar(t);
  p[(std::size_t)v_] = mask_bar(t);
  return p;
}

int NoiseSchedule::sample_marginal(int x0, int t, Rng& rng) const {
  check_cum(t);
  if (x0 < 0 || x0 >= v_)
    throw UsageError("schedule: sample needs a text token, got state " + std::to_string(x0));
  double u = rng.uniform();
  if (u < keep_bar(t)) return x0;
  if (u < keep_bar(t) + mask_bar(t)) return v_;
  return rng.uniform_int(v_);
}

std::vector<std::vector<double>> NoiseSchedule::step_matrix(int t) const {
  check_step(t);
  int n = v_ + 1;
  double keep = keep_step(t);
  double mask = mask_step(t);
  double repl = replace_step(t);
  std::vector<std::vector<double>> m((std::size_t)n, std::vector<double>((std::size_t)n, 0.0));
  for (int src = 0; src < v_; ++src) {
    for (int dst = 0; dst < v_; ++dst) m[(std::size_t)src][(std::size_t)dst] = repl;
    m[(std::size_t)src][(std::size_t)src] += keep;
    m[(std::size_t)src][(std::size_t)v_] = mask;
  }
  m[(std::size_t)v_][(std::size_t)v_] = 1.0;  // absorbing
  return m;
}

double NoiseSchedule::compose_check() const {
  if (v_ > 10) throw UsageError("schedule: compose_check limited to small vocabularies");
  int n = v_ + 1;
  // prod starts as the identity and accumulates step matrices 1..t.
  std::vector<std::vector<double>> prod((std::size_t)n,
                                        std::vector<double>((std::size_t)n, 0.0));
  for (int i = 0; i < n; ++i) prod[(std::size_t)i][(std::size_t)i] = 1.0;
  double worst = 0.0;
  for (int t = 1; t <= t_total_; ++t) {
    auto step = step_matrix(t);
    std::vector<std::vector<double>> next((std::size_t)n,
                                          std::vector<double>((std::size_t)n, 0.0));
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < n; ++k) {
        double a = prod[(std::size_t)i][(std::size_t)k];
        if (a == 0.0) continue;
        for (int j = 0; j < n; ++j) next[(std::size_t)i][(std::size_t)j] += a * step[(std::size_t)k][(std::size_t)j];
      }
    prod = std::move(next);
    for (int src = 0; src < v_; ++src) {
      auto want = marginal(src, t);
      for (int dst = 0; dst < n; ++dst) {
        double dev = std::fabs(prod[(std::size_t)src][(std::size_t)dst] - want[(std::size_t)dst]);
        if (dev > worst) worst = dev;
      }
    }
    // Absorbing row must stay exactly one-hot.
    for (int dst = 0; dst < n; ++dst) {
      double want = dst == v_ ? 1.0 : 0.0;
      double dev = std::fabs(prod[(std::size_t)v_][(std::size_t)dst] - want);
      if (dev > worst) worst = dev;
    }
  }
  return worst;
}

std::string NoiseSchedule::to_tsv() const {
  std::ostringstream out;
  out.precision(12);
  out << "t\tkeep_bar\tmask_bar\treplace_bar\tkeep_step\tmask_step\n";
  for (int t = 0; t <= t_total_; ++t) {
    out << t << '\t' << keep_bar(t) << '\t' << mask_bar(t) << '\t' << replace_bar(t) << '\t';
    if (t >= 1)
      out << keep_step(t) << '\t' << mask_step(t) << '\n';
    else
      out << "-\t-\n";
  }
  return out.str();
}

TokenSeq corrupt(const TokenSeq& x0, int t, const NoiseSchedule& schedule,
                 const Vocabulary& vocab, Rng& rng) {
  if (t < 1 || t > schedule.total_steps())
    throw UsageError("corrupt: t=" + std::to_string(t) + " outside [1, " +
                     std::to_string(schedule.total_steps()) + "]");
  if (vocab.text_size() != schedule.text_vocab())
    throw UsageError("corrupt: vocabulary has " + std::to_string(vocab.text_size()) +
                     " text tokens, schedule expects " +
                     std::to_string(schedule.text_vocab()));
  TokenSeq xt = x0;
  for (int i = 0; i < (int)xt.ids.size(); ++i) {
    int id = xt.ids[(std::size_t)i];
    if (id == vocab.pad_id()) continue;
    if (!vocab.is_text(id))
      throw UsageError("corrupt: non-text token id " + std::to_string(id) + " at position " +
                       std::to_string(i));
    xt.ids[(std::size_t)i] = schedule.sample_marginal(id, t, rng);
  }
  return xt;
}

}  // namespace diffcap
