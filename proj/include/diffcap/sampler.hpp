#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "diffcap/model.hpp"
#include "diffcap/schedule.hpp"

namespace diffcap {

enum class LengthSource { kPredicted, kOracle, kFixed };

enum class SelectionRule { kGreedy, kCategorical };

// How the AdaLN step value shrinks when the denoising loop runs fewer than
// total_steps iterations: renormalize the denominator to the loop length
// (default) or scale the step index by length / total_steps.
enum class StepRescale { kDenominator, kRatio };

struct SamplerConfig {
  double guidance_scale = 1.17;
  bool best_first = true;
  AttnMaskMode mask_mode = AttnMaskMode::kCam;
  LengthSource length_source = LengthSource::kPredicted;
  int fixed_length = 0;
  SelectionRule selection = SelectionRule::kGreedy;
  StepRescale step_rescale = StepRescale::kDenominator;
  std::uint64_t seed = 0;

  void validate() const {
    if (guidance_scale < 0.0) throw UsageError("sampler: guidance scale must be >= 0");
  }
};

struct StepTraceEntry {
  int example = 0;  // index into the caller's input order
  int step = 0;     // 1-based loop counter
  int t = 0;        // loop schedule level consumed at this step
  double p = 0.0;   // value fed to the timestep conditioning
  std::vector<int> fixed_positions;  // positions fixed at this step
  std::vector<int> tokens;           // state after the step
};

/// Keep counts per denoising step, first entry executed first. One token
/// per step when N_L <= T; otherwise T steps with
/// K^t = floor(N_L (T-t+1) / T) - floor(N_L (T-t) / T) for t = T..1.
inline std::vector<int> plan_keep_schedule(int n_l, int t_total) {
  if (n_l < 1 || t_total < 1)
    throw UsageError("keep schedule: N_L=" + std::to_string(n_l) + " T=" +
                     std::to_string(t_total));
  std::vector<int> plan;
  if (n_l <= t_total) {
    plan.assign((std::size_t)n_l, 1);
    return plan;
  }
  for (int t = t_total; t >= 1; --t) {
    long long hi = (long long)n_l * (t_total - t + 1) / t_total;
    long long lo = (long long)n_l * (t_total - t) / t_total;
    plan.push_back((int)(hi - lo));
  }
  return plan;
}

/// Log-softmax both logit rows, combine as lu + s (lc - lu), renormalize.
/// s = 1 returns the conditional log-probabilities themselves and s = 0 the
/// unconditional ones, bit for bit.
inline std::vector<double> guided_logprobs(const std::vector<double>& cond_logits,
                                           const std::vector<double>& uncond_logits, double s) {
  if (cond_logits.size() != uncond_logits.size())
    throw UsageError("guidance: " + std::to_string(cond_logits.size()) + " vs " +
                     std::to_string(uncond_logits.size()) + " logits");
  if (cond_logits.empty()) throw UsageError("guidance: empty logits");
  auto log_softmax = [](const std::vector<double>& x) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : x) sum += std::exp(v - mx);
    double lse = mx + std::log(sum);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
    return out;
  };
  if (s == 1.0) return log_softmax(cond_logits);
  if (s == 0.0) return log_softmax(uncond_logits);
  std::vector<double> lc = log_softmax(cond_logits);
  std::vector<double> lu = log_softmax(uncond_logits);
  std::vector<double> mix(lc.size());
  for (std::size_t i = 0; i < lc.size(); ++i) mix[i] = lu[i] + s * (lc[i] - lu[i]);
  return log_softmax(mix);
}

template <typename S>
class CaptionSampler {
 public:
  CaptionSampler(const DenoiserParams<S>& params, const Vocabulary& vocab,
                 const NoiseSchedule& schedule, SamplerConfig cfg)
      : params_(params), vocab_(vocab), schedule_(schedule), cfg_(cfg) {
    cfg_.validate();
    params_.config.validate();
    if (params_.config.vocab != vocab.size())
      throw UsageError("sampler: model vocabulary " + std::to_string(params_.config.vocab) +
                       " vs codec " + std::to_string(vocab.size()));
    if (schedule_.text_vocab() != vocab.text_size())
      throw UsageError("sampler: schedule over " + std::to_string(schedule_.text_vocab()) +
                       " states vs " + std::to_string(vocab.text_size()) + " text tokens");
    if (schedule_.total_steps() != params_.config.total_steps ||
        schedule_.uniform_frac() != params_.config.uniform_frac)
      throw UsageError("sampler: schedule does not match the model's corruption chain");
  }

  /// Argmax of the length head, one caption length per scene.
  std::vector<int> predict_lengths(const std::vector<const SceneFeatures*>& scenes) const {
    const DenoiserConfig& cfg = params_.config;
    std::vector<std::uint8_t> null_flags(scenes.size(), 0);
    Tape<S> tape;
    DenoiserVars v = lift(tape, params_);
    ConditionTokens ct =
        encode_condition(tape, v, cfg, pack_condition<S>(scenes, null_flags), null_flags);
    Var logit_var = predict_length_logits(tape, v, ct.summary);
    const Tensor<S>& lg = tape.val(logit_var);
    std::vector<int> out(scenes.size());
    for (std::size_t b = 0; b < scenes.size(); ++b) {
      int best = 0;
      for (int k = 1; k < cfg.l_max; ++k)
        if (lg(b, (std::size_t)k) > lg(b, (std::size_t)best)) best = k;
      out[b] = best + 1;
    }
    return out;
  }

  /// Conditional generation: an all-hole infill at the resolved length.
  std::vector<TokenSeq> sample(const std::vector<const SceneFeatures*>& scenes,
                               const std::vector<int>* oracle_lengths = nullptr,
                               std::vector<StepTraceEntry>* trace = nullptr) const {
    std::vector<int> lengths = resolve_lengths(scenes, oracle_lengths);
    std::vector<TokenSeq> templates(scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      templates[i].length = lengths[i];
      templates[i].ids.assign((std::size_t)lengths[i], vocab_.mask_id());
    }
    return infill(scenes, templates, trace);
  }

  /// Denoise the MASK holes of each template; every non-hole position is
  /// fixed from the start. Hole count drives the keep schedule.
  std::vector<TokenSeq> infill(const std::vector<const SceneFeatures*>& scenes,
                               const std::vector<TokenSeq>& templates,
                               std::vector<StepTraceEntry>* trace = nullptr) const {
    if (scenes.size() != templates.size())
      throw UsageError("infill: " + std::to_string(scenes.size()) + " scenes vs " +
                       std::to_string(templates.size()) + " templates");
    const DenoiserConfig& cfg = params_.config;
    std::vector<TokenSeq> out(templates.size());
    // Group indices by (length, hole count); members share the step plan.
    std::map<std::pair<int, int>, std::vector<int>> groups;
    for (std::size_t i = 0; i < templates.size(); ++i) {
      const TokenSeq& tpl = templates[i];
      if (tpl.length < 1 || tpl.length > cfg.l_max)
        throw UsageError("infill: template length " + std::to_string(tpl.length) +
                         " outside [1, " + std::to_string(cfg.l_max) + "]");
      if ((int)tpl.ids.size() < tpl.length)
        throw UsageError("infill: template ids shorter than declared length");
      int holes = 0;
      for (int j = 0; j < tpl.length; ++j) {
        int id = tpl.ids[(std::size_t)j];
        if (id == vocab_.mask_id())
          ++holes;
        else if (id < 0 || id >= vocab_.text_size())
          throw UsageError("infill: template token " + std::to_string(id) +
                           " at position " + std::to_string(j) + " is not a text token");
      }
      out[i].length = tpl.length;
      out[i].ids.assign(tpl.ids.begin(), tpl.ids.begin() + tpl.length);
      groups[{tpl.length, holes}].push_back((int)i);
    }
    for (const auto& [key, members] : groups) {
      if (key.second == 0) continue;  // zero holes: template echoed as-is
      run_group(key.first, key.second, members, scenes, out, trace);
    }
    if (trace)
      std::stable_sort(trace->begin(), trace->end(),
                       [](const StepTraceEntry& a, const StepTraceEntry& b) {
                         return a.example != b.example ? a.example < b.example : a.step < b.step;
                       });
    return out;
  }

  /// Greedy left-to-right decoding with the causal view of the network;
  /// stops at the PAD class or at capacity.
  std::vector<TokenSeq> decode_ar(const std::vector<const SceneFeatures*>& scenes) const {
    const DenoiserConfig& cfg = params_.config;
    int b = (int)scenes.size();
    std::vector<TokenSeq> out((std::size_t)b);
    if (b == 0) return out;
    std::vector<std::vector<int>> emitted((std::size_t)b);
    std::vector<std::uint8_t> done((std::size_t)b, 0);
    std::vector<std::uint8_t> null_flags((std::size_t)b, 0);
    Tensor<S> cond = pack_condition<S>(scenes, null_flags);
    for (int pos = 0; pos < cfg.l_max; ++pos) {
      int l = pos + 1;
      std::vector<int> input((std::size_t)(b * l), vocab_.pad_id());
      std::vector<std::uint8_t> pads((std::size_t)(b * l), 0);
      for (int e = 0; e < b; ++e) {
        input[(std::size_t)(e * l)] = vocab_.mask_id();  // start-of-sequence role
        for (int j = 0; j < (int)emitted[(std::size_t)e].size() && j + 1 < l; ++j)
          input[(std::size_t)(e * l + j + 1)] = emitted[(std::size_t)e][(std::size_t)j];
        for (int j = (int)emitted[(std::size_t)e].size() + 1; j < l; ++j)
          pads[(std::size_t)(e * l + j)] = 1;
      }
      Tape<S> tape;
      DenoiserVars v = lift(tape, params_);
      DenoiserOutput fwd = forward_ar(tape, v, cfg, b, input, pads, cond, null_flags);
      const Tensor<S>& lg = tape.val(fwd.logits);
      bool all_done = true;
      for (int e = 0; e < b; ++e) {
        if (done[(std::size_t)e]) continue;
        int row = e * l + pos;
        int best = -1;
        for (int k = 0; k < cfg.vocab; ++k) {
          if (k == vocab_.mask_id()) continue;
          if (best < 0 || lg(row, (std::size_t)k) > lg(row, (std::size_t)best)) best = k;
        }
        if (best == vocab_.pad_id())
          done[(std::size_t)e] = 1;
        else
          emitted[(std::size_t)e].push_back(best);
        if (!done[(std::size_t)e]) all_done = false;
      }
      if (all_done) break;
    }
    for (int e = 0; e < b; ++e) {
      out[(std::size_t)e].ids = emitted[(std::size_t)e];
      out[(std::size_t)e].length = (int)emitted[(std::size_t)e].size();
    }
    return out;
  }

  /// Left-to-right comparator for infilling: holes are filled in ascending
  /// position order, each conditioned on the full left context; non-hole
  /// tokens are forced.
  std::vector<TokenSeq> ar_infill(const std::vector<const SceneFeatures*>& scenes,
                                  const std::vector<TokenSeq>& templates) const {
    if (scenes.size() != templates.size())
      throw UsageError("infill: " + std::to_string(scenes.size()) + " scenes vs " +
                       std::to_string(templates.size()) + " templates");
    const DenoiserConfig& cfg = params_.config;
    std::vector<TokenSeq> out(templates.size());
    std::map<int, std::vector<int>> groups;  // length -> indices
    std::vector<std::vector<int>> holes(templates.size());
    for (std::size_t i = 0; i < templates.size(); ++i) {
      const TokenSeq& tpl = templates[i];
      if (tpl.length < 1 || tpl.length > cfg.l_max)
        throw UsageError("infill: template length " + std::to_string(tpl.length) +
                         " outside [1, " + std::to_string(cfg.l_max) + "]");
      out[i].length = tpl.length;
      out[i].ids.assign(tpl.ids.begin(), tpl.ids.begin() + tpl.length);
      for (int j = 0; j < tpl.length; ++j)
        if (out[i].ids[(std::size_t)j] == vocab_.mask_id()) holes[i].push_back(j);
      groups[tpl.length].push_back((int)i);
    }
    for (const auto& [n, members] : groups) {
      std::size_t rounds = 0;
      for (int m : members) rounds = std::max(rounds, holes[(std::size_t)m].size());
      int b = (int)members.size();
      std::vector<const SceneFeatures*> group_scenes;
      for (int m : members) group_scenes.push_back(scenes[(std::size_t)m]);
      std::vector<std::uint8_t> null_flags((std::size_t)b, 0);
      Tensor<S> cond = pack_condition<S>(group_scenes, null_flags);
      for (std::size_t round = 0; round < rounds; ++round) {
        std::vector<int> input((std::size_t)(b * n));
        std::vector<std::uint8_t> pads((std::size_t)(b * n), 0);
        for (int e = 0; e < b; ++e) {
          const TokenSeq& cur = out[(std::size_t)members[(std::size_t)e]];
          input[(std::size_t)(e * n)] = vocab_.mask_id();
          for (int j = 1; j < n; ++j)
            input[(std::size_t)(e * n + j)] = cur.ids[(std::size_t)(j - 1)];
        }
        Tape<S> tape;
        DenoiserVars v = lift(tape, params_);
        DenoiserOutput fwd = forward_ar(tape, v, cfg, b, input, pads, cond, null_flags);
        const Tensor<S>& lg = tape.val(fwd.logits);
        for (int e = 0; e < b; ++e) {
          const std::vector<int>& hs = holes[(std::size_t)members[(std::size_t)e]];
          if (round >= hs.size()) continue;
          int hp = hs[round];
          int row = e * n + hp;
          int best = 0;
          for (int k = 1; k < vocab_.text_size(); ++k)
            if (lg(row, (std::size_t)k) > lg(row, (std::size_t)best)) best = k;
          out[(std::size_t)members[(std::size_t)e]].ids[(std::size_t)hp] = best;
        }
      }
    }
    return out;
  }

  const SamplerConfig& config() const { return cfg_; }

 private:
  std::vector<int> resolve_lengths(const std::vector<const SceneFeatures*>& scenes,
                                   const std::vector<int>* oracle_lengths) const {
    const DenoiserConfig& cfg = params_.config;
    std::vector<int> lengths;
    switch (cfg_.length_source) {
      case LengthSource::kPredicted:
        lengths = predict_lengths(scenes);
        break;
      case LengthSource::kOracle:
        if (!oracle_lengths || oracle_lengths->size() != scenes.size())
          throw UsageError("sampler: oracle length source without oracle lengths");
        lengths = *oracle_lengths;
        break;
      case LengthSource::kFixed:
        lengths.assign(scenes.size(), cfg_.fixed_length);
        break;
    }
    for (int& n : lengths) {
      int c = std::min(std::max(n, 1), cfg.l_max);
      if (c != n) {
        std::cerr << "warning: caption length " << n << " clamped to " << c << "\n";
        n = c;
      }
    }
    return lengths;
  }

  /// Restricted log-probabilities for one group of lockstep states at one
  /// step: forward conditionally (and unconditionally unless s = 1), mask
  /// non-text classes, combine. Row r in the result is position r % l of
  /// member r / l.
  std::vector<std::vector<double>> step_logprobs(const std::vector<std::vector<int>>& states,
                                                 const std::vector<const SceneFeatures*>& group_scenes,
                                                 double p) const {
    const DenoiserConfig& cfg = params_.config;
    int b = (int)states.size();
    int l = (int)states[0].size();
    ForwardBatch<S> in;
    in.batch = b;
    in.l = l;
    in.token_ids.reserve((std::size_t)(b * l));
    for (const std::vector<int>& st : states)
      in.token_ids.insert(in.token_ids.end(), st.begin(), st.end());
    in.p_effective.assign((std::size_t)b, p);
    std::vector<std::uint8_t> pads((std::size_t)l, 0);
    std::vector<AttentionMask> masks;
    for (const std::vector<int>& st : states) {
      std::vector<std::uint8_t> mask_flags((std::size_t)l, 0);
      for (int j = 0; j < l; ++j)
        if (st[(std::size_t)j] == vocab_.mask_id()) mask_flags[(std::size_t)j] = 1;
      masks.push_back(build_self_mask(mask_flags, pads, cfg_.mask_mode));
    }
    in.self_mask = masks_to_additive<S>(masks);
    in.cond_null.assign((std::size_t)b, 0);
    in.cond = pack_condition<S>(group_scenes, in.cond_null);

    auto run = [&](bool null_cond) {
      ForwardBatch<S> fb = in;
      if (null_cond) fb.cond_null.assign((std::size_t)b, 1);
      Tape<S> tape;
      DenoiserVars v = lift(tape, params_);
      DenoiserOutput o = forward(tape, v, cfg, fb);
      return tape.val(o.logits);
    };

    Tensor<S> lc = run(false);
    Tensor<S> lu;
    bool use_uncond = cfg_.guidance_scale != 1.0;
    if (use_uncond) lu = run(true);

    std::vector<std::vector<double>> rows((std::size_t)(b * l));
    std::vector<double> rc((std::size_t)cfg.vocab), ru((std::size_t)cfg.vocab);
    for (int r = 0; r < b * l; ++r) {
      for (int k = 0; k < cfg.vocab; ++k) {
        bool text = k < vocab_.text_size();
        rc[(std::size_t)k] = text ? (double)lc(r, (std::size_t)k) : (double)kMaskedScore;
        ru[(std::size_t)k] =
            text ? (use_uncond ? (double)lu(r, (std::size_t)k) : 0.0) : (double)kMaskedScore;
      }
      rows[(std::size_t)r] = guided_logprobs(rc, ru, cfg_.guidance_scale);
    }
    return rows;
  }

  void run_group(int n, int hole_count, const std::vector<int>& members,
                 const std::vector<const SceneFeatures*>& scenes, std::vector<TokenSeq>& out,
                 std::vector<StepTraceEntry>* trace) const {
    const DenoiserConfig& cfg = params_.config;
    std::vector<int> plan = plan_keep_schedule(hole_count, schedule_.total_steps());
    int loop_steps = (int)plan.size();
    // The loop runs loop_steps levels, so re-corruption marginals come from
    // a chain of that many steps.
    NoiseSchedule inner = loop_steps == schedule_.total_steps()
                              ? schedule_
                              : NoiseSchedule::build(loop_steps, schedule_.text_vocab(),
                                                     schedule_.uniform_frac());

    int b = (int)members.size();
    std::vector<const SceneFeatures*> group_scenes;
    std::vector<Rng> rngs;
    std::vector<std::vector<int>> states((std::size_t)b);
    std::vector<std::vector<std::uint8_t>> fixed((std::size_t)b);
    for (int e = 0; e < b; ++e) {
      int gi = members[(std::size_t)e];
      group_scenes.push_back(scenes[(std::size_t)gi]);
      rngs.push_back(Rng::derive(cfg_.seed, (std::uint64_t)gi));
      states[(std::size_t)e] = out[(std::size_t)gi].ids;
      fixed[(std::size_t)e].assign((std::size_t)n, 0);
      for (int j = 0; j < n; ++j)
        if (states[(std::size_t)e][(std::size_t)j] != vocab_.mask_id())
          fixed[(std::size_t)e][(std::size_t)j] = 1;
    }

    for (int i = loop_steps; i >= 1; --i) {
      int step_index = loop_steps - i + 1;
      double p;
      if (hole_count > schedule_.total_steps() || cfg_.step_rescale == StepRescale::kDenominator)
        p = (double)i * cfg.step_scale / (double)loop_steps;
      else
        p = (double)i * (double)hole_count * cfg.step_scale /
            ((double)schedule_.total_steps() * (double)schedule_.total_steps());

      std::vector<std::vector<double>> rows = step_logprobs(states, group_scenes, p);
      int keep = plan[(std::size_t)(step_index - 1)];

      for (int e = 0; e < b; ++e) {
        std::vector<int>& st = states[(std::size_t)e];
        std::vector<std::uint8_t>& fx = fixed[(std::size_t)e];
        Rng& rng = rngs[(std::size_t)e];
        // Select a clean-token estimate per unfixed position.
        std::vector<int> open;
        std::vector<int> choice((std::size_t)n, -1);
        std::vector<double> conf((std::size_t)n, 0.0);
        for (int j = 0; j < n; ++j) {
          if (fx[(std::size_t)j]) continue;
          const std::vector<double>& lp = rows[(std::size_t)(e * n + j)];
          int pick;
          if (cfg_.selection == SelectionRule::kGreedy) {
            pick = 0;
            for (int k = 1; k < vocab_.text_size(); ++k)
              if (lp[(std::size_t)k] > lp[(std::size_t)pick]) pick = k;
          } else {
            double u = rng.uniform();
            double acc = 0.0;
            pick = vocab_.text_size() - 1;
            for (int k = 0; k < vocab_.text_size(); ++k) {
              acc += std::exp(lp[(std::size_t)k]);
              if (u < acc) {
                pick = k;
                break;
              }
            }
          }
          open.push_back(j);
          choice[(std::size_t)j] = pick;
          conf[(std::size_t)j] = lp[(std::size_t)pick];
        }
        // Fix the most confident selections (or, without best-first, a
        // random subset of the same size), then push the rest back to noise
        // level i-1 around their fresh estimates.
        int k_fix = std::min(keep, (int)open.size());
        if (cfg_.best_first) {
          std::stable_sort(open.begin(), open.end(), [&conf](int a, int c) {
            return conf[(std::size_t)a] > conf[(std::size_t)c];
          });
        } else {
          for (int j = 0; j < k_fix; ++j) {
            int swap_at = j + (int)rng.uniform_int((int)open.size() - j);
            std::swap(open[(std::size_t)j], open[(std::size_t)swap_at]);
          }
        }
        std::vector<int> fixed_now(open.begin(), open.begin() + k_fix);
        std::sort(fixed_now.begin(), fixed_now.end());
        for (int j : fixed_now) {
          fx[(std::size_t)j] = 1;
          st[(std::size_t)j] = choice[(std::size_t)j];
        }
        for (int j = 0; j < n; ++j)
          if (!fx[(std::size_t)j])
            st[(std::size_t)j] = inner.sample_marginal(choice[(std::size_t)j], i - 1, rng);
        if (trace) {
          StepTraceEntry te;
          te.example = members[(std::size_t)e];
          te.step = step_index;
          te.t = i;
          te.p = p;
          te.fixed_positions = fixed_now;
          te.tokens = st;
          trace->push_back(std::move(te));
        }
      }
    }
    for (int e = 0; e < b; ++e) {
      for (int j = 0; j < n; ++j)
        if (states[(std::size_t)e][(std::size_t)j] == vocab_.mask_id())
          throw std::runtime_error("sampler: mask token survived the denoising loop");
      out[(std::size_t)members[(std::size_t)e]].ids = states[(std::size_t)e];
    }
  }

  DenoiserParams<S> params_;
  const Vocabulary& vocab_;
  NoiseSchedule schedule_;
  SamplerConfig cfg_;
};

}  // namespace diffcap
