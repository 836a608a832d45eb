#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffcap/adamw.hpp"
#include "diffcap/checkpoint.hpp"
#include "diffcap/metrics.hpp"
#include "diffcap/model.hpp"
#include "diffcap/sampler.hpp"
#include "diffcap/scene.hpp"
#include "diffcap/schedule.hpp"

namespace diffcap {

enum class TrainMode { kDiffusion, kAr };

inline std::string train_mode_name(TrainMode m) {
  return m == TrainMode::kAr ? "ar" : "diffusion";
}

inline TrainMode train_mode_from_name(const std::string& s) {
  if (s == "diffusion") return TrainMode::kDiffusion;
  if (s == "ar") return TrainMode::kAr;
  throw UsageError("unknown training mode \"" + s + "\"");
}

struct TrainConfig {
  int epochs = 30;
  int batch_size = 64;
  double peak_lr = 2e-4;
  double warmup_frac = 0.2;  // fraction of total steps spent warming up
  double weight_decay = 0.01;
  double image_free_ratio = 0.2;
  double loss_weight_diffusion = 1.0;
  double loss_weight_length = 0.2;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::kDiffusion;
  AttnMaskMode attn_mode = AttnMaskMode::kCam;

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw UsageError("train config: epochs and batch size must be positive");
    if (!(peak_lr > 0.0)) throw UsageError("train config: peak learning rate must be > 0");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0)
      throw UsageError("train config: warmup fraction must lie in [0, 1)");
    if (image_free_ratio < 0.0 || image_free_ratio > 1.0)
      throw UsageError("train config: image-free ratio must lie in [0, 1]");
    if (weight_decay < 0.0 || clip_norm <= 0.0)
      throw UsageError("train config: decay must be >= 0, clip norm > 0");
    if (loss_weight_diffusion < 0.0 || loss_weight_length < 0.0)
      throw UsageError("train config: loss weights must be >= 0");
    if (attn_mode == AttnMaskMode::kCausal)
      throw UsageError("train config: causal masking is implied by ar mode, not a setting");
  }
};

/// Pre-encoded record: padded ids, true length, condition features.
struct TrainExample {
  std::vector<int> ids;
  int length = 0;
  SceneFeatures features;
};

inline std::vector<TrainExample> prepare_examples(const std::vector<const CaptionedScene*>& recs,
                                                  const Vocabulary& vocab, int l_max) {
  std::vector<TrainExample> out;
  out.reserve(recs.size());
  for (const CaptionedScene* r : recs) {
    TrainExample ex;
    TokenSeq seq = encode(r->caption, vocab, l_max);
    ex.ids = seq.ids;
    ex.length = seq.length;
    ex.features = scene_features(r->scene);
    out.push_back(std::move(ex));
  }
  return out;
}

/// Linear warmup to the peak, then cosine decay to zero at total_steps.
inline double lr_at(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
                    double peak) {
  if (step <= 0) return 0.0;
  if (step >= total_steps) return 0.0;
  if (warmup_steps > 0 && step <= warmup_steps) return peak * (double)step / (double)warmup_steps;
  double span = (double)(total_steps - warmup_steps);
  double x = (double)(step - warmup_steps) / (span > 0.0 ? span : 1.0);
  return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * x));
}

template <typename S>
struct DiffusionBatch {
  int batch = 0;
  int l = 0;
  std::vector<int> token_ids;      // corrupted inputs
  std::vector<int> targets;        // clean ids
  std::vector<std::uint8_t> active;  // non-PAD target positions
  std::vector<double> p_effective;
  std::vector<std::uint8_t> cond_null;
  Tensor<S> cond;
  Tensor<S> self_mask;
  std::vector<int> length_targets;  // class index = length - 1
};

inline DiffusionBatch<double> widen(const DiffusionBatch<float>& b) {
  DiffusionBatch<double> out;
  out.batch = b.batch;
  out.l = b.l;
  out.token_ids = b.token_ids;
  out.targets = b.targets;
  out.active = b.active;
  out.p_effective = b.p_effective;
  out.cond_null = b.cond_null;
  out.cond = widen(b.cond);
  out.self_mask = widen(b.self_mask);
  out.length_targets = b.length_targets;
  return out;
}

/// Per example, in order: draw t, corrupt, draw the image-free coin.
/// forced_t > 0 pins the noise level (still consuming the same draws).
template <typename S>
DiffusionBatch<S> prepare_diffusion_batch(const std::vector<const TrainExample*>& batch,
                                          const NoiseSchedule& schedule, const Vocabulary& vocab,
                                          const DenoiserConfig& model_cfg, double image_free_ratio,
                                          AttnMaskMode attn_mode, Rng& rng, int forced_t = -1) {
  int b = (int)batch.size();
  int l = model_cfg.l_max;
  DiffusionBatch<S> out;
  out.batch = b;
  out.l = l;
  out.token_ids.reserve((std::size_t)(b * l));
  out.targets.reserve((std::size_t)(b * l));
  out.active.reserve((std::size_t)(b * l));
  std::vector<AttentionMask> masks;
  std::vector<const SceneFeatures*> scenes;
  for (const TrainExample* ex : batch) {
    if ((int)ex->ids.size() != l)
      throw UsageError("batch: example padded to " + std::to_string(ex->ids.size()) +
                       " but the model expects " + std::to_string(l));
    int t = forced_t > 0 ? forced_t : 1 + (int)rng.uniform_int((std::uint64_t)schedule.total_steps());
    TokenSeq clean;
    clean.ids = ex->ids;
    clean.length = ex->length;
    TokenSeq noisy = corrupt(clean, t, schedule, vocab, rng);
    bool null_cond = rng.uniform() < image_free_ratio;
    out.token_ids.insert(out.token_ids.end(), noisy.ids.begin(), noisy.ids.end());
    out.targets.insert(out.targets.end(), ex->ids.begin(), ex->ids.end());
    for (int j = 0; j < l; ++j) out.active.push_back(j < ex->length ? 1 : 0);
    out.p_effective.push_back((double)t * model_cfg.step_scale / (double)schedule.total_steps());
    out.cond_null.push_back(null_cond ? 1 : 0);
    out.length_targets.push_back(ex->length - 1);
    std::vector<std::uint8_t> mask_flags((std::size_t)l, 0), pad_flags((std::size_t)l, 0);
    for (int j = 0; j < l; ++j) {
      if (noisy.ids[(std::size_t)j] == vocab.mask_id()) mask_flags[(std::size_t)j] = 1;
      if (j >= ex->length) pad_flags[(std::size_t)j] = 1;
    }
    masks.push_back(build_self_mask(mask_flags, pad_flags, attn_mode));
    scenes.push_back(&ex->features);
  }
  out.self_mask = masks_to_additive<S>(masks);
  std::vector<std::uint8_t> no_null((std::size_t)b, 0);
  out.cond = pack_condition<S>(scenes, no_null);
  return out;
}

template <typename S>
struct ArBatch {
  int batch = 0;
  int l = 0;
  std::vector<int> token_ids;  // shifted inputs, position 0 holds MASK
  std::vector<std::uint8_t> pad_flags;
  std::vector<int> targets;  // next tokens; the PAD class closes the caption
  std::vector<std::uint8_t> active;
  Tensor<S> cond;
};

template <typename S>
ArBatch<S> prepare_ar_batch(const std::vector<const TrainExample*>& batch, const Vocabulary& vocab,
                            const DenoiserConfig& model_cfg) {
  int b = (int)batch.size();
  int l = model_cfg.l_max;
  ArBatch<S> out;
  out.batch = b;
  out.l = l;
  std::vector<const SceneFeatures*> scenes;
  for (const TrainExample* ex : batch) {
    if ((int)ex->ids.size() != l)
      throw UsageError("batch: example padded to " + std::to_string(ex->ids.size()) +
                       " but the model expects " + std::to_string(l));
    out.token_ids.push_back(vocab.mask_id());  // start-of-sequence role
    for (int j = 0; j + 1 < l; ++j) out.token_ids.push_back(ex->ids[(std::size_t)j]);
    for (int j = 0; j < l; ++j) {
      out.pad_flags.push_back(j > ex->length ? 1 : 0);
      out.targets.push_back(ex->ids[(std::size_t)j]);  // PAD at j >= length
      out.active.push_back(j <= std::min(ex->length, l - 1) ? 1 : 0);
    }
    scenes.push_back(&ex->features);
  }
  std::vector<std::uint8_t> no_null((std::size_t)b, 0);
  out.cond = pack_condition<S>(scenes, no_null);
  return out;
}

template <typename S>
struct StepLoss {
  double loss = 0.0;
  double diffusion_loss = 0.0;
  double length_loss = 0.0;
  std::vector<Tensor<S>> grads;  // parameter visit order
};

template <typename S>
StepLoss<S> diffusion_step_loss(const DenoiserParams<S>& params, const DiffusionBatch<S>& batch,
                                double w_diffusion, double w_length) {
  using namespace ops;
  Tape<S> tape;
  DenoiserVars v = lift(tape, params);
  ForwardBatch<S> in;
  in.batch = batch.batch;
  in.l = batch.l;
  in.token_ids = batch.token_ids;
  in.p_effective = batch.p_effective;
  in.cond = batch.cond;
  in.cond_null = batch.cond_null;
  in.self_mask = batch.self_mask;
  DenoiserOutput fwd = forward(tape, v, params.config, in);
  Var ce = cross_entropy(tape, fwd.logits, batch.targets, batch.active, batch.l);
  Var len_logits = predict_length_logits(tape, v, fwd.summary);
  std::vector<std::uint8_t> all_active((std::size_t)batch.batch, 1);
  Var ce_len = cross_entropy(tape, len_logits, batch.length_targets, all_active, 0);
  Var loss = add(tape, scale(tape, ce, (S)w_diffusion), scale(tape, ce_len, (S)w_length));
  tape.backward(loss);
  StepLoss<S> out;
  out.loss = (double)tape.val(loss).data[0];
  out.diffusion_loss = (double)tape.val(ce).data[0];
  out.length_loss = (double)tape.val(ce_len).data[0];
  out.grads = collect_grads(tape, v, params);
  return out;
}

template <typename S>
StepLoss<S> ar_step_loss(const DenoiserParams<S>& params, const ArBatch<S>& batch) {
  using namespace ops;
  Tape<S> tape;
  DenoiserVars v = lift(tape, params);
  std::vector<std::uint8_t> no_null((std::size_t)batch.batch, 0);
  DenoiserOutput fwd = forward_ar(tape, v, params.config, batch.batch, batch.token_ids,
                                  batch.pad_flags, batch.cond, no_null);
  Var ce = cross_entropy(tape, fwd.logits, batch.targets, batch.active, batch.l);
  tape.backward(ce);
  StepLoss<S> out;
  out.loss = (double)tape.val(ce).data[0];
  out.diffusion_loss = out.loss;
  out.grads = collect_grads(tape, v, params);
  return out;
}

struct EpochLog {
  int epoch = 0;
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double val_token_acc = 0.0;
  double val_exact_match = 0.0;

  nlohmann::json to_json() const {
    return nlohmann::json{{"epoch", epoch},
                          {"step", step},
                          {"lr", lr},
                          {"loss", loss},
                          {"val_token_acc", val_token_acc},
                          {"val_exact_match", val_exact_match}};
  }
};

template <typename S>
struct TrainOutcome {
  DenoiserParams<S> best;
  double best_val_token_acc = -1.0;
  std::int64_t final_step = 0;
  std::vector<EpochLog> log;
};

namespace detail {

/// Greedy validation decode with oracle lengths; returns token accuracy and
/// exact-match rate against the references.
template <typename S>
std::pair<double, double> validate_model(const DenoiserParams<S>& params, const Vocabulary& vocab,
                                         const NoiseSchedule& schedule, const TrainConfig& cfg,
                                         const std::vector<TrainExample>& val, int epoch) {
  if (val.empty()) return {0.0, 0.0};
  std::vector<const SceneFeatures*> scenes;
  std::vector<int> lengths;
  for (const TrainExample& ex : val) {
    scenes.push_back(&ex.features);
    lengths.push_back(ex.length);
  }
  std::vector<TokenSeq> outs;
  if (cfg.mode == TrainMode::kAr) {
    SamplerConfig sc;
    sc.seed = cfg.seed;
    CaptionSampler<S> sampler(params, vocab, schedule, sc);
    outs = sampler.decode_ar(scenes);
  } else {
    SamplerConfig sc;
    sc.guidance_scale = cfg.image_free_ratio > 0.0 ? 1.17 : 1.0;
    sc.mask_mode = cfg.attn_mode;
    sc.length_source = LengthSource::kOracle;
    sc.seed = cfg.seed ^ (0x9E3779B97F4A7C15ull * (std::uint64_t)(epoch + 1));
    CaptionSampler<S> sampler(params, vocab, schedule, sc);
    outs = sampler.sample(scenes, &lengths);
  }
  double acc_sum = 0.0;
  int exact = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    std::vector<int> ref(val[i].ids.begin(), val[i].ids.begin() + val[i].length);
    acc_sum += token_accuracy(outs[i].ids, ref);
    if (outs[i].ids == ref) ++exact;
  }
  return {acc_sum / (double)val.size(), (double)exact / (double)val.size()};
}

}  // namespace detail

/// Full optimization loop. Writes the best-validation checkpoint to
/// checkpoint_path and one JSON line per epoch to metrics_path; throws
/// std::runtime_error on divergence (the best checkpoint so far stays on
/// disk). start_step and opt_state resume a previous run.
template <typename S>
TrainOutcome<S> train(DenoiserParams<S> params, const std::vector<TrainExample>& train_set,
                      const std::vector<TrainExample>& val_set, const Vocabulary& vocab,
                      const NoiseSchedule& schedule, const TrainConfig& cfg,
                      const std::string& checkpoint_path, const std::string& metrics_path,
                      std::ostream* progress = nullptr, std::int64_t start_step = 0,
                      const OptimizerState<S>* opt_state = nullptr) {
  cfg.validate();
  params.config.validate();
  if (train_set.empty()) throw UsageError("train: empty training split");

  AdamWConfig acfg;
  acfg.weight_decay = cfg.weight_decay;
  AdamW<S> opt(acfg);
  if (opt_state) {
    OptimizerState<S> st = *opt_state;
    opt.restore(std::move(st.m1), std::move(st.m2), st.step);
  }

  std::vector<std::pair<std::string, Tensor<S>*>> param_list;
  params.visit([&param_list](const std::string& name, Tensor<S>& t) {
    param_list.emplace_back(name, &t);
  });

  std::int64_t steps_per_epoch =
      ((std::int64_t)train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::int64_t total_steps = start_step + (std::int64_t)cfg.epochs * steps_per_epoch;
  std::int64_t warmup_steps = (std::int64_t)std::llround(cfg.warmup_frac * (double)total_steps);

  Rng data_rng = Rng::derive(cfg.seed, 11);
  Rng shuffle_rng = Rng::derive(cfg.seed, 12);

  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot open " + metrics_path + " for writing");

  TrainOutcome<S> out;
  out.best = params;
  std::int64_t step = start_step;
  std::vector<int> order((std::size_t)train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = (int)i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::size_t j = (std::size_t)shuffle_rng.uniform_int((std::uint64_t)i);
      std::swap(order[i - 1], order[j]);
    }
    double loss_sum = 0.0;
    std::int64_t batches = 0;
    double lr = 0.0;
    for (std::int64_t bs = 0; bs < steps_per_epoch; ++bs) {
      std::vector<const TrainExample*> batch;
      for (std::int64_t k = bs * cfg.batch_size;
           k < std::min((std::int64_t)train_set.size(), (bs + 1) * cfg.batch_size); ++k)
        batch.push_back(&train_set[(std::size_t)order[(std::size_t)k]]);
      StepLoss<S> sl;
      if (cfg.mode == TrainMode::kAr) {
        ArBatch<S> ab = prepare_ar_batch<S>(batch, vocab, params.config);
        sl = ar_step_loss(params, ab);
      } else {
        DiffusionBatch<S> db = prepare_diffusion_batch<S>(
            batch, schedule, vocab, params.config, cfg.image_free_ratio, cfg.attn_mode, data_rng);
        sl = diffusion_step_loss(params, db, cfg.loss_weight_diffusion, cfg.loss_weight_length);
      }
      if (!std::isfinite(sl.loss))
        throw std::runtime_error("training diverged at step " + std::to_string(step + 1) +
                                 " (loss is not finite); best checkpoint retained");
      std::vector<Tensor<S>*> grad_ptrs;
      for (Tensor<S>& g : sl.grads) grad_ptrs.push_back(&g);
      clip_global_norm(grad_ptrs, cfg.clip_norm);
      std::vector<const Tensor<S>*> grad_view(grad_ptrs.begin(), grad_ptrs.end());
      ++step;
      lr = lr_at(step, total_steps, warmup_steps, cfg.peak_lr);
      opt.step(param_list, grad_view, lr);
      loss_sum += sl.loss;
      ++batches;
    }

    auto [val_acc, val_exact] =
        detail::validate_model(params, vocab, schedule, cfg, val_set, epoch);
    EpochLog el;
    el.epoch = epoch;
    el.step = step;
    el.lr = lr;
    el.loss = loss_sum / (double)std::max<std::int64_t>(batches, 1);
    el.val_token_acc = val_acc;
    el.val_exact_match = val_exact;
    out.log.push_back(el);
    metrics << el.to_json().dump() << "\n";
    metrics.flush();
    if (progress)
      (*progress) << "epoch " << epoch << " step " << step << " loss " << el.loss
                  << " val_token_acc " << val_acc << " val_exact " << val_exact << "\n";

    if (val_acc >= out.best_val_token_acc) {
      out.best_val_token_acc = val_acc;
      out.best = params;
      OptimizerState<S> st;
      st.step = opt.step_count();
      st.m1 = opt.moment1();
      st.m2 = opt.moment2();
      save_checkpoint(checkpoint_path, params, vocab.words(), train_mode_name(cfg.mode),
                      cfg.mode == TrainMode::kAr ? AttnMaskMode::kCausal : cfg.attn_mode, step,
                      &st);
    }
  }
  out.final_step = step;
  return out;
}

}  // namespace diffcap
