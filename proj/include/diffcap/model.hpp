#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "diffcap/autodiff.hpp"
#include "diffcap/rng.hpp"
#include "diffcap/scene.hpp"

namespace diffcap {

enum class TimestepMode { kSinusoidal, kLearned, kNone };

enum class AttnMaskMode { kFull, kCam, kCamM2mOnly, kCamT2mOnly, kCausal };

struct DenoiserConfig {
  int layers = 4;
  int d_model = 128;
  int heads = 4;
  int d_ff = 512;
  int l_max = 20;
  int vocab = 0;  // total ids including MASK and PAD
  int total_steps = 20;
  double step_scale = 8000.0;
  double uniform_frac = 0.1;  // replace share of the corruption chain
  int cond_slots = kCondSlots;
  int cond_dim = kCondFeatureDim;
  TimestepMode timestep_mode = TimestepMode::kSinusoidal;

  void validate() const {
    if (layers < 1 || d_model < 1 || heads < 1 || d_ff < 1 || l_max < 1)
      throw UsageError("denoiser config: extents must be positive");
    if (d_model % heads != 0)
      throw UsageError("denoiser config: width " + std::to_string(d_model) +
                       " not divisible by " + std::to_string(heads) + " heads");
    if (vocab < 4) throw UsageError("denoiser config: vocabulary too small");
    if (total_steps < 1) throw UsageError("denoiser config: total steps must be >= 1");
    if (!(step_scale > 0.0)) throw UsageError("denoiser config: step scale must be > 0");
    if (uniform_frac < 0.0 || uniform_frac >= 1.0)
      throw UsageError("denoiser config: uniform fraction outside [0, 1)");
    if (cond_slots < 2 || cond_dim < 1)
      throw UsageError("denoiser config: condition geometry invalid");
  }
};

/// Sinusoid of an already-rescaled step value: component i is
/// sin(p / 10000^(2i/d)) for i < d/2 and cos(p / 10000^(2i/d)) above.
template <typename S>
Tensor<S> timestep_embedding(double p, int d_model) {
  if (p < 0.0) throw UsageError("timestep_embedding: negative step value");
  Tensor<S> out(Shape{d_model});
  for (int i = 0; i < d_model; ++i) {
    double wavelength = std::pow(10000.0, 2.0 * (double)i / (double)d_model);
    double arg = p / wavelength;
    out.data[i] = (S)(i < d_model / 2 ? std::sin(arg) : std::cos(arg));
  }
  return out;
}

/// Boolean self-attention mask; entry (q, k) true means q may attend k.
struct AttentionMask {
  int l = 0;
  std::vector<std::uint8_t> allow;

  bool at(int q, int k) const { return allow[(std::size_t)(q * l + k)] != 0; }
};

/// Masking rules over current is-MASK flags:
///   kCam: text does not attend MASK, MASK does not attend other MASK;
///   kCamM2mOnly / kCamT2mOnly: one rule at a time (ablations);
///   kCausal: lower triangle; kFull: no restriction.
/// PAD rows and columns are blocked, the diagonal is always allowed.
inline AttentionMask build_self_mask(const std::vector<std::uint8_t>& mask_flags,
                                     const std::vector<std::uint8_t>& pad_flags,
                                     AttnMaskMode mode) {
  if (mask_flags.size() != pad_flags.size())
    throw UsageError("attention mask: " + std::to_string(mask_flags.size()) +
                     " mask flags vs " + std::to_string(pad_flags.size()) + " pad flags");
  int l = (int)mask_flags.size();
  AttentionMask m;
  m.l = l;
  m.allow.assign((std::size_t)l * (std::size_t)l, 0);
  for (int q = 0; q < l; ++q) {
    for (int k = 0; k < l; ++k) {
      bool ok;
      if (q == k) {
        ok = true;
      } else if (pad_flags[(std::size_t)q] || pad_flags[(std::size_t)k]) {
        ok = false;
      } else {
        switch (mode) {
          case AttnMaskMode::kFull: ok = true; break;
          case AttnMaskMode::kCam: ok = !mask_flags[(std::size_t)k]; break;
          case AttnMaskMode::kCamM2mOnly:
            ok = !(mask_flags[(std::size_t)q] && mask_flags[(std::size_t)k]);
            break;
          case AttnMaskMode::kCamT2mOnly:
            ok = !(!mask_flags[(std::size_t)q] && mask_flags[(std::size_t)k]);
            break;
          case AttnMaskMode::kCausal: ok = k <= q; break;
          default: ok = true;
        }
      }
      if (ok) m.allow[(std::size_t)(q * l + k)] = 1;
    }
  }
  return m;
}

inline AttentionMask build_cam_mask(const std::vector<std::uint8_t>& mask_flags,
                                    const std::vector<std::uint8_t>& pad_flags) {
  return build_self_mask(mask_flags, pad_flags, AttnMaskMode::kCam);
}

inline constexpr double kMaskedScore = -1e9;

/// Stacks per-example boolean masks into the additive {B, L, L} bias the
/// attention op consumes.
template <typename S>
Tensor<S> masks_to_additive(const std::vector<AttentionMask>& masks) {
  if (masks.empty()) throw UsageError("attention mask: empty batch");
  int l = masks[0].l;
  Tensor<S> out(Shape{(int)masks.size(), l, l});
  for (std::size_t b = 0; b < masks.size(); ++b) {
    if (masks[b].l != l) throw UsageError("attention mask: ragged batch");
    for (int i = 0; i < l * l; ++i)
      out.data[(std::int64_t)b * l * l + i] = masks[b].allow[(std::size_t)i] ? S(0) : (S)kMaskedScore;
  }
  return out;
}

template <typename S>
struct DenoiserLayerParams {
  Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<S> ada1_w, ada1_b, ada2_w, ada2_b;
  Tensor<S> ln_cross_g, ln_cross_b;
  Tensor<S> xq_w, xq_b, xk_w, xk_b, xv_w, xv_b, xo_w, xo_b;
  Tensor<S> ff1_w, ff1_b, ff2_w, ff2_b;
};

template <typename S>
struct DenoiserParams {
  DenoiserConfig config;
  Tensor<S> tok_emb, pos_emb;
  Tensor<S> cond_w, cond_b, slot_emb, null_cond;
  Tensor<S> t_w, t_b;
  Tensor<S> t_table;  // learned timestep mode only
  std::vector<DenoiserLayerParams<S>> layers;
  Tensor<S> final_g, final_b;
  Tensor<S> out_w, out_b;
  Tensor<S> len1_w, len1_b, len2_w, len2_b;

  static DenoiserParams init(const DenoiserConfig& cfg, Rng& rng) {
    cfg.validate();
    DenoiserParams p;
    p.config = cfg;
    int d = cfg.d_model;
    auto normal = [&rng](Shape sh) {
      Tensor<S> t(std::move(sh));
      for (std::int64_t i = 0; i < t.numel(); ++i) t.data[i] = (S)(0.02 * rng.normal());
      return t;
    };
    p.tok_emb = normal({cfg.vocab, d});
    p.pos_emb = normal({cfg.l_max, d});
    p.cond_w = normal({cfg.cond_dim, d});
    p.cond_b = Tensor<S>::zeros({d});
    // Slots are grid cells in row-major order plus a trailing summary
    // token. The features themselves carry no coordinates, so seed the
    // slot embedding with a fixed code (row/col one-hots plus scalar
    // coordinates) the way a patch encoder would carry its positions;
    // training refines it from there.
    p.slot_emb = normal({cfg.cond_slots, d});
    if (cfg.cond_slots == kCondSlots && d >= 9) {
      for (int s_i = 0; s_i < kGridCells; ++s_i) {
        int row = s_i / kGridSide, col = s_i % kGridSide;
        S* e = p.slot_emb.data.data() + (std::int64_t)s_i * d;
        e[row] += S(0.5);
        e[3 + col] += S(0.5);
        e[6] += S(0.5) * S(row);
        e[7] += S(0.5) * S(col);
      }
      p.slot_emb.data[(std::int64_t)(cfg.cond_slots - 1) * d + 8] += S(0.5);
    }
    p.null_cond = normal({cfg.cond_slots, d});
    p.t_w = normal({d, d});
    p.t_b = Tensor<S>::zeros({d});
    if (cfg.timestep_mode == TimestepMode::kLearned)
      p.t_table = normal({cfg.total_steps + 1, d});
    for (int l = 0; l < cfg.layers; ++l) {
      DenoiserLayerParams<S> lp;
      lp.wq = normal({d, d});
      lp.bq = Tensor<S>::zeros({d});
      lp.wk = normal({d, d});
      lp.bk = Tensor<S>::zeros({d});
      lp.wv = normal({d, d});
      lp.bv = Tensor<S>::zeros({d});
      lp.wo = normal({d, d});
      lp.bo = Tensor<S>::zeros({d});
      // Nonzero modulation weights keep AdaLN responsive from the first
      // forward pass.
      lp.ada1_w = normal({d, 2 * d});
      lp.ada1_b = Tensor<S>::zeros({2 * d});
      lp.ada2_w = normal({d, 2 * d});
      lp.ada2_b = Tensor<S>::zeros({2 * d});
      lp.ln_cross_g = Tensor<S>::full({d}, S(1));
      lp.ln_cross_b = Tensor<S>::zeros({d});
      lp.xq_w = normal({d, d});
      lp.xq_b = Tensor<S>::zeros({d});
      lp.xk_w = normal({d, d});
      lp.xk_b = Tensor<S>::zeros({d});
      lp.xv_w = normal({d, d});
      lp.xv_b = Tensor<S>::zeros({d});
      lp.xo_w = normal({d, d});
      lp.xo_b = Tensor<S>::zeros({d});
      lp.ff1_w = normal({d, cfg.d_ff});
      lp.ff1_b = Tensor<S>::zeros({cfg.d_ff});
      lp.ff2_w = normal({cfg.d_ff, d});
      lp.ff2_b = Tensor<S>::zeros({d});
      p.layers.push_back(std::move(lp));
    }
    p.final_g = Tensor<S>::full({d}, S(1));
    p.final_b = Tensor<S>::zeros({d});
    p.out_w = normal({d, cfg.vocab});
    p.out_b = Tensor<S>::zeros({cfg.vocab});
    p.len1_w = normal({d, d});
    p.len1_b = Tensor<S>::zeros({d});
    p.len2_w = normal({d, cfg.l_max});
    p.len2_b = Tensor<S>::zeros({cfg.l_max});
    return p;
  }

  /// Stable named iteration; ordering defines checkpoint and optimizer
  /// layout. f(name, Tensor&).
  template <typename F>
  void visit(F&& f) {
    f("tok_emb", tok_emb);
    f("pos_emb", pos_emb);
    f("cond_w", cond_w);
    f("cond_b", cond_b);
    f("slot_emb", slot_emb);
    f("null_cond", null_cond);
    f("t_w", t_w);
    f("t_b", t_b);
    if (config.timestep_mode == TimestepMode::kLearned) f("t_table", t_table);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      std::string pre = "layer" + std::to_string(l) + ".";
      DenoiserLayerParams<S>& lp = layers[l];
      f(pre + "wq", lp.wq);
      f(pre + "bq", lp.bq);
      f(pre + "wk", lp.wk);
      f(pre + "bk", lp.bk);
      f(pre + "wv", lp.wv);
      f(pre + "bv", lp.bv);
      f(pre + "wo", lp.wo);
      f(pre + "bo", lp.bo);
      f(pre + "ada1_w", lp.ada1_w);
      f(pre + "ada1_b", lp.ada1_b);
      f(pre + "ada2_w", lp.ada2_w);
      f(pre + "ada2_b", lp.ada2_b);
      f(pre + "ln_cross_g", lp.ln_cross_g);
      f(pre + "ln_cross_b", lp.ln_cross_b);
      f(pre + "xq_w", lp.xq_w);
      f(pre + "xq_b", lp.xq_b);
      f(pre + "xk_w", lp.xk_w);
      f(pre + "xk_b", lp.xk_b);
      f(pre + "xv_w", lp.xv_w);
      f(pre + "xv_b", lp.xv_b);
      f(pre + "xo_w", lp.xo_w);
      f(pre + "xo_b", lp.xo_b);
      f(pre + "ff1_w", lp.ff1_w);
      f(pre + "ff1_b", lp.ff1_b);
      f(pre + "ff2_w", lp.ff2_w);
      f(pre + "ff2_b", lp.ff2_b);
    }
    f("final_g", final_g);
    f("final_b", final_b);
    f("out_w", out_w);
    f("out_b", out_b);
    f("len1_w", len1_w);
    f("len1_b", len1_b);
    f("len2_w", len2_w);
    f("len2_b", len2_b);
  }

  template <typename F>
  void visit(F&& f) const {
    const_cast<DenoiserParams*>(this)->visit(
        [&f](const std::string& name, Tensor<S>& t) { f(name, (const Tensor<S>&)t); });
  }

  std::int64_t total_params() const {
    std::int64_t n = 0;
    visit([&n](const std::string&, const Tensor<S>& t) { n += t.numel(); });
    return n;
  }
};

/// Parameter handles lifted onto a tape. Field layout mirrors
/// DenoiserParams; lift() records leaves in visit order.
struct DenoiserLayerVars {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
  Var ada1_w, ada1_b, ada2_w, ada2_b;
  Var ln_cross_g, ln_cross_b;
  Var xq_w, xq_b, xk_w, xk_b, xv_w, xv_b, xo_w, xo_b;
  Var ff1_w, ff1_b, ff2_w, ff2_b;
};

struct DenoiserVars {
  Var tok_emb, pos_emb;
  Var cond_w, cond_b, slot_emb, null_cond;
  Var t_w, t_b;
  Var t_table;
  std::vector<DenoiserLayerVars> layers;
  Var final_g, final_b;
  Var out_w, out_b;
  Var len1_w, len1_b, len2_w, len2_b;
};

template <typename S>
DenoiserVars lift(Tape<S>& tape, const DenoiserParams<S>& p) {
  DenoiserVars v;
  v.tok_emb = tape.leaf(p.tok_emb);
  v.pos_emb = tape.leaf(p.pos_emb);
  v.cond_w = tape.leaf(p.cond_w);
  v.cond_b = tape.leaf(p.cond_b);
  v.slot_emb = tape.leaf(p.slot_emb);
  v.null_cond = tape.leaf(p.null_cond);
  v.t_w = tape.leaf(p.t_w);
  v.t_b = tape.leaf(p.t_b);
  if (p.config.timestep_mode == TimestepMode::kLearned) v.t_table = tape.leaf(p.t_table);
  for (const DenoiserLayerParams<S>& lp : p.layers) {
    DenoiserLayerVars lv;
    lv.wq = tape.leaf(lp.wq);
    lv.bq = tape.leaf(lp.bq);
    lv.wk = tape.leaf(lp.wk);
    lv.bk = tape.leaf(lp.bk);
    lv.wv = tape.leaf(lp.wv);
    lv.bv = tape.leaf(lp.bv);
    lv.wo = tape.leaf(lp.wo);
    lv.bo = tape.leaf(lp.bo);
    lv.ada1_w = tape.leaf(lp.ada1_w);
    lv.ada1_b = tape.leaf(lp.ada1_b);
    lv.ada2_w = tape.leaf(lp.ada2_w);
    lv.ada2_b = tape.leaf(lp.ada2_b);
    lv.ln_cross_g = tape.leaf(lp.ln_cross_g);
    lv.ln_cross_b = tape.leaf(lp.ln_cross_b);
    lv.xq_w = tape.leaf(lp.xq_w);
    lv.xq_b = tape.leaf(lp.xq_b);
    lv.xk_w = tape.leaf(lp.xk_w);
    lv.xk_b = tape.leaf(lp.xk_b);
    lv.xv_w = tape.leaf(lp.xv_w);
    lv.xv_b = tape.leaf(lp.xv_b);
    lv.xo_w = tape.leaf(lp.xo_w);
    lv.xo_b = tape.leaf(lp.xo_b);
    lv.ff1_w = tape.leaf(lp.ff1_w);
    lv.ff1_b = tape.leaf(lp.ff1_b);
    lv.ff2_w = tape.leaf(lp.ff2_w);
    lv.ff2_b = tape.leaf(lp.ff2_b);
    v.layers.push_back(lv);
  }
  v.final_g = tape.leaf(p.final_g);
  v.final_b = tape.leaf(p.final_b);
  v.out_w = tape.leaf(p.out_w);
  v.out_b = tape.leaf(p.out_b);
  v.len1_w = tape.leaf(p.len1_w);
  v.len1_b = tape.leaf(p.len1_b);
  v.len2_w = tape.leaf(p.len2_w);
  v.len2_b = tape.leaf(p.len2_b);
  return v;
}

/// Gradients in visit order after backward(); untouched parameters yield
/// zeros of the right shape.
template <typename S>
std::vector<Tensor<S>> collect_grads(Tape<S>& tape, const DenoiserVars& v,
                                     const DenoiserParams<S>& p) {
  std::vector<Var> order;
  order.reserve(64);
  auto add = [&order](Var x) { order.push_back(x); };
  add(v.tok_emb);
  add(v.pos_emb);
  add(v.cond_w);
  add(v.cond_b);
  add(v.slot_emb);
  add(v.null_cond);
  add(v.t_w);
  add(v.t_b);
  if (p.config.timestep_mode == TimestepMode::kLearned) add(v.t_table);
  for (const DenoiserLayerVars& lv : v.layers) {
    add(lv.wq);
    add(lv.bq);
    add(lv.wk);
    add(lv.bk);
    add(lv.wv);
    add(lv.bv);
    add(lv.wo);
    add(lv.bo);
    add(lv.ada1_w);
    add(lv.ada1_b);
    add(lv.ada2_w);
    add(lv.ada2_b);
    add(lv.ln_cross_g);
    add(lv.ln_cross_b);
    add(lv.xq_w);
    add(lv.xq_b);
    add(lv.xk_w);
    add(lv.xk_b);
    add(lv.xv_w);
    add(lv.xv_b);
    add(lv.xo_w);
    add(lv.xo_b);
    add(lv.ff1_w);
    add(lv.ff1_b);
    add(lv.ff2_w);
    add(lv.ff2_b);
  }
  add(v.final_g);
  add(v.final_b);
  add(v.out_w);
  add(v.out_b);
  add(v.len1_w);
  add(v.len1_b);
  add(v.len2_w);
  add(v.len2_b);
  std::vector<Tensor<S>> grads;
  grads.reserve(order.size());
  for (Var x : order) grads.push_back(tape.grad(x));
  return grads;
}

/// One denoiser invocation over a flattened batch.
template <typename S>
struct ForwardBatch {
  int batch = 0;
  int l = 0;                            // sequence positions per example
  std::vector<int> token_ids;           // batch * l
  std::vector<double> p_effective;      // batch
  Tensor<S> cond;                       // (batch * cond_slots) x cond_dim
  std::vector<std::uint8_t> cond_null;  // batch; set = substitute null embedding
  Tensor<S> self_mask;                  // {batch, l, l} additive
};

/// Casts scene features (zero rows for null examples) into the batch layout.
template <typename S>
Tensor<S> pack_condition(const std::vector<const SceneFeatures*>& scenes,
                         const std::vector<std::uint8_t>& null_flags) {
  if (scenes.size() != null_flags.size())
    throw UsageError("pack_condition: " + std::to_string(scenes.size()) + " scenes vs " +
                     std::to_string(null_flags.size()) + " null flags");
  Tensor<S> out = Tensor<S>::zeros({(int)scenes.size() * kCondSlots, kCondFeatureDim});
  for (std::size_t b = 0; b < scenes.size(); ++b) {
    if (null_flags[b]) continue;
    if (!scenes[b]) throw UsageError("pack_condition: missing scene features");
    for (int i = 0; i < kCondSlots * kCondFeatureDim; ++i)
      out.data[(std::int64_t)b * kCondSlots * kCondFeatureDim + i] =
          (S)scenes[b]->data[(std::size_t)i];
  }
  return out;
}

struct DenoiserOutput {
  Var logits;   // (batch * l) x vocab
  Var summary;  // batch x d_model, the projected condition summary slot
};

struct ConditionTokens {
  Var tokens;   // (batch * cond_slots) x d_model
  Var summary;  // batch x d_model
};

/// Project condition features, add slot embeddings, substitute the learned
/// null embedding on image-free rows, and pool the summary. Shared by the
/// full forward pass and the standalone length predictor so both see
/// identical values.
///
/// The summary is a mean over the example's condition tokens taken after a
/// nonlinearity. A linear mean would reduce to a function of the attribute
/// histogram (the attribute-to-cell pairing cancels out of the sum), which
/// cannot tell one-word relations from two-word ones, so exact lengths
/// would be capped well below their target.
template <typename S>
ConditionTokens encode_condition(Tape<S>& tape, const DenoiserVars& v, const DenoiserConfig& cfg,
                                 const Tensor<S>& cond, const std::vector<std::uint8_t>& null_flags) {
  using namespace ops;
  int b = (int)null_flags.size();
  if (cond.shape != Shape{b * cfg.cond_slots, cfg.cond_dim})
    throw UsageError("condition: shape " + shape_str(cond.shape) + " for batch " +
                     std::to_string(b));
  Var c = add_rowvec(tape, matmul(tape, tape.leaf(cond), v.cond_w), v.cond_b);
  c = add_tiled_rows(tape, c, v.slot_emb);
  c = blend_rows(tape, c, v.null_cond, null_flags, cfg.cond_slots);
  Tensor<S> pool = Tensor<S>::zeros({b, b * cfg.cond_slots});
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < cfg.cond_slots; ++j)
      pool.data[(std::int64_t)i * b * cfg.cond_slots + i * cfg.cond_slots + j] =
          S(1) / S(cfg.cond_slots);
  return {c, matmul(tape, tape.leaf(pool), gelu(tape, c))};
}

namespace detail {

template <typename S>
void check_finite(const Tensor<S>& t, int layer) {
  if (!t.data.isFinite().all())
    throw std::runtime_error("denoiser: non-finite activation in layer " +
                             std::to_string(layer));
}

}  // namespace detail

template <typename S>
DenoiserOutput forward(Tape<S>& tape, const DenoiserVars& v, const DenoiserConfig& cfg,
                       const ForwardBatch<S>& in) {
  int b = in.batch, l = in.l, d = cfg.d_model;
  if (b < 1 || l < 1 || l > cfg.l_max)
    throw UsageError("forward: batch " + std::to_string(b) + " x " + std::to_string(l) +
                     " against capacity " + std::to_string(cfg.l_max));
  if ((int)in.token_ids.size() != b * l || (int)in.p_effective.size() != b ||
      (int)in.cond_null.size() != b)
    throw UsageError("forward: batch arrays disagree with batch=" + std::to_string(b) +
                     " l=" + std::to_string(l));
  for (int id : in.token_ids)
    if (id < 0 || id >= cfg.vocab)
      throw UsageError("forward: token id " + std::to_string(id) + " outside vocabulary");
  if (in.cond.shape != Shape{b * cfg.cond_slots, cfg.cond_dim})
    throw UsageError("forward: condition shape " + shape_str(in.cond.shape));
  if (in.self_mask.shape != Shape{b, l, l})
    throw UsageError("forward: mask shape " + shape_str(in.self_mask.shape));

  using namespace ops;

  // Token stream.
  Var x = gather_rows(tape, v.tok_emb, in.token_ids);
  std::vector<int> pos_ids((std::size_t)l);
  for (int i = 0; i < l; ++i) pos_ids[(std::size_t)i] = i;
  x = add_tiled_rows(tape, x, gather_rows(tape, v.pos_emb, pos_ids));

  ConditionTokens ct = encode_condition(tape, v, cfg, in.cond, in.cond_null);
  Var cond = ct.tokens;
  Var summary = ct.summary;

  // Timestep features.
  Var pe;
  if (cfg.timestep_mode == TimestepMode::kLearned) {
    std::vector<int> idx((std::size_t)b);
    for (int i = 0; i < b; ++i) {
      double p = in.p_effective[(std::size_t)i];
      int t = (int)std::lround(p * (double)cfg.total_steps / cfg.step_scale);
      idx[(std::size_t)i] = std::min(std::max(t, 0), cfg.total_steps);
    }
    pe = gather_rows(tape, v.t_table, idx);
  } else {
    Tensor<S> rows(Shape{b, d});
    for (int i = 0; i < b; ++i) {
      double p = cfg.timestep_mode == TimestepMode::kNone ? 0.0 : in.p_effective[(std::size_t)i];
      rows.mat().row(i) = timestep_embedding<S>(p, d).mat().row(0);
    }
    pe = tape.leaf(std::move(rows));
  }
  Var tfeat = silu(tape, add_rowvec(tape, matmul(tape, pe, v.t_w), v.t_b));

  for (std::size_t li = 0; li < v.layers.size(); ++li) {
    const DenoiserLayerVars& lp = v.layers[li];
    // Masked self-attention under AdaLN modulation.
    Var ss1 = add_rowvec(tape, matmul(tape, tfeat, lp.ada1_w), lp.ada1_b);
    Var h = adaln_modulate(tape, layernorm_plain(tape, x), ss1, l);
    Var q = add_rowvec(tape, matmul(tape, h, lp.wq), lp.bq);
    Var k = add_rowvec(tape, matmul(tape, h, lp.wk), lp.bk);
    Var val = add_rowvec(tape, matmul(tape, h, lp.wv), lp.bv);
    Var attn = attention(tape, q, k, val, &in.self_mask, b, cfg.heads);
    x = add(tape, x, add_rowvec(tape, matmul(tape, attn, lp.wo), lp.bo));

    // Cross-attention over the condition slots.
    Var ch = layernorm(tape, x, lp.ln_cross_g, lp.ln_cross_b);
    Var cq = add_rowvec(tape, matmul(tape, ch, lp.xq_w), lp.xq_b);
    Var ck = add_rowvec(tape, matmul(tape, cond, lp.xk_w), lp.xk_b);
    Var cv = add_rowvec(tape, matmul(tape, cond, lp.xv_w), lp.xv_b);
    Var cattn = attention(tape, cq, ck, cv, static_cast<const Tensor<S>*>(nullptr), b, cfg.heads);
    x = add(tape, x, add_rowvec(tape, matmul(tape, cattn, lp.xo_w), lp.xo_b));

    // Feed-forward, AdaLN again.
    Var ss2 = add_rowvec(tape, matmul(tape, tfeat, lp.ada2_w), lp.ada2_b);
    Var f = adaln_modulate(tape, layernorm_plain(tape, x), ss2, l);
    f = gelu(tape, add_rowvec(tape, matmul(tape, f, lp.ff1_w), lp.ff1_b));
    f = add_rowvec(tape, matmul(tape, f, lp.ff2_w), lp.ff2_b);
    x = add(tape, x, f);
    diffcap::detail::check_finite(tape.val(x), (int)li);
  }

  x = layernorm(tape, x, v.final_g, v.final_b);
  Var logits = add_rowvec(tape, matmul(tape, x, v.out_w), v.out_b);
  diffcap::detail::check_finite(tape.val(logits), (int)v.layers.size());
  return {logits, summary};
}

/// Length head: two-layer perceptron on the condition summary, gradient
/// flow back toward the condition encoder severed.
template <typename S>
Var predict_length_logits(Tape<S>& tape, const DenoiserVars& v, Var summary) {
  using namespace ops;
  Var cut = detach(tape, summary);
  Var h = gelu(tape, add_rowvec(tape, matmul(tape, cut, v.len1_w), v.len1_b));
  return add_rowvec(tape, matmul(tape, h, v.len2_w), v.len2_b);
}

/// Causal decoding view of the same network: lower-triangular attention,
/// timestep conditioning pinned at p = 0, no CAM. token_ids holds the
/// shifted input rows; logits at position i score the token at i.
template <typename S>
DenoiserOutput forward_ar(Tape<S>& tape, const DenoiserVars& v, const DenoiserConfig& cfg,
                          int batch, const std::vector<int>& token_ids,
                          const std::vector<std::uint8_t>& pad_flags, const Tensor<S>& cond,
                          const std::vector<std::uint8_t>& cond_null) {
  int l = batch > 0 ? (int)token_ids.size() / batch : 0;
  if (batch * l != (int)token_ids.size() || (int)pad_flags.size() != (int)token_ids.size())
    throw UsageError("forward_ar: ragged inputs");
  std::vector<AttentionMask> masks;
  std::vector<std::uint8_t> no_mask((std::size_t)l, 0);
  for (int bi = 0; bi < batch; ++bi) {
    std::vector<std::uint8_t> pads(pad_flags.begin() + (std::size_t)bi * l,
                                   pad_flags.begin() + (std::size_t)(bi + 1) * l);
    masks.push_back(build_self_mask(no_mask, pads, AttnMaskMode::kCausal));
  }
  ForwardBatch<S> in;
  in.batch = batch;
  in.l = l;
  in.token_ids = token_ids;
  in.p_effective.assign((std::size_t)batch, 0.0);
  in.cond = cond;
  in.cond_null = cond_null;
  in.self_mask = masks_to_additive<S>(masks);
  return forward(tape, v, cfg, in);
}

/// Bitwise-exact promotion of a single-precision parameter set: every f32
/// value is representable in f64, so the widened model evaluates the same
/// function the f32 model does, just in higher precision.
inline DenoiserParams<double> widen(const DenoiserParams<float>& p) {
  Rng scratch(0);
  DenoiserParams<double> out = DenoiserParams<double>::init(p.config, scratch);
  std::vector<const Tensor<float>*> src;
  p.visit([&src](const std::string&, const Tensor<float>& t) { src.push_back(&t); });
  std::size_t i = 0;
  out.visit([&src, &i](const std::string&, Tensor<double>& t) { t = widen(*src[i++]); });
  if (i != src.size()) throw UsageError("widen: parameter walk mismatch");
  return out;
}

}  // namespace diffcap
