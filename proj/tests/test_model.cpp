#include <doctest.h>

#include <cmath>
#include <vector>

#include "diffcap/gradcheck.hpp"
#include "diffcap/model.hpp"
#include "diffcap/train.hpp"

using namespace diffcap;

namespace {

DenoiserConfig tiny_config() {
  DenoiserConfig cfg;
  cfg.layers = 2;
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.d_ff = 32;
  cfg.l_max = 6;
  cfg.vocab = 9;  // seven text tokens plus MASK and PAD
  cfg.total_steps = 8;
  cfg.step_scale = 100.0;
  return cfg;
}

Vocabulary tiny_vocab() {
  std::vector<std::string> words;
  for (int i = 0; i < 7; ++i) words.push_back("w" + std::to_string(i));
  words.push_back("[MASK]");
  words.push_back("[PAD]");
  return Vocabulary::from_words(words);
}

template <typename S>
ForwardBatch<S> tiny_batch(const DenoiserConfig& cfg, const Vocabulary& vocab,
                           const std::vector<SceneFeatures>& feats, std::uint64_t seed) {
  Rng rng(seed);
  int b = (int)feats.size();
  int l = cfg.l_max;
  ForwardBatch<S> in;
  in.batch = b;
  in.l = l;
  std::vector<AttentionMask> masks;
  for (int e = 0; e < b; ++e) {
    std::vector<std::uint8_t> mask_flags((std::size_t)l, 0), pad_flags((std::size_t)l, 0);
    int len = 4 + (int)rng.uniform_int(3);  // 4..6 real tokens
    for (int j = 0; j < l; ++j) {
      if (j >= len) {
        in.token_ids.push_back(vocab.pad_id());
        pad_flags[(std::size_t)j] = 1;
      } else if (rng.uniform() < 0.4) {
        in.token_ids.push_back(vocab.mask_id());
        mask_flags[(std::size_t)j] = 1;
      } else {
        in.token_ids.push_back((int)rng.uniform_int(7));
      }
    }
    masks.push_back(build_self_mask(mask_flags, pad_flags, AttnMaskMode::kCam));
    in.p_effective.push_back((double)(1 + (int)rng.uniform_int(cfg.total_steps)) *
                             cfg.step_scale / cfg.total_steps);
    in.cond_null.push_back(0);
  }
  in.self_mask = masks_to_additive<S>(masks);
  std::vector<const SceneFeatures*> ptrs;
  for (const SceneFeatures& f : feats) ptrs.push_back(&f);
  in.cond = pack_condition<S>(ptrs, in.cond_null);
  return in;
}

std::vector<SceneFeatures> tiny_scenes(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SceneFeatures> out;
  for (int i = 0; i < n; ++i) out.push_back(scene_features(sample_scene(rng)));
  return out;
}

bool mask_rule_oracle(AttnMaskMode mode, bool mq, bool mk, bool pq, bool pk, int q, int k) {
  if (q == k) return true;
  if (pq || pk) return false;
  switch (mode) {
    case AttnMaskMode::kFull: return true;
    case AttnMaskMode::kCam: return !mk;
    case AttnMaskMode::kCamM2mOnly: return !(mq && mk);
    case AttnMaskMode::kCamT2mOnly: return !(!mq && mk);
    case AttnMaskMode::kCausal: return k <= q;
  }
  return true;
}

}  // namespace

TEST_CASE("attention masks match brute-force rule evaluation for every pattern") {
  for (AttnMaskMode mode : {AttnMaskMode::kFull, AttnMaskMode::kCam, AttnMaskMode::kCamM2mOnly,
                            AttnMaskMode::kCamT2mOnly, AttnMaskMode::kCausal}) {
    for (int l = 1; l <= 8; ++l) {
      for (int bits = 0; bits < (1 << l); ++bits) {
        std::vector<std::uint8_t> mask((std::size_t)l), pad((std::size_t)l, 0);
        for (int j = 0; j < l; ++j) mask[(std::size_t)j] = (bits >> j) & 1;
        AttentionMask m = build_self_mask(mask, pad, mode);
        for (int q = 0; q < l; ++q) {
          bool any = false;
          for (int k = 0; k < l; ++k) {
            bool want = mask_rule_oracle(mode, mask[(std::size_t)q], mask[(std::size_t)k],
                                         false, false, q, k);
            if (m.at(q, k) != want) {
              CAPTURE(l);
              CAPTURE(bits);
              CAPTURE(q);
              CAPTURE(k);
              CHECK(m.at(q, k) == want);
            }
            any = any || m.at(q, k);
          }
          CHECK(any);  // no row is ever fully blocked
        }
      }
    }
  }
}

TEST_CASE("attention masks handle PAD and MASK jointly") {
  int l = 4;
  for (AttnMaskMode mode : {AttnMaskMode::kCam, AttnMaskMode::kCamM2mOnly,
                            AttnMaskMode::kCamT2mOnly, AttnMaskMode::kCausal}) {
    for (int mb = 0; mb < (1 << l); ++mb) {
      for (int pb = 0; pb < (1 << l); ++pb) {
        std::vector<std::uint8_t> mask((std::size_t)l), pad((std::size_t)l);
        for (int j = 0; j < l; ++j) {
          mask[(std::size_t)j] = (mb >> j) & 1;
          pad[(std::size_t)j] = (pb >> j) & 1;
        }
        AttentionMask m = build_self_mask(mask, pad, mode);
        for (int q = 0; q < l; ++q)
          for (int k = 0; k < l; ++k)
            CHECK(m.at(q, k) == mask_rule_oracle(mode, mask[(std::size_t)q],
                                                 mask[(std::size_t)k], pad[(std::size_t)q],
                                                 pad[(std::size_t)k], q, k));
      }
    }
  }
  CHECK_THROWS_AS(build_self_mask({1, 0}, {0}, AttnMaskMode::kCam), UsageError);
}

TEST_CASE("additive masks place zero on allowed and a large penalty elsewhere") {
  AttentionMask m = build_self_mask({0, 1}, {0, 0}, AttnMaskMode::kCam);
  Tensor<float> add = masks_to_additive<float>({m, m});
  REQUIRE((add.shape == Shape{2, 2, 2}));
  CHECK(add.data[0] == 0.0f);             // text self
  CHECK(add.data[1] == (float)kMaskedScore);  // text -> mask blocked
  CHECK(add.data[2] == 0.0f);             // mask -> text
  CHECK(add.data[3] == 0.0f);             // mask self
}

TEST_CASE("timestep embedding splits sine and cosine halves") {
  Tensor<double> e = timestep_embedding<double>(0.0, 8);
  for (int i = 0; i < 4; ++i) CHECK(e.data[i] == 0.0);
  for (int i = 4; i < 8; ++i) CHECK(e.data[i] == 1.0);
  Tensor<double> f = timestep_embedding<double>(100.0, 4);
  CHECK(f.data[0] == doctest::Approx(std::sin(100.0)).epsilon(1e-15));
  CHECK(f.data[1] == doctest::Approx(std::sin(100.0 / std::sqrt(10000.0))).epsilon(1e-15));
  CHECK(f.data[2] == doctest::Approx(std::cos(100.0 / 10000.0)).epsilon(1e-15));
  CHECK(f.data[3] ==
        doctest::Approx(std::cos(100.0 / std::pow(10000.0, 1.5))).epsilon(1e-15));
  CHECK_THROWS_AS(timestep_embedding<double>(-1.0, 4), UsageError);
}

TEST_CASE("parameter initialization is deterministic and fully visited") {
  DenoiserConfig cfg = tiny_config();
  Rng r1(5), r2(5);
  DenoiserParams<float> a = DenoiserParams<float>::init(cfg, r1);
  DenoiserParams<float> b = DenoiserParams<float>::init(cfg, r2);
  bool equal = true;
  std::vector<std::string> names;
  a.visit([&](const std::string& name, Tensor<float>& t) {
    names.push_back(name);
    (void)t;
  });
  std::size_t i = 0;
  b.visit([&](const std::string& name, Tensor<float>& t) {
    if (names[i] != name) equal = false;
    ++i;
    (void)t;
  });
  CHECK(equal);
  CHECK(a.total_params() == b.total_params());
  CHECK(a.total_params() > 0);

  DenoiserConfig learned = cfg;
  learned.timestep_mode = TimestepMode::kLearned;
  Rng r3(5);
  DenoiserParams<float> c = DenoiserParams<float>::init(learned, r3);
  CHECK(c.total_params() ==
        a.total_params() + (std::int64_t)(cfg.total_steps + 1) * cfg.d_model);
}

TEST_CASE("forward is deterministic and independent of batch composition") {
  DenoiserConfig cfg = tiny_config();
  Vocabulary vocab = tiny_vocab();
  Rng prng(9);
  DenoiserParams<float> params = DenoiserParams<float>::init(cfg, prng);
  std::vector<SceneFeatures> feats = tiny_scenes(3, 21);
  ForwardBatch<float> in = tiny_batch<float>(cfg, vocab, feats, 33);

  auto run = [&](const ForwardBatch<float>& fb) {
    Tape<float> tape;
    DenoiserVars v = lift(tape, params);
    DenoiserOutput out = forward(tape, v, cfg, fb);
    return tape.val(out.logits);
  };
  Tensor<float> l1 = run(in);
  Tensor<float> l2 = run(in);
  CHECK((l1.data == l2.data).all());

  // The first example alone reproduces its rows from the triple batch.
  ForwardBatch<float> solo;
  solo.batch = 1;
  solo.l = in.l;
  solo.token_ids.assign(in.token_ids.begin(), in.token_ids.begin() + in.l);
  solo.p_effective = {in.p_effective[0]};
  solo.cond_null = {in.cond_null[0]};
  solo.cond = Tensor<float>(Shape{cfg.cond_slots, cfg.cond_dim});
  for (int i = 0; i < cfg.cond_slots * cfg.cond_dim; ++i) solo.cond.data[i] = in.cond.data[i];
  solo.self_mask = Tensor<float>(Shape{1, in.l, in.l});
  for (int i = 0; i < in.l * in.l; ++i) solo.self_mask.data[i] = in.self_mask.data[i];
  // GEMM blocking may differ with the row count, so allow last-ulp drift.
  Tensor<float> ls = run(solo);
  for (int r = 0; r < in.l; ++r)
    for (int c = 0; c < cfg.vocab; ++c)
      CHECK(ls(r, c) == doctest::Approx(l1(r, c)).epsilon(1e-5));
}

TEST_CASE("the timestep value modulates the network") {
  DenoiserConfig cfg = tiny_config();
  Vocabulary vocab = tiny_vocab();
  Rng prng(10);
  DenoiserParams<float> params = DenoiserParams<float>::init(cfg, prng);
  std::vector<SceneFeatures> feats = tiny_scenes(1, 22);
  ForwardBatch<float> in = tiny_batch<float>(cfg, vocab, feats, 34);
  auto run = [&](double p) {
    ForwardBatch<float> fb = in;
    fb.p_effective = {p};
    Tape<float> tape;
    DenoiserVars v = lift(tape, params);
    return tape.val(forward(tape, v, cfg, fb).logits);
  };
  Tensor<float> a = run(12.5);
  Tensor<float> b = run(100.0);
  CHECK(!((a.data == b.data).all()));
}

TEST_CASE("null condition rows erase the scene from the forward pass") {
  DenoiserConfig cfg = tiny_config();
  Vocabulary vocab = tiny_vocab();
  Rng prng(11);
  DenoiserParams<float> params = DenoiserParams<float>::init(cfg, prng);
  std::vector<SceneFeatures> f1 = tiny_scenes(1, 23);
  std::vector<SceneFeatures> f2 = tiny_scenes(1, 24);
  auto run = [&](const std::vector<SceneFeatures>& feats, std::uint8_t null_flag) {
    ForwardBatch<float> in = tiny_batch<float>(cfg, vocab, feats, 35);
    in.cond_null = {null_flag};
    Tape<float> tape;
    DenoiserVars v = lift(tape, params);
    return tape.val(forward(tape, v, cfg, in).logits);
  };
  Tensor<float> with1 = run(f1, 1);
  Tensor<float> with2 = run(f2, 1);
  CHECK((with1.data == with2.data).all());  // scene features ignored
  Tensor<float> cond1 = run(f1, 0);
  CHECK(!((cond1.data == with1.data).all()));  // but conditioning matters
}

TEST_CASE("tokens at PAD positions cannot leak into live positions") {
  DenoiserConfig cfg = tiny_config();
  Vocabulary vocab = tiny_vocab();
  Rng prng(12);
  DenoiserParams<float> params = DenoiserParams<float>::init(cfg, prng);
  std::vector<SceneFeatures> feats = tiny_scenes(1, 25);

  ForwardBatch<float> in;
  in.batch = 1;
  in.l = cfg.l_max;
  in.token_ids = {0, 1, vocab.mask_id(), 2, vocab.pad_id(), vocab.pad_id()};
  in.p_effective = {cfg.step_scale * 0.5};
  in.cond_null = {0};
  std::vector<const SceneFeatures*> ptrs = {&feats[0]};
  in.cond = pack_condition<float>(ptrs, in.cond_null);
  std::vector<std::uint8_t> mask_flags = {0, 0, 1, 0, 0, 0}, pad_flags = {0, 0, 0, 0, 1, 1};
  in.self_mask = masks_to_additive<float>({build_self_mask(mask_flags, pad_flags, AttnMaskMode::kCam)});

  auto run = [&](const ForwardBatch<float>& fb) {
    Tape<float> tape;
    DenoiserVars v = lift(tape, params);
    return tape.val(forward(tape, v, cfg, fb).logits);
  };
  Tensor<float> base = run(in);
  ForwardBatch<float> tweaked = in;
  tweaked.token_ids[4] = 3;  // different token under the same PAD flag
  Tensor<float> after = run(tweaked);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < cfg.vocab; ++c) CHECK(after(r, c) == base(r, c));
}

TEST_CASE("length loss reaches the length head but never the condition encoder") {
  DenoiserConfig cfg = tiny_config();
  Vocabulary vocab = tiny_vocab();
  Rng prng(13);
  DenoiserParams<float> params = DenoiserParams<float>::init(cfg, prng);
  std::vector<SceneFeatures> feats = tiny_scenes(2, 26);
  ForwardBatch<float> in = tiny_batch<float>(cfg, vocab, feats, 36);

  auto grads_for = [&](bool length_only) {
    Tape<float> tape;
    DenoiserVars v = lift(tape, params);
    DenoiserOutput out = forward(tape, v, cfg, in);
    Var loss;
    if (length_only) {
      Var len_logits = predict_length_logits(tape, v, out.summary);
      loss = ops::cross_entropy(tape, len_logits, {2, 3}, {1, 1}, 0);
    } else {
      std::vector<int> targets(in.token_ids.size(), 1);
      std::vector<std::uint8_t> active(in.token_ids.size(), 1);
      loss = ops::cross_entropy(tape, out.logits, targets, active, in.l);
    }
    tape.backward(loss);
    struct Picked {
      Tensor<float> cond_w, slot, null, len1, len2;
    } p{tape.grad(v.cond_w), tape.grad(v.slot_emb), tape.grad(v.null_cond),
        tape.grad(v.len1_w), tape.grad(v.len2_w)};
    return p;
  };

  auto len_grads = grads_for(true);
  CHECK((len_grads.cond_w.data == 0.0f).all());
  CHECK((len_grads.slot.data == 0.0f).all());
  CHECK(len_grads.len1.data.abs().maxCoeff() > 0.0f);
  CHECK(len_grads.len2.data.abs().maxCoeff() > 0.0f);

  auto diff_grads = grads_for(false);
  CHECK(diff_grads.cond_w.data.abs().maxCoeff() > 0.0f);
  CHECK((diff_grads.len1.data == 0.0f).all());
}

TEST_CASE("the causal view cannot see the future") {
  DenoiserConfig cfg = tiny_config();
  Vocabulary vocab = tiny_vocab();
  Rng prng(14);
  DenoiserParams<float> params = DenoiserParams<float>::init(cfg, prng);
  std::vector<SceneFeatures> feats = tiny_scenes(1, 27);
  std::vector<const SceneFeatures*> ptrs = {&feats[0]};
  std::vector<std::uint8_t> no_null = {0};
  Tensor<float> cond = pack_condition<float>(ptrs, no_null);

  std::vector<int> ids = {vocab.mask_id(), 0, 1, 2, 3, 4};
  std::vector<std::uint8_t> pads(6, 0);
  auto run = [&](const std::vector<int>& toks) {
    Tape<float> tape;
    DenoiserVars v = lift(tape, params);
    return tape.val(forward_ar(tape, v, cfg, 1, toks, pads, cond, no_null).logits);
  };
  Tensor<float> base = run(ids);
  std::vector<int> future = ids;
  future[5] = 6;  // change the last input token
  Tensor<float> after = run(future);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < cfg.vocab; ++c) CHECK(after(r, c) == base(r, c));
  bool last_differs = false;
  for (int c = 0; c < cfg.vocab; ++c)
    if (after(5, c) != base(5, c)) last_differs = true;
  CHECK(last_differs);
}

TEST_CASE("condition encoding is identical inside and outside the full forward") {
  DenoiserConfig cfg = tiny_config();
  Vocabulary vocab = tiny_vocab();
  Rng prng(15);
  DenoiserParams<float> params = DenoiserParams<float>::init(cfg, prng);
  std::vector<SceneFeatures> feats = tiny_scenes(2, 28);
  ForwardBatch<float> in = tiny_batch<float>(cfg, vocab, feats, 37);

  Tape<float> t1;
  DenoiserVars v1 = lift(t1, params);
  Tensor<float> inside = t1.val(forward(t1, v1, cfg, in).summary);

  Tape<float> t2;
  DenoiserVars v2 = lift(t2, params);
  Tensor<float> outside = t2.val(encode_condition(t2, v2, cfg, in.cond, in.cond_null).summary);
  CHECK((inside.data == outside.data).all());
}

TEST_CASE("forward validates its inputs") {
  DenoiserConfig cfg = tiny_config();
  Vocabulary vocab = tiny_vocab();
  Rng prng(16);
  DenoiserParams<float> params = DenoiserParams<float>::init(cfg, prng);
  std::vector<SceneFeatures> feats = tiny_scenes(1, 29);
  ForwardBatch<float> good = tiny_batch<float>(cfg, vocab, feats, 38);
  Tape<float> tape;
  DenoiserVars v = lift(tape, params);

  ForwardBatch<float> bad = good;
  bad.token_ids[0] = 99;
  CHECK_THROWS_AS(forward(tape, v, cfg, bad), UsageError);
  bad = good;
  bad.p_effective.push_back(1.0);
  CHECK_THROWS_AS(forward(tape, v, cfg, bad), UsageError);
  bad = good;
  bad.self_mask = Tensor<float>::zeros({1, 2, 2});
  CHECK_THROWS_AS(forward(tape, v, cfg, bad), UsageError);
  bad = good;
  bad.cond = Tensor<float>::zeros({3, 3});
  CHECK_THROWS_AS(forward(tape, v, cfg, bad), UsageError);

  DenoiserConfig invalid = cfg;
  invalid.d_model = 15;  // not divisible by heads
  CHECK_THROWS_AS(invalid.validate(), UsageError);
}

TEST_CASE("the learned timestep table is consulted when enabled") {
  DenoiserConfig cfg = tiny_config();
  cfg.timestep_mode = TimestepMode::kLearned;
  Vocabulary vocab = tiny_vocab();
  Rng prng(17);
  DenoiserParams<float> params = DenoiserParams<float>::init(cfg, prng);
  std::vector<SceneFeatures> feats = tiny_scenes(1, 30);
  ForwardBatch<float> in = tiny_batch<float>(cfg, vocab, feats, 39);
  auto run = [&]() {
    Tape<float> tape;
    DenoiserVars v = lift(tape, params);
    return tape.val(forward(tape, v, cfg, in).logits);
  };
  Tensor<float> before = run();
  int t_idx = (int)std::lround(in.p_effective[0] * cfg.total_steps / cfg.step_scale);
  for (int d = 0; d < cfg.d_model; ++d) params.t_table(t_idx, d) += 0.5f;
  Tensor<float> after = run();
  CHECK(!((before.data == after.data).all()));
}

TEST_CASE("a frozen timestep mode ignores the step value") {
  DenoiserConfig cfg = tiny_config();
  cfg.timestep_mode = TimestepMode::kNone;
  Vocabulary vocab = tiny_vocab();
  Rng prng(18);
  DenoiserParams<float> params = DenoiserParams<float>::init(cfg, prng);
  std::vector<SceneFeatures> feats = tiny_scenes(1, 31);
  ForwardBatch<float> in = tiny_batch<float>(cfg, vocab, feats, 40);
  auto run = [&](double p) {
    ForwardBatch<float> fb = in;
    fb.p_effective = {p};
    Tape<float> tape;
    DenoiserVars v = lift(tape, params);
    return tape.val(forward(tape, v, cfg, fb).logits);
  };
  CHECK((run(12.5).data == run(87.5).data).all());
}

TEST_CASE("finite differences validate the full training loss on a small model") {
  DenoiserConfig cfg = tiny_config();
  Vocabulary vocab = tiny_vocab();
  Rng prng(19);
  DenoiserParams<double> params = DenoiserParams<double>::init(cfg, prng);
  std::vector<SceneFeatures> feats = tiny_scenes(2, 41);
  ForwardBatch<double> in = tiny_batch<double>(cfg, vocab, feats, 42);
  std::vector<int> targets;
  std::vector<std::uint8_t> active;
  Rng trng(43);
  for (std::size_t i = 0; i < in.token_ids.size(); ++i) {
    targets.push_back((int)trng.uniform_int(7));
    active.push_back(in.token_ids[i] == vocab.pad_id() ? 0 : 1);
  }
  std::vector<int> len_targets = {3, 5};
  std::vector<std::uint8_t> len_active = {1, 1};

  // The length head reads a detached condition summary, so its loss changes
  // with the condition encoder while contributing no gradient there. The
  // joint loss is therefore audited on every parameter except the encoder
  // tensors, which get their own sweep against the diffusion term alone.
  auto eval_joint = [&]() {
    Tape<double> tape;
    DenoiserVars v = lift(tape, params);
    DenoiserOutput out = forward(tape, v, cfg, in);
    Var ce = ops::cross_entropy(tape, out.logits, targets, active, in.l);
    Var lce = ops::cross_entropy(tape, predict_length_logits(tape, v, out.summary),
                                 len_targets, len_active, 0);
    Var loss = ops::add(tape, ce, ops::scale(tape, lce, 0.25));
    return (double)tape.val(loss).data[0];
  };
  auto eval_diffusion = [&]() {
    Tape<double> tape;
    DenoiserVars v = lift(tape, params);
    DenoiserOutput out = forward(tape, v, cfg, in);
    Var ce = ops::cross_entropy(tape, out.logits, targets, active, in.l);
    return (double)tape.val(ce).data[0];
  };

  Tape<double> tape;
  DenoiserVars v = lift(tape, params);
  DenoiserOutput out = forward(tape, v, cfg, in);
  Var ce = ops::cross_entropy(tape, out.logits, targets, active, in.l);
  Var lce = ops::cross_entropy(tape, predict_length_logits(tape, v, out.summary), len_targets,
                               len_active, 0);
  Var loss = ops::add(tape, ce, ops::scale(tape, lce, 0.25));
  tape.backward(loss);

  std::vector<std::pair<std::string, Tensor<double>*>> subset = {
      {"tok_emb", &params.tok_emb},
      {"pos_emb", &params.pos_emb},
      {"t_w", &params.t_w},
      {"layer0.wq", &params.layers[0].wq},
      {"layer0.ada1_w", &params.layers[0].ada1_w},
      {"layer0.xk_w", &params.layers[0].xk_w},
      {"layer0.ln_cross_g", &params.layers[0].ln_cross_g},
      {"layer1.ff1_w", &params.layers[1].ff1_w},
      {"final_g", &params.final_g},
      {"out_w", &params.out_w},
      {"len1_w", &params.len1_w},
      {"len2_b", &params.len2_b},
  };
  std::vector<Tensor<double>> analytic = {
      tape.grad(v.tok_emb),          tape.grad(v.pos_emb),
      tape.grad(v.t_w),              tape.grad(v.layers[0].wq),
      tape.grad(v.layers[0].ada1_w), tape.grad(v.layers[0].xk_w),
      tape.grad(v.layers[0].ln_cross_g), tape.grad(v.layers[1].ff1_w),
      tape.grad(v.final_g),          tape.grad(v.out_w),
      tape.grad(v.len1_w),           tape.grad(v.len2_b)};
  FdReport rep = fd_check<double>(subset, analytic, eval_joint, 1e-5, 1e-4, false);
  CHECK(rep.max_rel_err <= 1e-5);

  Tape<double> tape2;
  DenoiserVars v2 = lift(tape2, params);
  DenoiserOutput out2 = forward(tape2, v2, cfg, in);
  Var ce2 = ops::cross_entropy(tape2, out2.logits, targets, active, in.l);
  tape2.backward(ce2);
  std::vector<std::pair<std::string, Tensor<double>*>> encoder = {
      {"cond_w", &params.cond_w},
      {"cond_b", &params.cond_b},
      {"slot_emb", &params.slot_emb},
      {"null_cond", &params.null_cond},
  };
  std::vector<Tensor<double>> enc_analytic = {tape2.grad(v2.cond_w), tape2.grad(v2.cond_b),
                                              tape2.grad(v2.slot_emb),
                                              tape2.grad(v2.null_cond)};
  FdReport enc_rep = fd_check<double>(encoder, enc_analytic, eval_diffusion, 1e-5, 1e-4, false);
  CHECK(enc_rep.max_rel_err <= 1e-5);
}
