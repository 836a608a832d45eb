#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffcap/metrics.hpp"
#include "diffcap/sampler.hpp"

namespace diffcap {

/// One infilling problem: a template with MASK holes, the reference tokens,
/// and the hole positions to score.
struct InfillCase {
  TokenSeq tpl;
  std::vector<int> reference;
  std::vector<int> holes;
};

/// Color-word infilling over a split. Each caption is re-rendered with a
/// seeded random object order before its color words are masked out, so the
/// hidden word is not recoverable from the scene plus the left context
/// alone: a left-to-right decoder at the hole has not yet seen the shape
/// word that identifies the object, while a bidirectional denoiser has.
inline std::vector<InfillCase> build_color_infill_cases(
    const std::vector<const CaptionedScene*>& records, const Vocabulary& vocab, int l_max,
    std::uint64_t seed) {
  std::vector<InfillCase> cases;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const CaptionedScene* rec = records[i];
    Rng rng = Rng::derive(seed, (std::uint64_t)i);
    std::vector<int> order((std::size_t)rec->scene.objects.size());
    for (std::size_t j = 0; j < order.size(); ++j) order[j] = (int)j;
    for (std::size_t j = order.size(); j > 1; --j)
      std::swap(order[j - 1], order[(std::size_t)rng.uniform_int((int)j)]);
    Caption cap = render_caption_ordered(rec->scene, order);
    TokenSeq full = encode(cap.text, vocab, l_max);
    InfillCase c;
    c.reference.assign(full.ids.begin(), full.ids.begin() + full.length);
    c.tpl.length = full.length;
    c.tpl.ids = c.reference;
    for (int pos : cap.color_positions) {
      c.tpl.ids[(std::size_t)pos] = vocab.mask_id();
      c.holes.push_back(pos);
    }
    cases.push_back(std::move(c));
  }
  return cases;
}

/// Generation metrics for one split: sample (or greedily decode) a caption
/// per record, compare against the rendered references, and optionally run
/// the color-infill protocol. `ar_mode` switches to the causal decoder and
/// scores emitted lengths instead of the length head.
template <typename S>
EvalReport evaluate_split(const DenoiserParams<S>& params, const Vocabulary& vocab,
                          const NoiseSchedule& schedule, const SamplerConfig& scfg,
                          const std::vector<const CaptionedScene*>& split, bool ar_mode,
                          bool with_infill, std::uint64_t infill_seed) {
  if (split.empty()) throw UsageError("evaluate: empty split");
  CaptionSampler<S> sampler(params, vocab, schedule, scfg);

  std::vector<SceneFeatures> feats;
  std::vector<const SceneFeatures*> scenes;
  std::vector<std::vector<int>> refs;
  std::vector<int> true_lengths;
  feats.reserve(split.size());
  for (const CaptionedScene* rec : split) {
    feats.push_back(scene_features(rec->scene));
    TokenSeq enc = encode(rec->caption, vocab, params.config.l_max);
    refs.emplace_back(enc.ids.begin(), enc.ids.begin() + enc.length);
    true_lengths.push_back(enc.length);
  }
  for (const SceneFeatures& f : feats) scenes.push_back(&f);

  std::vector<TokenSeq> outs;
  std::vector<int> scored_lengths;
  if (ar_mode) {
    outs = sampler.decode_ar(scenes);
    for (const TokenSeq& seq : outs) scored_lengths.push_back(seq.length);
  } else {
    outs = sampler.sample(scenes, &true_lengths);
    scored_lengths = sampler.predict_lengths(scenes);
  }

  EvalReport rep;
  rep.sample_count = (int)split.size();
  std::vector<std::vector<int>> cands;
  int exact = 0;
  double acc_sum = 0.0;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    cands.push_back(outs[i].ids);
    acc_sum += token_accuracy(outs[i].ids, refs[i]);
    if (outs[i].ids == refs[i]) ++exact;
  }
  rep.token_acc = acc_sum / (double)outs.size();
  rep.exact_match = (double)exact / (double)outs.size();
  rep.bleu = bleu4(cands, refs);
  rep.length_hist = length_error_histogram(scored_lengths, true_lengths);

  if (with_infill) {
    std::vector<InfillCase> cases =
        build_color_infill_cases(split, vocab, params.config.l_max, infill_seed);
    std::vector<TokenSeq> templates;
    for (const InfillCase& c : cases) templates.push_back(c.tpl);
    std::vector<TokenSeq> filled =
        ar_mode ? sampler.ar_infill(scenes, templates) : sampler.infill(scenes, templates);
    std::int64_t hits = 0, total = 0;
    for (std::size_t i = 0; i < cases.size(); ++i) {
      for (int pos : cases[i].holes) {
        ++total;
        if (filled[i].ids[(std::size_t)pos] == cases[i].reference[(std::size_t)pos]) ++hits;
      }
    }
    rep.infill_acc = total > 0 ? (double)hits / (double)total : 1.0;
  }
  return rep;
}

}  // namespace diffcap
