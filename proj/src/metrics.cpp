#include "diffcap/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "diffcap/error.hpp"

namespace diffcap {

double token_accuracy(const std::vector<int>& pred, const std::vector<int>& ref) {
  if (pred.empty() && ref.empty()) return 1.0;
  std::size_t overlap = std::min(pred.size(), ref.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < overlap; ++i)
    if (pred[i] == ref[i]) ++hits;
  return (double)hits / (double)std::max(pred.size(), ref.size());
}

double bleu4(const std::vector<std::vector<int>>& candidates,
             const std::vector<std::vector<int>>& references) {
  if (candidates.empty() || candidates.size() != references.size())
    throw UsageError("bleu4: " + std::to_string(candidates.size()) + " candidates vs " +
                     std::to_string(references.size()) + " references");

  // n-grams packed into 64 bits, 16 per token id.
  auto ngram_counts = [](const std::vector<int>& seq, int n) {
    std::unordered_map<std::uint64_t, std::int64_t> counts;
    if ((int)seq.size() >= n) {
      for (std::size_t i = 0; i + (std::size_t)n <= seq.size(); ++i) {
        std::uint64_t key = 0;
        for (int j = 0; j < n; ++j)
          key = (key << 16) | (std::uint64_t)(seq[i + (std::size_t)j] & 0xffff);
        ++counts[key];
      }
    }
    return counts;
  };

  std::int64_t match[4] = {0, 0, 0, 0};
  std::int64_t total[4] = {0, 0, 0, 0};
  std::int64_t cand_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += (std::int64_t)candidates[i].size();
    ref_len += (std::int64_t)references[i].size();
    for (int n = 1; n <= 4; ++n) {
      auto cc = ngram_counts(candidates[i], n);
      auto rc = ngram_counts(references[i], n);
      for (auto& [key, count] : cc) {
        total[n - 1] += count;
        auto it = rc.find(key);
        if (it != rc.end()) match[n - 1] += std::min(count, it->second);
      }
    }
  }

  if (total[0] == 0 || match[0] == 0) return 0.0;
  double log_prec = std::log((double)match[0] / (double)total[0]);
  for (int n = 2; n <= 4; ++n)
    log_prec += std::log(((double)match[n - 1] + 1.0) / ((double)total[n - 1] + 1.0));
  double bp = cand_len < ref_len ? std::exp(1.0 - (double)ref_len / (double)cand_len) : 1.0;
  return bp * std::exp(log_prec / 4.0);
}

std::vector<double> LengthErrorHistogram::mass() const {
  std::int64_t total = 0;
  for (std::int64_t c : counts) total += c;
  std::vector<double> out(counts.size(), 0.0);
  if (total > 0)
    for (std::size_t i = 0; i < counts.size(); ++i) out[i] = (double)counts[i] / (double)total;
  return out;
}

LengthErrorHistogram length_error_histogram(const std::vector<int>& pred_lengths,
                                            const std::vector<int>& true_lengths) {
  if (pred_lengths.size() != true_lengths.size())
    throw UsageError("length_error_histogram: " + std::to_string(pred_lengths.size()) +
                     " predictions vs " + std::to_string(true_lengths.size()) + " truths");
  LengthErrorHistogram h;
  h.edges = {0.0, 0.05, 0.1, 0.15, 0.2, 0.25};
  h.counts.assign(h.edges.size(), 0);
  for (std::size_t i = 0; i < pred_lengths.size(); ++i) {
    if (true_lengths[i] <= 0) {
      ++h.excluded;
      continue;
    }
    double err = std::fabs((double)pred_lengths[i] - (double)true_lengths[i]) /
                 (double)true_lengths[i];
    // Left-closed bins: [0,0.05), [0.05,0.1), ..., [0.25, inf).
    std::size_t bin = h.counts.size() - 1;
    for (std::size_t e = 1; e < h.edges.size(); ++e) {
      if (err < h.edges[e]) {
        bin = e - 1;
        break;
      }
    }
    ++h.counts[bin];
  }
  return h;
}

double infill_accuracy(const std::vector<int>& filled, const std::vector<int>& reference,
                       const std::vector<int>& hole_positions) {
  if (hole_positions.empty()) return 1.0;
  std::int64_t hits = 0;
  for (int pos : hole_positions) {
    if (pos < 0 || pos >= (int)filled.size() || pos >= (int)reference.size())
      throw UsageError("infill_accuracy: hole position " + std::to_string(pos) +
                       " outside the sequences");
    if (filled[(std::size_t)pos] == reference[(std::size_t)pos]) ++hits;
  }
  return (double)hits / (double)hole_positions.size();
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["token_accuracy"] = token_acc;
  j["exact_match"] = exact_match;
  j["bleu4"] = bleu;
  j["sample_count"] = sample_count;
  j["length_error"] = {{"edges", length_hist.edges},
                       {"counts", length_hist.counts},
                       {"mass", length_hist.mass()},
                       {"excluded", length_hist.excluded}};
  if (infill_acc >= 0.0) j["infill_accuracy"] = infill_acc;
  return j.dump(2);
}

}  // namespace diffcap
