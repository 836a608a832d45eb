#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace diffcap {

/// Position-wise accuracy over token id sequences: matches within the
/// overlap, divided by max(len_pred, len_ref). Two empty sequences count
/// as a perfect match.
double token_accuracy(const std::vector<int>& pred, const std::vector<int>& ref);

/// Corpus BLEU-4 over token id sequences: modified n-gram precisions with
/// add-one smoothing for n >= 2, geometric mean, brevity penalty
/// exp(1 - r/c) when the candidate corpus is shorter than the reference.
double bleu4(const std::vector<std::vector<int>>& candidates,
             const std::vector<std::vector<int>>& references);

struct LengthErrorHistogram {
  std::vector<double> edges;           // left bin edges; the last bin is open
  std::vector<std::int64_t> counts;
  std::int64_t excluded = 0;           // pairs with ground-truth length zero

  std::vector<double> mass() const;    // counts normalized to sum 1
};

/// Bins |pred - truth| / truth at left-closed edges
/// {0, 0.05, 0.1, 0.15, 0.2, 0.25, inf}.
LengthErrorHistogram length_error_histogram(const std::vector<int>& pred_lengths,
                                            const std::vector<int>& true_lengths);

/// Fraction of hole positions whose filled token matches the reference.
/// An empty hole set counts as 1.
double infill_accuracy(const std::vector<int>& filled, const std::vector<int>& reference,
                       const std::vector<int>& hole_positions);

struct EvalReport {
  double token_acc = 0.0;
  double exact_match = 0.0;
  double bleu = 0.0;
  LengthErrorHistogram length_hist;
  double infill_acc = -1.0;  // negative = not measured
  int sample_count = 0;

  std::string to_json() const;
};

}  // namespace diffcap
