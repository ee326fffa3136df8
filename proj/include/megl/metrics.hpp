#pragma once

#include <map>
#include <string>
#include <vector>

#include "megl/core.hpp"

namespace megl {

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

/// C x C counts, rows = true class, columns = predicted class.
class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(int64_t num_classes);

  void add(int64_t truth, int64_t predicted);
  void merge(const ConfusionAccumulator& other);

  int64_t num_classes() const { return num_classes_; }
  int64_t count(int64_t truth, int64_t predicted) const;
  int64_t total() const { return total_; }

 private:
  int64_t num_classes_;
  std::vector<int64_t> counts_;
  int64_t total_ = 0;
};

struct ClassificationReport {
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
};

/// Per-class precision and recall with 0/0 read as 0, F1 per class as the
/// harmonic mean (0 when P + R = 0), all macro-averaged over every class.
ClassificationReport classification_report(const ConfusionAccumulator& acc);

// ---------------------------------------------------------------------------
// Visual explanations
// ---------------------------------------------------------------------------

/// IoU of the two maps binarized at `value >= threshold`. Both empty -> 1.
double miou(const SaliencyMap& pred, const SaliencyMap& truth, double threshold = 0.5);
/// Per-sample IoU for (B, H, W) maps.
torch::Tensor iou_batch(const torch::Tensor& pred, const torch::Tensor& truth, double threshold);

// ---------------------------------------------------------------------------
// Text
// ---------------------------------------------------------------------------

using Tokens = std::vector<std::string>;

struct BleuOptions {
  /// Add-one smoothing on the 2..4-gram precisions.
  bool smoothing = false;
};

/// Sentence BLEU-4: geometric mean of clipped 1..4-gram precisions times the
/// brevity penalty against the closest reference length (shorter on ties).
/// Without smoothing any zero precision gives 0.
double bleu4(const Tokens& candidate, const std::vector<Tokens>& references, BleuOptions options = {});

/// Corpus BLEU-4: clipped counts and lengths summed over all pairs first.
double corpus_bleu4(const std::vector<Tokens>& candidates,
                    const std::vector<std::vector<Tokens>>& references, BleuOptions options = {});

/// LCS F-measure with beta = 1.2.
double rouge_l(const Tokens& candidate, const Tokens& reference, double beta = 1.2);
/// Best ROUGE-L over several references.
double rouge_l(const Tokens& candidate, const std::vector<Tokens>& references, double beta = 1.2);

/// Document frequencies of 1..4-grams over a corpus of reference sets.
class CiderCorpusStats {
 public:
  CiderCorpusStats() = default;
  static CiderCorpusStats build(const std::vector<std::vector<Tokens>>& reference_sets);

  int64_t num_documents() const { return num_documents_; }
  /// Number of reference sets containing the n-gram (0 if unseen).
  int64_t document_frequency(const Tokens& ngram) const;

 private:
  std::map<Tokens, int64_t> df_;
  int64_t num_documents_ = 0;
};

/// CIDEr: for n = 1..4, cosine between TF-IDF vectors of the candidate and
/// each reference (idf = ln N - ln max(1, df)), averaged over references,
/// then over n, times 10.
double cider(const Tokens& candidate, const std::vector<Tokens>& references,
             const CiderCorpusStats& stats);

/// All n-grams of order n as a multiset.
std::map<Tokens, int64_t> ngram_counts(const Tokens& tokens, int64_t n);

}  // namespace megl
