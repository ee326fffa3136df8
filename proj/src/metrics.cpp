#include "megl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace megl {

ConfusionAccumulator::ConfusionAccumulator(int64_t num_classes)
    : num_classes_(num_classes), counts_(static_cast<size_t>(num_classes * num_classes), 0) {
  if (num_classes < 1) fail(ErrorKind::kDomainError, "num_classes must be >= 1");
}

void ConfusionAccumulator::add(int64_t truth, int64_t predicted) {
  if (truth < 0 || truth >= num_classes_ || predicted < 0 || predicted >= num_classes_) {
    fail(ErrorKind::kLabelOutOfRange, "class index outside the confusion matrix");
  }
  ++counts_[static_cast<size_t>(truth * num_classes_ + predicted)];
  ++total_;
}

void ConfusionAccumulator::merge(const ConfusionAccumulator& other) {
  if (other.num_classes_ != num_classes_) fail(ErrorKind::kShapeMismatch, "class counts differ");
  for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  total_ += other.total_;
}

int64_t ConfusionAccumulator::count(int64_t truth, int64_t predicted) const {
  return counts_[static_cast<size_t>(truth * num_classes_ + predicted)];
}

ClassificationReport classification_report(const ConfusionAccumulator& acc) {
  if (acc.total() == 0) fail(ErrorKind::kEmptyAccumulator, "no samples evaluated");
  const int64_t c = acc.num_classes();
  ClassificationReport rep;
  int64_t trace = 0;
  for (int64_t k = 0; k < c; ++k) {
    const int64_t tp = acc.count(k, k);
    int64_t predicted = 0;
    int64_t actual = 0;
    for (int64_t j = 0; j < c; ++j) {
      predicted += acc.count(j, k);
      actual += acc.count(k, j);
    }
    trace += tp;
    const double p = predicted == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(predicted);
    const double r = actual == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(actual);
    rep.macro_precision += p;
    rep.macro_recall += r;
    rep.macro_f1 += (p + r) == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
  }
  rep.accuracy = static_cast<double>(trace) / static_cast<double>(acc.total());
  rep.macro_precision /= static_cast<double>(c);
  rep.macro_recall /= static_cast<double>(c);
  rep.macro_f1 /= static_cast<double>(c);
  return rep;
}

torch::Tensor iou_batch(const torch::Tensor& pred, const torch::Tensor& truth, double threshold) {
  if (pred.sizes() != truth.sizes()) fail(ErrorKind::kShapeMismatch, "IoU needs equal grids");
  const auto a = pred.detach() >= threshold;
  const auto b = truth.detach() >= threshold;
  const auto inter = (a & b).sum({-2, -1}).to(torch::kDouble);
  const auto uni = (a | b).sum({-2, -1}).to(torch::kDouble);
  return torch::where(uni > 0, inter / uni.clamp_min(1.0), torch::ones_like(uni));
}

double miou(const SaliencyMap& pred, const SaliencyMap& truth, double threshold) {
  if (pred.height() != truth.height() || pred.width() != truth.width()) {
    fail(ErrorKind::kShapeMismatch, "IoU needs equal grids");
  }
  return iou_batch(pred.grid(), truth.grid(), threshold).item<double>();
}

// ---------------------------------------------------------------------------
// Text metrics
// ---------------------------------------------------------------------------

std::map<Tokens, int64_t> ngram_counts(const Tokens& tokens, int64_t n) {
  std::map<Tokens, int64_t> counts;
  const auto len = static_cast<int64_t>(tokens.size());
  for (int64_t i = 0; i + n <= len; ++i) {
    ++counts[Tokens(tokens.begin() + i, tokens.begin() + i + n)];
  }
  return counts;
}

namespace {

struct BleuStats {
  std::array<int64_t, 4> matches{};
  std::array<int64_t, 4> totals{};
  int64_t cand_len = 0;
  int64_t ref_len = 0;
};

void accumulate_bleu(BleuStats& st, const Tokens& candidate, const std::vector<Tokens>& references) {
  if (candidate.empty()) fail(ErrorKind::kEmptyCandidate, "BLEU needs a non-empty candidate");
  if (references.empty()) fail(ErrorKind::kEmptyInput, "BLEU needs at least one reference");
  for (int64_t n = 1; n <= 4; ++n) {
    const auto cand = ngram_counts(candidate, n);
    std::map<Tokens, int64_t> max_ref;
    for (const auto& ref : references) {
      for (const auto& [g, c] : ngram_counts(ref, n)) max_ref[g] = std::max(max_ref[g], c);
    }
    for (const auto& [g, c] : cand) {
      const auto it = max_ref.find(g);
      st.matches[static_cast<size_t>(n - 1)] += std::min(c, it == max_ref.end() ? 0 : it->second);
      st.totals[static_cast<size_t>(n - 1)] += c;
    }
  }
  const auto c = static_cast<int64_t>(candidate.size());
  int64_t best = static_cast<int64_t>(references.front().size());
  for (const auto& ref : references) {
    const auto r = static_cast<int64_t>(ref.size());
    if (std::abs(r - c) < std::abs(best - c) || (std::abs(r - c) == std::abs(best - c) && r < best)) {
      best = r;
    }
  }
  st.cand_len += c;
  st.ref_len += best;
}

double finish_bleu(const BleuStats& st, const BleuOptions& options) {
  double log_sum = 0.0;
  for (size_t k = 0; k < 4; ++k) {
    double m = static_cast<double>(st.matches[k]);
    double t = static_cast<double>(st.totals[k]);
    if (options.smoothing && k > 0) {
      m += 1.0;
      t += 1.0;
    }
    if (m == 0.0 || t == 0.0) return 0.0;
    log_sum += std::log(m / t);
  }
  const double c = static_cast<double>(st.cand_len);
  const double r = static_cast<double>(st.ref_len);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / 4.0);
}

int64_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<int64_t> prev(b.size() + 1, 0);
  std::vector<int64_t> cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

double bleu4(const Tokens& candidate, const std::vector<Tokens>& references, BleuOptions options) {
  BleuStats st;
  accumulate_bleu(st, candidate, references);
  return finish_bleu(st, options);
}

double corpus_bleu4(const std::vector<Tokens>& candidates,
                    const std::vector<std::vector<Tokens>>& references, BleuOptions options) {
  if (candidates.size() != references.size()) fail(ErrorKind::kShapeMismatch, "one reference set per candidate");
  if (candidates.empty()) fail(ErrorKind::kEmptyInput, "empty corpus");
  BleuStats st;
  for (size_t i = 0; i < candidates.size(); ++i) accumulate_bleu(st, candidates[i], references[i]);
  return finish_bleu(st, options);
}

double rouge_l(const Tokens& candidate, const Tokens& reference, double beta) {
  if (candidate.empty() || reference.empty()) fail(ErrorKind::kEmptyInput, "ROUGE-L needs non-empty inputs");
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  const double b2 = beta * beta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

double rouge_l(const Tokens& candidate, const std::vector<Tokens>& references, double beta) {
  if (references.empty()) fail(ErrorKind::kEmptyInput, "ROUGE-L needs a reference");
  double best = 0.0;
  for (const auto& ref : references) best = std::max(best, rouge_l(candidate, ref, beta));
  return best;
}

CiderCorpusStats CiderCorpusStats::build(const std::vector<std::vector<Tokens>>& reference_sets) {
  CiderCorpusStats stats;
  for (const auto& refs : reference_sets) {
    std::set<Tokens> present;
    for (const auto& ref : refs) {
      for (int64_t n = 1; n <= 4; ++n) {
        for (const auto& [g, c] : ngram_counts(ref, n)) present.insert(g);
      }
    }
    for (const auto& g : present) ++stats.df_[g];
    ++stats.num_documents_;
  }
  return stats;
}

int64_t CiderCorpusStats::document_frequency(const Tokens& ngram) const {
  const auto it = df_.find(ngram);
  return it == df_.end() ? 0 : it->second;
}

double cider(const Tokens& candidate, const std::vector<Tokens>& references,
             const CiderCorpusStats& stats) {
  if (stats.num_documents() == 0) fail(ErrorKind::kMissingCorpusStats, "CIDEr needs corpus statistics");
  if (references.empty()) fail(ErrorKind::kEmptyInput, "CIDEr needs a reference");
  const double log_n = std::log(static_cast<double>(stats.num_documents()));

  const auto tfidf = [&](const Tokens& tokens, int64_t n) {
    std::map<Tokens, double> vec;
    for (const auto& [g, c] : ngram_counts(tokens, n)) {
      const double df = std::max<double>(1.0, static_cast<double>(stats.document_frequency(g)));
      vec[g] = static_cast<double>(c) * (log_n - std::log(df));
    }
    return vec;
  };
  const auto norm = [](const std::map<Tokens, double>& v) {
    double s = 0.0;
    for (const auto& [g, x] : v) s += x * x;
    return std::sqrt(s);
  };

  double score = 0.0;
  for (int64_t n = 1; n <= 4; ++n) {
    const auto vc = tfidf(candidate, n);
    const double nc = norm(vc);
    double per_n = 0.0;
    for (const auto& ref : references) {
      const auto vr = tfidf(ref, n);
      const double nr = norm(vr);
      if (nc == 0.0 || nr == 0.0) continue;
      double dot = 0.0;
      for (const auto& [g, x] : vc) {
        const auto it = vr.find(g);
        if (it != vr.end()) dot += x * it->second;
      }
      per_n += dot / (nc * nr);
    }
    score += per_n / static_cast<double>(references.size());
  }
  return 10.0 * score / 4.0;
}

}  // namespace megl
