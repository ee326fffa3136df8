#pragma once

// Independent reference implementations used to check the library. Plain
// double arithmetic over std containers; nothing here calls into megl.

#include <string>
#include <vector>

namespace megl_test {

using Words = std::vector<std::string>;

/// -log(exp(z_y) / sum_j exp(z_j)), evaluated directly.
double cross_entropy(const std::vector<double>& logits, int label);

/// Align-corners bilinear resize of a row-major h x w grid to H x W.
std::vector<double> bilinear(const std::vector<double>& src, int h, int w, int H, int W);

/// KL(p || q) after normalizing both to sum 1, adding eps per cell and
/// renormalizing.
double smoothed_kl(const std::vector<double>& pred, const std::vector<double>& prior, double eps);

/// Sentence BLEU-4 by brute-force window comparison, no smoothing.
double bleu(const Words& candidate, const std::vector<Words>& references);

/// Longest common subsequence length by the full DP table.
int lcs(const Words& a, const Words& b);

double rouge_l(const Words& candidate, const Words& reference, double beta = 1.2);

/// CIDEr with document frequencies counted over `corpus` (one reference set
/// per document).
double cider(const Words& candidate, const std::vector<Words>& references,
             const std::vector<std::vector<Words>>& corpus);

/// Per-row layer norm (no affine) of a vector.
std::vector<double> layer_norm(const std::vector<double>& x, double eps = 1e-5);

/// Softmax of a vector.
std::vector<double> softmax(const std::vector<double>& z);

}  // namespace megl_test
