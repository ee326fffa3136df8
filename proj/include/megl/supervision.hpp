#pragma once

#include <optional>
#include <span>
#include <vector>

#include "megl/core.hpp"

namespace megl {

/// Cell-wise mean of sum-normalized annotation maps.
struct AggregatedPrior {
  SaliencyMap mean_map;  // SUM1
  int64_t n_contributors = 0;
};

/// Mean absolute cell difference per sample; (B, H, W) x (B, H, W) -> (B).
torch::Tensor visual_l1(const torch::Tensor& pred, const torch::Tensor& truth);

/// L1 between two MINMAX maps of equal size.
double visual_l1_loss(const SaliencyMap& pred, const SaliencyMap& truth);

/// Each map is sum-normalized and the results averaged cell by cell. Each
/// cell's n values are summed in ascending order, so the result is
/// bit-identical under any permutation of `maps`.
AggregatedPrior aggregate_prior(std::span<const SaliencyMap> maps);

/// KL(p || q) per sample where p is the sum-normalized prediction and q the
/// prior, each smoothed as (x + eps) / (1 + m * eps) over m cells.
/// `pred` is (B, H, W); `prior` is (H, W) or (B, H, W).
torch::Tensor consistency_kl(const torch::Tensor& pred, const torch::Tensor& prior, double epsilon);

double distribution_consistency_loss(const SaliencyMap& pred, const AggregatedPrior& prior,
                                     double epsilon);

enum class VisualBranch { kSupervised, kConsistency };

struct VisualLoss {
  double value = 0.0;
  VisualBranch branch = VisualBranch::kSupervised;
};

VisualLoss combined_visual_loss(const SaliencyMap& pred, const std::optional<SaliencyMap>& truth,
                                const AggregatedPrior& prior, double epsilon);

/// Frozen reference maps for the consistency loss: one dataset-level prior
/// and, when class-conditional, one per class (classes with no annotated
/// sample fall back to the dataset-level map).
class PriorSet {
 public:
  PriorSet() = default;
  /// `maps` (N, H, W) annotation maps with their `labels` (N).
  static PriorSet build(const torch::Tensor& maps, const torch::Tensor& labels, int64_t num_classes,
                        bool class_conditional);

  const AggregatedPrior& dataset() const { return *dataset_; }
  bool class_conditional() const { return !per_class_.empty(); }
  const AggregatedPrior& for_class(int64_t label) const;
  /// (B, H, W) reference maps for a batch of labels.
  torch::Tensor batch(const torch::Tensor& labels) const;
  bool empty() const { return !dataset_.has_value(); }

  /// Named (H, W) arrays for persistence: "prior/dataset", "prior/class/<k>".
  std::vector<std::pair<std::string, torch::Tensor>> arrays() const;
  static PriorSet from_arrays(const std::vector<std::pair<std::string, torch::Tensor>>& arrays,
                              int64_t n_contributors);

 private:
  std::optional<AggregatedPrior> dataset_;
  std::vector<AggregatedPrior> per_class_;
};

struct BatchVisualTerms {
  torch::Tensor supervised;   // mean L1 over annotated samples; undefined if none
  torch::Tensor consistency;  // mean KL over unannotated samples; undefined if none
  int64_t n_supervised = 0;
  int64_t n_consistency = 0;
};

/// Indicator-switched visual objective for a batch. `has_truth` (B, bool)
/// selects L1 against `truth` or KL against the prior; `supervised_on` and
/// `consistency_on` gate each branch (a gated-off branch contributes nothing
/// and its count stays zero).
BatchVisualTerms combined_visual_batch(const torch::Tensor& pred, const torch::Tensor& truth,
                                       const torch::Tensor& has_truth, const torch::Tensor& labels,
                                       const PriorSet& priors, double epsilon, bool supervised_on,
                                       bool consistency_on);

}  // namespace megl
