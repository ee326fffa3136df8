#include "megl/supervision.hpp"

#include <algorithm>
#include <string>

namespace megl {

torch::Tensor visual_l1(const torch::Tensor& pred, const torch::Tensor& truth) {
  if (pred.sizes() != truth.sizes() || pred.dim() != 3) {
    fail(ErrorKind::kShapeMismatch, "L1 needs equal (B, H, W) maps");
  }
  return (pred - truth).abs().mean({1, 2});
}

double visual_l1_loss(const SaliencyMap& pred, const SaliencyMap& truth) {
  if (pred.height() != truth.height() || pred.width() != truth.width()) {
    fail(ErrorKind::kShapeMismatch, "L1 needs maps of equal size");
  }
  if (pred.normalization() != Normalization::kMinMax ||
      truth.normalization() != Normalization::kMinMax) {
    fail(ErrorKind::kNormalizationMismatch, "L1 compares min-max normalized maps");
  }
  const auto p = pred.grid().to(torch::kDouble).unsqueeze(0);
  const auto t = truth.grid().to(torch::kDouble).unsqueeze(0);
  return visual_l1(p, t).item<double>();
}

AggregatedPrior aggregate_prior(std::span<const SaliencyMap> maps) {
  if (maps.empty()) fail(ErrorKind::kEmptyList, "no annotated maps to aggregate");
  const int64_t h = maps.front().height();
  const int64_t w = maps.front().width();
  const auto n = static_cast<int64_t>(maps.size());
  const int64_t cells = h * w;

  // (cells, n) so each cell's contributions are contiguous.
  std::vector<double> values(static_cast<size_t>(cells * n));
  for (int64_t k = 0; k < n; ++k) {
    const auto& m = maps[static_cast<size_t>(k)];
    if (m.height() != h || m.width() != w) fail(ErrorKind::kShapeMismatch, "maps differ in size");
    const auto g = m.grid().detach().to(torch::kDouble).contiguous();
    const double total = g.sum().item<double>();
    if (!(total > 0.0)) {
      fail(ErrorKind::kDegenerateMap, "annotation map " + std::to_string(k) + " is all zero");
    }
    const auto normed = (g / total).view(-1);
    const auto acc = normed.accessor<double, 1>();
    for (int64_t c = 0; c < cells; ++c) values[static_cast<size_t>(c * n + k)] = acc[c];
  }

  auto mean = torch::empty({h, w}, torch::kDouble);
  auto flat = mean.view(-1);
  auto out = flat.accessor<double, 1>();
  for (int64_t c = 0; c < cells; ++c) {
    auto first = values.begin() + c * n;
    std::sort(first, first + n);
    double s = 0.0;
    for (auto it = first; it != first + n; ++it) s += *it;
    out[c] = s / static_cast<double>(n);
  }
  return AggregatedPrior{SaliencyMap::make(mean, Normalization::kSum1), n};
}

torch::Tensor consistency_kl(const torch::Tensor& pred, const torch::Tensor& prior, double epsilon) {
  if (!(epsilon > 0.0)) fail(ErrorKind::kDomainError, "epsilon must be > 0");
  if (pred.dim() != 3) fail(ErrorKind::kShapeMismatch, "pred must be (B, H, W)");
  if (prior.size(-1) != pred.size(-1) || prior.size(-2) != pred.size(-2) ||
      (prior.dim() == 3 && prior.size(0) != pred.size(0)) || prior.dim() < 2 || prior.dim() > 3) {
    fail(ErrorKind::kShapeMismatch, "prior must match the prediction grid");
  }
  const double m = static_cast<double>(pred.size(1) * pred.size(2));
  const auto smooth = [&](const torch::Tensor& x) {
    return (sum_normalize(x) + epsilon) / (1.0 + m * epsilon);
  };
  const auto p = smooth(pred);
  const auto q = smooth(prior.to(pred.scalar_type()));
  return (p * (torch::log(p) - torch::log(q))).sum({-2, -1});
}

double distribution_consistency_loss(const SaliencyMap& pred, const AggregatedPrior& prior,
                                     double epsilon) {
  const auto& q = prior.mean_map;
  if (pred.height() != q.height() || pred.width() != q.width()) {
    fail(ErrorKind::kShapeMismatch, "resample the prediction to the prior resolution first");
  }
  const auto p = pred.grid().to(torch::kDouble).unsqueeze(0);
  return consistency_kl(p, q.grid().to(torch::kDouble), epsilon).item<double>();
}

VisualLoss combined_visual_loss(const SaliencyMap& pred, const std::optional<SaliencyMap>& truth,
                                const AggregatedPrior& prior, double epsilon) {
  if (truth) return {visual_l1_loss(pred, *truth), VisualBranch::kSupervised};
  return {distribution_consistency_loss(pred, prior, epsilon), VisualBranch::kConsistency};
}

PriorSet PriorSet::build(const torch::Tensor& maps, const torch::Tensor& labels, int64_t num_classes,
                         bool class_conditional) {
  if (maps.dim() != 3 || labels.numel() != maps.size(0)) {
    fail(ErrorKind::kShapeMismatch, "prior needs (N, H, W) maps with N labels");
  }
  std::vector<SaliencyMap> all;
  std::vector<std::vector<SaliencyMap>> by_class(static_cast<size_t>(num_classes));
  const auto lab = labels.to(torch::kLong).contiguous();
  for (int64_t i = 0; i < maps.size(0); ++i) {
    auto m = SaliencyMap::make(maps[i].to(torch::kDouble), Normalization::kRaw);
    const int64_t y = lab[i].item<int64_t>();
    if (y < 0 || y >= num_classes) fail(ErrorKind::kLabelOutOfRange, "prior label out of range");
    all.push_back(m);
    by_class[static_cast<size_t>(y)].push_back(m);
  }
  PriorSet set;
  set.dataset_ = aggregate_prior(all);
  if (class_conditional) {
    for (const auto& group : by_class) {
      set.per_class_.push_back(group.empty() ? *set.dataset_ : aggregate_prior(group));
    }
  }
  return set;
}

const AggregatedPrior& PriorSet::for_class(int64_t label) const {
  if (empty()) fail(ErrorKind::kEmptyList, "prior set is empty");
  if (per_class_.empty()) return *dataset_;
  if (label < 0 || label >= static_cast<int64_t>(per_class_.size())) {
    fail(ErrorKind::kLabelOutOfRange, "no prior for class " + std::to_string(label));
  }
  return per_class_[static_cast<size_t>(label)];
}

torch::Tensor PriorSet::batch(const torch::Tensor& labels) const {
  if (per_class_.empty()) {
    return dataset().mean_map.grid().unsqueeze(0).expand({labels.numel(), -1, -1});
  }
  std::vector<torch::Tensor> rows;
  const auto lab = labels.to(torch::kLong).contiguous();
  for (int64_t i = 0; i < lab.numel(); ++i) {
    rows.push_back(for_class(lab[i].item<int64_t>()).mean_map.grid());
  }
  return torch::stack(rows);
}

std::vector<std::pair<std::string, torch::Tensor>> PriorSet::arrays() const {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  if (empty()) return out;
  out.emplace_back("prior/dataset", dataset_->mean_map.grid());
  for (size_t k = 0; k < per_class_.size(); ++k) {
    out.emplace_back("prior/class/" + std::to_string(k), per_class_[k].mean_map.grid());
  }
  return out;
}

PriorSet PriorSet::from_arrays(const std::vector<std::pair<std::string, torch::Tensor>>& arrays,
                               int64_t n_contributors) {
  PriorSet set;
  std::vector<std::pair<int64_t, AggregatedPrior>> classes;
  for (const auto& [name, grid] : arrays) {
    AggregatedPrior p{SaliencyMap::make(grid, Normalization::kSum1), n_contributors};
    if (name == "prior/dataset") {
      set.dataset_ = p;
    } else if (name.rfind("prior/class/", 0) == 0) {
      classes.emplace_back(std::stoll(name.substr(12)), p);
    }
  }
  std::sort(classes.begin(), classes.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (auto& [k, p] : classes) set.per_class_.push_back(p);
  return set;
}

BatchVisualTerms combined_visual_batch(const torch::Tensor& pred, const torch::Tensor& truth,
                                       const torch::Tensor& has_truth, const torch::Tensor& labels,
                                       const PriorSet& priors, double epsilon, bool supervised_on,
                                       bool consistency_on) {
  BatchVisualTerms terms;
  const auto flags = has_truth.to(torch::kBool);
  const auto sup_idx = torch::nonzero(flags).view(-1);
  const auto con_idx = torch::nonzero(flags.logical_not()).view(-1);

  if (supervised_on && sup_idx.numel() > 0) {
    terms.n_supervised = sup_idx.numel();
    terms.supervised =
        visual_l1(pred.index_select(0, sup_idx), truth.index_select(0, sup_idx).to(pred.scalar_type()))
            .mean();
  }
  if (consistency_on && con_idx.numel() > 0) {
    terms.n_consistency = con_idx.numel();
    const auto ref = priors.batch(labels.index_select(0, con_idx));
    terms.consistency = consistency_kl(pred.index_select(0, con_idx), ref, epsilon).mean();
  }
  return terms;
}

}  // namespace megl
