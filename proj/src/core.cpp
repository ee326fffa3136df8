#include "megl/core.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <limits>

namespace megl {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kMissingFile: return "MissingFile";
    case ErrorKind::kParseError: return "ParseError";
    case ErrorKind::kUnknownKey: return "UnknownKey";
    case ErrorKind::kDomainError: return "DomainError";
    case ErrorKind::kShapeMismatch: return "ShapeMismatch";
    case ErrorKind::kRangeError: return "RangeError";
    case ErrorKind::kEmptyLogits: return "EmptyLogits";
    case ErrorKind::kLabelOutOfRange: return "LabelOutOfRange";
    case ErrorKind::kClassOutOfRange: return "ClassOutOfRange";
    case ErrorKind::kDetachedGraph: return "DetachedGraph";
    case ErrorKind::kNormalizationMismatch: return "NormalizationMismatch";
    case ErrorKind::kEmptyList: return "EmptyList";
    case ErrorKind::kDegenerateMap: return "DegenerateMap";
    case ErrorKind::kTokenOutOfVocab: return "TokenOutOfVocab";
    case ErrorKind::kLengthExceeded: return "LengthExceeded";
    case ErrorKind::kMissingImage: return "MissingImage";
    case ErrorKind::kUnknownLabel: return "UnknownLabel";
    case ErrorKind::kDuplicateRecord: return "DuplicateRecord";
    case ErrorKind::kEmptyDataset: return "EmptyDataset";
    case ErrorKind::kTooFewSamplesForStratification: return "TooFewSamplesForStratification";
    case ErrorKind::kEmptyAccumulator: return "EmptyAccumulator";
    case ErrorKind::kEmptyCandidate: return "EmptyCandidate";
    case ErrorKind::kEmptyInput: return "EmptyInput";
    case ErrorKind::kMissingCorpusStats: return "MissingCorpusStats";
    case ErrorKind::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::kCorruptCheckpoint: return "CorruptCheckpoint";
  }
  return "Unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

std::string_view to_string(Normalization n) {
  switch (n) {
    case Normalization::kRaw: return "raw";
    case Normalization::kMinMax: return "minmax";
    case Normalization::kSum1: return "sum1";
  }
  return "raw";
}

namespace {

constexpr double kNormTolerance = 1e-6;

void require_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    fail(ErrorKind::kRangeError, std::string(what) + " contains non-finite values");
  }
}

}  // namespace

ImageTensor ImageTensor::from_tensor(torch::Tensor data) {
  if (data.dim() != 3) fail(ErrorKind::kShapeMismatch, "image must be channels x height x width");
  if (data.size(0) != 1 && data.size(0) != 3) {
    fail(ErrorKind::kShapeMismatch, "image must have 1 or 3 channels");
  }
  if (data.size(1) <= 0 || data.size(2) <= 0) fail(ErrorKind::kShapeMismatch, "empty image");
  if (!data.is_floating_point()) data = data.to(torch::kFloat);
  require_finite(data, "image");
  auto detached = data.detach();
  if (detached.min().item<double>() < 0.0 || detached.max().item<double>() > 1.0) {
    fail(ErrorKind::kRangeError, "image values must lie in [0, 1]");
  }
  return ImageTensor(std::move(data));
}

SaliencyMap SaliencyMap::make(torch::Tensor grid, Normalization normalization) {
  if (grid.dim() != 2) fail(ErrorKind::kShapeMismatch, "saliency map must be height x width");
  if (grid.numel() == 0) fail(ErrorKind::kShapeMismatch, "empty saliency map");
  if (!grid.is_floating_point()) grid = grid.to(torch::kDouble);
  require_finite(grid, "saliency map");
  auto g = grid.detach();
  if (g.min().item<double>() < 0.0) fail(ErrorKind::kRangeError, "saliency values must be >= 0");
  const double mx = g.max().item<double>();
  switch (normalization) {
    case Normalization::kRaw:
      break;
    case Normalization::kMinMax:
      if (mx != 0.0 && std::abs(mx - 1.0) > kNormTolerance) {
        fail(ErrorKind::kNormalizationMismatch, "min-max map must peak at 1");
      }
      break;
    case Normalization::kSum1:
      if (std::abs(g.sum().item<double>() - 1.0) > kNormTolerance) {
        fail(ErrorKind::kNormalizationMismatch, "sum-normalized map must sum to 1");
      }
      break;
  }
  return SaliencyMap(std::move(grid), normalization);
}

torch::Tensor minmax_normalize(const torch::Tensor& maps) {
  const auto mn = maps.amin({-2, -1}, /*keepdim=*/true);
  const auto mx = maps.amax({-2, -1}, /*keepdim=*/true);
  const auto range = mx - mn;
  // Spreads at rounding level (e.g. a resampled constant) count as constant.
  const double rel = 64.0 * (maps.scalar_type() == torch::kDouble
                                 ? std::numeric_limits<double>::epsilon()
                                 : std::numeric_limits<float>::epsilon());
  const auto ok = range > rel * torch::maximum(mx.abs(), mn.abs());
  const auto safe = torch::where(ok, range, torch::ones_like(range));
  const auto constant = (maps > 0).to(maps.scalar_type());
  return torch::where(ok, (maps - mn) / safe, constant);
}

torch::Tensor sum_normalize(const torch::Tensor& maps) {
  const auto total = maps.sum({-2, -1}, /*keepdim=*/true);
  const auto ok = total > 0;
  const auto safe = torch::where(ok, total, torch::ones_like(total));
  const double cells = static_cast<double>(maps.size(-1) * maps.size(-2));
  const auto uniform = torch::full_like(maps, 1.0 / cells);
  return torch::where(ok, maps / safe, uniform);
}

SaliencyMap to_minmax(const SaliencyMap& map) {
  if (map.normalization() == Normalization::kMinMax) return map;
  return SaliencyMap::make(minmax_normalize(map.grid()), Normalization::kMinMax);
}

SaliencyMap to_sum1(const SaliencyMap& map) {
  if (map.normalization() == Normalization::kSum1) return map;
  return SaliencyMap::make(sum_normalize(map.grid()), Normalization::kSum1);
}

void validate_sample(const Sample& sample, int64_t num_classes, int64_t annotation_resolution) {
  if (sample.label < 0 || sample.label >= num_classes) {
    fail(ErrorKind::kLabelOutOfRange, "label " + std::to_string(sample.label) + " outside [0, " +
                                          std::to_string(num_classes) + ")");
  }
  if (sample.visual_explanation) {
    const auto& m = *sample.visual_explanation;
    if (m.height() != annotation_resolution || m.width() != annotation_resolution) {
      fail(ErrorKind::kShapeMismatch, "visual explanation must be at the annotation resolution");
    }
  }
}

double LossBreakdown::recompute_total(double lambda_visual, double lambda_textual) const {
  const double f = annotated_fraction;
  return pred + lambda_textual * textual.value_or(0.0) +
         lambda_visual * (f * visual.value_or(0.0) + (1.0 - f) * dc.value_or(0.0));
}

void seed_everything(int64_t seed) {
  if (seed < 0) fail(ErrorKind::kDomainError, "seed must be non-negative");
  torch::manual_seed(static_cast<uint64_t>(seed));
}

std::string format_real(double value) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  return std::string(buf.data(), end);
}

}  // namespace megl
