#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace megl {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum class ErrorKind {
  kMissingFile,
  kParseError,
  kUnknownKey,
  kDomainError,
  kShapeMismatch,
  kRangeError,
  kEmptyLogits,
  kLabelOutOfRange,
  kClassOutOfRange,
  kDetachedGraph,
  kNormalizationMismatch,
  kEmptyList,
  kDegenerateMap,
  kTokenOutOfVocab,
  kLengthExceeded,
  kMissingImage,
  kUnknownLabel,
  kDuplicateRecord,
  kEmptyDataset,
  kTooFewSamplesForStratification,
  kEmptyAccumulator,
  kEmptyCandidate,
  kEmptyInput,
  kMissingCorpusStats,
  kNonFiniteLoss,
  kCorruptCheckpoint,
};

std::string_view to_string(ErrorKind kind);

/// Every failure raised by the library carries one of the ErrorKind tags so
/// callers (and the CLI exit path) can dispatch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Channels x height x width image with values in [0, 1]. Channels is 1 or 3.
class ImageTensor {
 public:
  static ImageTensor from_tensor(torch::Tensor data);

  const torch::Tensor& data() const { return data_; }
  int64_t channels() const { return data_.size(0); }
  int64_t height() const { return data_.size(1); }
  int64_t width() const { return data_.size(2); }

 private:
  explicit ImageTensor(torch::Tensor data) : data_(std::move(data)) {}
  torch::Tensor data_;
};

enum class Normalization { kRaw, kMinMax, kSum1 };

std::string_view to_string(Normalization n);

/// Non-negative relevance grid (height x width) tagged with how it was
/// normalized. Construction validates the tag against the values.
class SaliencyMap {
 public:
  static SaliencyMap make(torch::Tensor grid, Normalization normalization);

  const torch::Tensor& grid() const { return grid_; }
  Normalization normalization() const { return normalization_; }
  int64_t height() const { return grid_.size(0); }
  int64_t width() const { return grid_.size(1); }

 private:
  SaliencyMap(torch::Tensor grid, Normalization n) : grid_(std::move(grid)), normalization_(n) {}
  torch::Tensor grid_;
  Normalization normalization_;
};

/// Min-max normalization over the trailing two dims. An all-equal map becomes
/// all ones when the constant is positive and all zeros otherwise.
/// Differentiable; safe to backpropagate through the degenerate branch.
torch::Tensor minmax_normalize(const torch::Tensor& maps);

/// Sum-to-one normalization over the trailing two dims. All-zero maps become
/// uniform.
torch::Tensor sum_normalize(const torch::Tensor& maps);

SaliencyMap to_minmax(const SaliencyMap& map);
SaliencyMap to_sum1(const SaliencyMap& map);

using TokenIds = std::vector<int64_t>;

struct Sample {
  ImageTensor image;
  int64_t label = 0;
  std::optional<TokenIds> text_explanation;
  std::optional<SaliencyMap> visual_explanation;
};

void validate_sample(const Sample& sample, int64_t num_classes, int64_t annotation_resolution);

/// Per-batch loss record. `visual` is the mean L1 over annotated samples and
/// `dc` the mean KL over unannotated ones; `annotated_fraction` is the batch
/// mean of the visual-annotation indicator, so the batch objective is
///   pred + lt * textual + lv * (f * visual + (1 - f) * dc)
/// with absent terms counted as zero.
struct LossBreakdown {
  double pred = 0.0;
  std::optional<double> visual;
  std::optional<double> dc;
  std::optional<double> textual;
  double total = 0.0;
  double annotated_fraction = 0.0;
  int64_t n_supervised = 0;
  int64_t n_consistency = 0;

  double recompute_total(double lambda_visual, double lambda_textual) const;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class SaliencyTarget { kLabel, kPrediction };
enum class TextualReduction { kMean, kSum };

struct ExperimentConfig {
  double lambda_visual = 1.0;
  double lambda_textual = 1.0;

  int64_t num_classes = 8;
  int64_t image_size = 32;
  int64_t saliency_resolution = 32;
  int64_t vocab_size = 512;
  int64_t embed_dim = 64;
  int64_t max_text_len = 24;
  int64_t prefix_tokens = 4;
  int64_t num_heads = 4;
  int64_t num_layers = 2;
  int64_t feature_dim = 128;
  int64_t aux_feature_dim = 64;
  double epsilon_smoothing = 1e-6;

  int64_t seed = 0;
  double learning_rate = 3e-4;
  double weight_decay = 0.01;
  int64_t batch_size = 32;
  int64_t epochs = 30;
  int64_t num_threads = 1;

  bool visual_on = true;
  bool textual_on = true;
  bool consistency_on = true;
  bool class_conditional_prior = false;
  SaliencyTarget saliency_target = SaliencyTarget::kLabel;
  TextualReduction textual_reduction = TextualReduction::kMean;

  double miou_threshold = 0.5;
  bool bleu_smoothing = false;

  double train_ratio = 0.8;
  double val_ratio = 0.1;
  double test_ratio = 0.1;
  std::string manifest;
  std::string output_dir = "megl_run";

  bool operator==(const ExperimentConfig&) const = default;
};

void validate(const ExperimentConfig& config);
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const ExperimentConfig& config);
void save_config(const ExperimentConfig& config, const std::filesystem::path& path);
/// FNV-1a over the serialized form.
uint64_t config_hash(const ExperimentConfig& config);

/// Seeds every random source the library draws from (libtorch's CPU
/// generator; other generators derive their state from explicit seeds).
void seed_everything(int64_t seed);

/// Shortest round-trip decimal form of a double.
std::string format_real(double value);

}  // namespace megl
