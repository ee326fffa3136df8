#pragma once

#include <memory>
#include <vector>

#include "megl/core.hpp"

namespace megl {

/// Feature extractor interface. Any backbone mapping (B, C, H, W) images to a
/// (B, K, h, w) activation grid can be dropped in behind the classifier.
class Backbone : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const torch::Tensor& images) = 0;
  virtual int64_t in_channels() const { return 3; }
  virtual int64_t out_channels() const = 0;
  /// Spatial size of the activation grid for a square input of `image_size`.
  virtual int64_t feature_size(int64_t image_size) const = 0;
};

struct ConvBackboneOptions {
  int64_t in_channels = 3;
  /// One entry per conv -> norm -> ReLU -> pool block.
  std::vector<int64_t> channels{16, 32, 64, 128};
  /// Whether each block ends with 2x2 max pooling.
  std::vector<bool> pool{true, true, true, false};
  bool norm = true;
  int64_t norm_groups = 4;
};

/// Default desk-scale backbone. Layer list for the defaults and a 32x32 input:
///   3x3 conv 3->16,   GroupNorm(4), ReLU, maxpool 2  -> 16 x 16 x 16
///   3x3 conv 16->32,  GroupNorm(4), ReLU, maxpool 2  -> 32 x 8 x 8
///   3x3 conv 32->64,  GroupNorm(4), ReLU, maxpool 2  -> 64 x 4 x 4
///   3x3 conv 64->128, GroupNorm(4), ReLU             -> 128 x 4 x 4
/// GroupNorm keeps every sample independent of the rest of its batch, so
/// per-sample Grad-CAM is unaffected by batching.
class ConvBackbone : public Backbone {
 public:
  explicit ConvBackbone(ConvBackboneOptions options = {});
  torch::Tensor forward(const torch::Tensor& images) override;
  int64_t in_channels() const override { return options_.in_channels; }
  int64_t out_channels() const override;
  int64_t feature_size(int64_t image_size) const override;
  const ConvBackboneOptions& options() const { return options_; }

 private:
  ConvBackboneOptions options_;
  torch::nn::Sequential blocks_{nullptr};
};

struct ClassifierOutput {
  torch::Tensor logits;    // (B, C)
  torch::Tensor features;  // (B, K, h, w), last conv block activations
  torch::Tensor pooled;    // (B, K), global average of `features`
};

/// Feature extractor followed by a linear head over globally average-pooled
/// features.
class ClassifierImpl : public torch::nn::Module {
 public:
  ClassifierImpl(std::shared_ptr<Backbone> backbone, int64_t num_classes, int64_t image_size);

  ClassifierOutput forward(const torch::Tensor& images);

  int64_t num_classes() const { return num_classes_; }
  int64_t image_size() const { return image_size_; }
  int64_t feature_dim() const { return backbone_->out_channels(); }
  Backbone& backbone() { return *backbone_; }
  torch::nn::Linear& head() { return head_; }

 private:
  std::shared_ptr<Backbone> backbone_;
  torch::nn::Linear head_{nullptr};
  int64_t num_classes_;
  int64_t image_size_;
};
TORCH_MODULE(Classifier);

Classifier make_classifier(const ExperimentConfig& config);

/// Single-image forward with input validation.
ClassifierOutput forward(Classifier& classifier, const ImageTensor& image);

/// Argmax with ties broken toward the lowest index.
int64_t predict(const torch::Tensor& logits);
std::vector<int64_t> predict_batch(const torch::Tensor& logits);

/// -log softmax(logits)[label] for a single logit vector.
torch::Tensor prediction_loss(const torch::Tensor& logits, int64_t label);
/// Batch mean cross-entropy; `logits` is (B, C) and `labels` (B).
torch::Tensor prediction_loss(const torch::Tensor& logits, const torch::Tensor& labels);

int64_t parameter_count(torch::nn::Module& module);

}  // namespace megl
