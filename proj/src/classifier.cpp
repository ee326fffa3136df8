#include "megl/classifier.hpp"

#include <algorithm>

namespace megl {

ConvBackbone::ConvBackbone(ConvBackboneOptions options) : options_(std::move(options)) {
  if (options_.channels.empty()) fail(ErrorKind::kDomainError, "backbone needs at least one block");
  if (options_.pool.size() != options_.channels.size()) {
    fail(ErrorKind::kDomainError, "pool flags must match the block count");
  }
  torch::nn::Sequential seq;
  int64_t in = options_.in_channels;
  for (size_t i = 0; i < options_.channels.size(); ++i) {
    const int64_t out = options_.channels[i];
    seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
    if (options_.norm) {
      int64_t groups = std::min(options_.norm_groups, out);
      while (out % groups != 0) --groups;
      seq->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, out)));
    }
    seq->push_back(torch::nn::ReLU());
    if (options_.pool[i]) seq->push_back(torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(2)));
    in = out;
  }
  blocks_ = register_module("blocks", seq);
}

torch::Tensor ConvBackbone::forward(const torch::Tensor& images) { return blocks_->forward(images); }

int64_t ConvBackbone::out_channels() const { return options_.channels.back(); }

int64_t ConvBackbone::feature_size(int64_t image_size) const {
  int64_t s = image_size;
  for (bool p : options_.pool) {
    if (p) s /= 2;
  }
  return s;
}

ClassifierImpl::ClassifierImpl(std::shared_ptr<Backbone> backbone, int64_t num_classes,
                               int64_t image_size)
    : backbone_(std::move(backbone)), num_classes_(num_classes), image_size_(image_size) {
  if (num_classes < 1) fail(ErrorKind::kDomainError, "num_classes must be >= 1");
  register_module("backbone", backbone_);
  head_ = register_module("head", torch::nn::Linear(backbone_->out_channels(), num_classes));
}

ClassifierOutput ClassifierImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(2) != image_size_ || images.size(3) != image_size_) {
    fail(ErrorKind::kShapeMismatch, "classifier expects (B, C, " + std::to_string(image_size_) +
                                        ", " + std::to_string(image_size_) + ") images");
  }
  if (images.size(1) != backbone_->in_channels()) {
    fail(ErrorKind::kShapeMismatch, "classifier expects " + std::to_string(backbone_->in_channels()) +
                                        "-channel images");
  }
  ClassifierOutput out;
  out.features = backbone_->forward(images);
  out.pooled = out.features.mean({2, 3});
  out.logits = head_->forward(out.pooled);
  return out;
}

Classifier make_classifier(const ExperimentConfig& config) {
  ConvBackboneOptions opts;
  opts.channels.back() = config.feature_dim;
  return Classifier(std::make_shared<ConvBackbone>(opts), config.num_classes, config.image_size);
}

ClassifierOutput forward(Classifier& classifier, const ImageTensor& image) {
  const auto& data = image.data();
  if (data.size(1) != classifier->image_size() || data.size(2) != classifier->image_size()) {
    fail(ErrorKind::kShapeMismatch, "image size does not match the classifier");
  }
  auto param = classifier->parameters().front();
  return classifier->forward(data.unsqueeze(0).to(param.scalar_type()));
}

int64_t predict(const torch::Tensor& logits) {
  if (logits.numel() == 0) fail(ErrorKind::kEmptyLogits, "cannot predict from empty logits");
  const auto flat = logits.detach().to(torch::kDouble).contiguous().view(-1);
  const auto acc = flat.accessor<double, 1>();
  int64_t best = 0;
  for (int64_t i = 1; i < flat.size(0); ++i) {
    if (acc[i] > acc[best]) best = i;
  }
  return best;
}

std::vector<int64_t> predict_batch(const torch::Tensor& logits) {
  if (logits.dim() != 2 || logits.size(1) == 0) {
    fail(ErrorKind::kEmptyLogits, "expected (B, C) logits with C >= 1");
  }
  std::vector<int64_t> out;
  out.reserve(static_cast<size_t>(logits.size(0)));
  for (int64_t b = 0; b < logits.size(0); ++b) out.push_back(predict(logits[b]));
  return out;
}

torch::Tensor prediction_loss(const torch::Tensor& logits, int64_t label) {
  if (logits.dim() != 1 || logits.numel() == 0) fail(ErrorKind::kEmptyLogits, "expected a logit vector");
  if (label < 0 || label >= logits.size(0)) {
    fail(ErrorKind::kLabelOutOfRange, "label " + std::to_string(label) + " outside [0, " +
                                          std::to_string(logits.size(0)) + ")");
  }
  return -torch::log_softmax(logits, 0)[label];
}

torch::Tensor prediction_loss(const torch::Tensor& logits, const torch::Tensor& labels) {
  if (logits.dim() != 2 || logits.size(1) == 0) fail(ErrorKind::kEmptyLogits, "expected (B, C) logits");
  if (labels.numel() != logits.size(0)) fail(ErrorKind::kShapeMismatch, "one label per row required");
  if (labels.numel() > 0 &&
      (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= logits.size(1))) {
    fail(ErrorKind::kLabelOutOfRange, "label outside the class range");
  }
  const auto logp = torch::log_softmax(logits, 1);
  return -logp.gather(1, labels.view({-1, 1})).mean();
}

int64_t parameter_count(torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

}  // namespace megl
