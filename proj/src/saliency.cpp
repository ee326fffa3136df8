#include "megl/saliency.hpp"

namespace megl {

namespace F = torch::nn::functional;

torch::Tensor grad_cam_maps(const torch::Tensor& features, const torch::Tensor& logits,
                            const torch::Tensor& targets, bool create_graph) {
  if (features.dim() != 4) fail(ErrorKind::kShapeMismatch, "features must be (B, K, h, w)");
  if (logits.dim() != 2 || logits.size(0) != features.size(0)) {
    fail(ErrorKind::kShapeMismatch, "logits must be (B, C) matching the feature batch");
  }
  if (targets.numel() != logits.size(0)) fail(ErrorKind::kShapeMismatch, "one target per sample");
  if (targets.numel() > 0 &&
      (targets.min().item<int64_t>() < 0 || targets.max().item<int64_t>() >= logits.size(1))) {
    fail(ErrorKind::kClassOutOfRange, "Grad-CAM target class outside [0, C)");
  }
  if (!features.requires_grad() || !logits.requires_grad()) {
    fail(ErrorKind::kDetachedGraph, "features and logits must be part of a differentiation graph");
  }

  const auto selected = logits.gather(1, targets.view({-1, 1}).to(torch::kLong)).sum();
  auto grads = torch::autograd::grad({selected}, {features}, /*grad_outputs=*/{},
                                     /*retain_graph=*/true, create_graph,
                                     /*allow_unused=*/true);
  if (!grads[0].defined()) {
    fail(ErrorKind::kDetachedGraph, "logits do not depend on the supplied features");
  }
  const auto alpha = grads[0].mean({2, 3}, /*keepdim=*/true);
  return torch::relu((alpha * features).sum(1));
}

GradCamResult grad_cam(const torch::Tensor& features, const torch::Tensor& logits,
                       int64_t target_class, int64_t image_h, int64_t image_w,
                       bool create_graph) {
  const auto f = features.dim() == 3 ? features.unsqueeze(0) : features;
  const auto l = logits.dim() == 1 ? logits.unsqueeze(0) : logits;
  if (f.size(0) != 1 || l.size(0) != 1) fail(ErrorKind::kShapeMismatch, "expected a single sample");
  if (target_class < 0 || target_class >= l.size(1)) {
    fail(ErrorKind::kClassOutOfRange, "Grad-CAM target class outside [0, C)");
  }
  const auto target = torch::full({1}, target_class, torch::kLong);
  const auto raw = grad_cam_maps(f, l, target, create_graph);
  const auto up = upsample_maps(raw, image_h, image_w);
  return GradCamResult{SaliencyMap::make(raw[0], Normalization::kRaw),
                       SaliencyMap::make(up[0], Normalization::kMinMax), target_class};
}

torch::Tensor upsample_maps(const torch::Tensor& maps, int64_t target_h, int64_t target_w) {
  if (target_h <= 0 || target_w <= 0) fail(ErrorKind::kDomainError, "target dims must be positive");
  if (maps.dim() < 2) fail(ErrorKind::kShapeMismatch, "maps must be at least 2-D");
  if (target_h < maps.size(-2) || target_w < maps.size(-1)) {
    fail(ErrorKind::kDomainError, "upsample target must not be smaller than the source");
  }
  return minmax_normalize(resample_maps(maps, target_h, target_w));
}

SaliencyMap upsample(const SaliencyMap& map, int64_t target_h, int64_t target_w) {
  return SaliencyMap::make(upsample_maps(map.grid(), target_h, target_w), Normalization::kMinMax);
}

torch::Tensor resample_maps(const torch::Tensor& maps, int64_t target_h, int64_t target_w) {
  const int64_t h = maps.size(-2);
  const int64_t w = maps.size(-1);
  if (h == target_h && w == target_w) return maps;
  const auto lead = maps.sizes().slice(0, maps.dim() - 2).vec();
  auto x = maps.reshape({-1, 1, h, w});
  if (target_h >= h && target_w >= w) {
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{target_h, target_w})
                              .mode(torch::kBilinear)
                              .align_corners(true));
  } else {
    x = F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions({target_h, target_w}));
  }
  auto shape = lead;
  shape.push_back(target_h);
  shape.push_back(target_w);
  return x.reshape(shape);
}

torch::Tensor mask_images(const torch::Tensor& images, const torch::Tensor& maps) {
  if (images.dim() != 4 || maps.dim() != 3 || images.size(0) != maps.size(0) ||
      images.size(2) != maps.size(1) || images.size(3) != maps.size(2)) {
    fail(ErrorKind::kShapeMismatch, "mask must match the image grid");
  }
  return images * maps.unsqueeze(1);
}

ImageTensor mask_image(const ImageTensor& image, const SaliencyMap& map) {
  if (map.height() != image.height() || map.width() != image.width()) {
    fail(ErrorKind::kShapeMismatch, "mask must match the image grid");
  }
  if (map.grid().max().item<double>() > 1.0) fail(ErrorKind::kRangeError, "mask values must be <= 1");
  const auto grid = map.grid().to(image.data().scalar_type());
  return ImageTensor::from_tensor(image.data() * grid.unsqueeze(0));
}

}  // namespace megl
