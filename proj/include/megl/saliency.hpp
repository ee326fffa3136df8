#pragma once

#include "megl/core.hpp"

namespace megl {

struct GradCamResult {
  SaliencyMap raw_map;    // RAW, at feature resolution
  SaliencyMap upsampled;  // MINMAX, at image resolution
  int64_t target_class = 0;
};

/// Batched Grad-CAM. `features` is (B, K, h, w) and `logits` (B, C) from the
/// same forward pass; `targets` holds one class index per row.
///
/// Channel weights are the spatial mean of d logit_target / d A^k and the map
/// is ReLU(sum_k alpha_k A^k), shape (B, h, w). With `create_graph` the map
/// stays differentiable with respect to everything upstream of `features`
/// and `logits`, including through the gradient itself.
torch::Tensor grad_cam_maps(const torch::Tensor& features, const torch::Tensor& logits,
                            const torch::Tensor& targets, bool create_graph);

/// Single-sample Grad-CAM. Accepts (K, h, w) or (1, K, h, w) features and a
/// (C) or (1, C) logit vector; upsamples to image_h x image_w.
GradCamResult grad_cam(const torch::Tensor& features, const torch::Tensor& logits,
                       int64_t target_class, int64_t image_h, int64_t image_w,
                       bool create_graph = false);

/// Bilinear (align-corners) resize of (..., h, w) maps followed by min-max
/// normalization. Differentiable.
torch::Tensor upsample_maps(const torch::Tensor& maps, int64_t target_h, int64_t target_w);

SaliencyMap upsample(const SaliencyMap& map, int64_t target_h, int64_t target_w);

/// Resizes (B, h, w) maps to the given grid without renormalizing: bilinear
/// when growing, area averaging when shrinking, identity when equal.
torch::Tensor resample_maps(const torch::Tensor& maps, int64_t target_h, int64_t target_w);

/// Per-pixel, per-channel product of (B, C, H, W) images with (B, H, W) maps.
torch::Tensor mask_images(const torch::Tensor& images, const torch::Tensor& maps);

ImageTensor mask_image(const ImageTensor& image, const SaliencyMap& map);

}  // namespace megl
