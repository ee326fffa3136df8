#pragma once

// Library-vs-oracle checks shared by the unit tests and the acceptance
// runner. Each check reports the measured value, the reference, and the
// tolerance it is held to.

#include <functional>
#include <string>
#include <vector>

#include <megl/classifier.hpp>
#include <megl/core.hpp>

namespace megl_test {

struct Check {
  std::string name;
  double got = 0.0;
  double expected = 0.0;
  double tol = 0.0;

  bool pass() const;
  std::string line() const;
};

/// Every hand-derived example: softmax chain, bilinear formula, cell-wise KL,
/// n-gram counting, LCS table, TF-IDF cosine, and friends.
std::vector<Check> derived_checks();

/// Central finite differences against autograd: CE, L1, KL, textual NLL at
/// relative error < 1e-4, and the second-order Grad-CAM path at < 1e-3.
std::vector<Check> gradient_checks();

/// Relative error ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||) of the
/// gradient of scalar `f` with respect to every element of `inputs`.
double finite_difference_error(const std::function<torch::Tensor()>& f,
                               const std::vector<torch::Tensor>& inputs, double step = 1e-6);

/// Feature extractor with no weights: channel k is relu(image) restricted to
/// vertical band k (left half, right half).
class BandBackbone : public megl::Backbone {
 public:
  explicit BandBackbone(int64_t size) : size_(size) {}
  torch::Tensor forward(const torch::Tensor& images) override;
  int64_t in_channels() const override { return 1; }
  int64_t out_channels() const override { return 2; }
  int64_t feature_size(int64_t image_size) const override { return image_size; }

 private:
  int64_t size_;
};

/// 2-class toy classifier over BandBackbone with head rows [1, -0.2] and
/// [-0.2, 1]: class k's evidence lives in band k.
megl::Classifier band_classifier(int64_t size);

/// One 3x3 conv with 1 input and 2 output channels, no norm, no pooling, and
/// a 2-class head: 18 + 2 + 4 + 2 = 26 parameters.
megl::Classifier countable_classifier(int64_t size);

}  // namespace megl_test
