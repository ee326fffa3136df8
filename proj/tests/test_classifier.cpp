#include "testing.hpp"

#include <cmath>

#include <megl/classifier.hpp>

#include "checks.hpp"

using namespace megl;

TEST_CASE("zero weights and a zero image give uniform softmax") {
  ExperimentConfig c;
  auto net = make_classifier(c);
  {
    torch::NoGradGuard no_grad;
    for (auto& p : net->parameters()) p.zero_();
  }
  const auto out = net->forward(torch::zeros({1, 3, 32, 32}));
  CHECK(torch::equal(out.logits, torch::zeros({1, c.num_classes})));
  CHECK(torch::allclose(torch::softmax(out.logits, 1), torch::full({1, c.num_classes}, 1.0 / 8)));
}

TEST_CASE("logit count follows the configured classes") {
  ExperimentConfig c;
  c.num_classes = 40;
  auto net = make_classifier(c);
  const auto out = net->forward(torch::rand({2, 3, 32, 32}));
  CHECK(out.logits.sizes() == torch::IntArrayRef({2, 40}));
  CHECK(out.features.sizes() == torch::IntArrayRef({2, 128, 4, 4}));
  CHECK(out.pooled.sizes() == torch::IntArrayRef({2, 128}));
  CHECK(torch::allclose(out.pooled, out.features.mean({2, 3})));
}

TEST_CASE("forward is deterministic and rejects wrong sizes") {
  seed_everything(2);
  ExperimentConfig c;
  auto net = make_classifier(c);
  const auto image = ImageTensor::from_tensor(torch::rand({3, 32, 32}));
  const auto a = forward(net, image).logits;
  const auto b = forward(net, image).logits;
  CHECK(megl_test::bit_equal(a, b));
  CHECK(torch::isfinite(a).all().item<bool>());
  CHECK_ERROR_KIND(forward(net, ImageTensor::from_tensor(torch::rand({3, 16, 16}))), ErrorKind::kShapeMismatch);
  CHECK_ERROR_KIND(net->forward(torch::rand({1, 1, 32, 32})), ErrorKind::kShapeMismatch);
}

TEST_CASE("predict takes the lowest index among maxima") {
  CHECK(predict(torch::tensor({0.1, 2.0, -1.0})) == 1);
  CHECK(predict(torch::tensor({3.0, 3.0})) == 0);
  const auto logits = torch::tensor({0.3, -0.7, 0.9, 0.1});
  CHECK(predict(logits + 17.5) == predict(logits));
  CHECK(predict_batch(torch::tensor({{0.0, 1.0}, {2.0, 2.0}})) == std::vector<int64_t>{1, 0});
  CHECK_ERROR_KIND(predict(torch::zeros({0})), ErrorKind::kEmptyLogits);
}

TEST_CASE("prediction loss values") {
  CHECK(prediction_loss(torch::tensor({0.0, 0.0}, torch::kDouble), 0).item<double>() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(prediction_loss(torch::tensor({30.0, -30.0}, torch::kDouble), 0).item<double>() < 1e-9);
  CHECK(std::isfinite(prediction_loss(torch::tensor({1000.0, -1000.0}), 1).item<double>()));
  CHECK_ERROR_KIND(prediction_loss(torch::tensor({0.0, 0.0}), 2), ErrorKind::kLabelOutOfRange);
  CHECK_ERROR_KIND(prediction_loss(torch::tensor({0.0, 0.0}), -1), ErrorKind::kLabelOutOfRange);
}

TEST_CASE("prediction loss is non-negative and shift invariant") {
  torch::manual_seed(1);
  for (int i = 0; i < 20; ++i) {
    const auto logits = torch::randn({6}, torch::kDouble) * 3;
    const int64_t label = i % 6;
    const double base = prediction_loss(logits, label).item<double>();
    CHECK(base >= 0.0);
    CHECK(std::abs(prediction_loss(logits + 4.25, label).item<double>() - base) < 1e-6);
  }
}

TEST_CASE("prediction loss gradient is softmax minus one-hot") {
  const auto logits = torch::tensor({0.5, -1.0, 2.0}, torch::kDouble).requires_grad_(true);
  prediction_loss(logits, 1).backward();
  auto expected = torch::softmax(logits.detach(), 0);
  expected[1] -= 1.0;
  CHECK(torch::allclose(logits.grad(), expected, 0.0, 1e-12));
}

TEST_CASE("batched loss is the mean of per-sample losses") {
  const auto logits = torch::tensor({{0.5, -1.0}, {2.0, 0.1}}, torch::kDouble);
  const auto labels = torch::tensor({1, 0}, torch::kLong);
  const double mean = 0.5 * (prediction_loss(logits[0], 1).item<double>() + prediction_loss(logits[1], 0).item<double>());
  CHECK(prediction_loss(logits, labels).item<double>() == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("backbones are swappable") {
  auto net = megl_test::band_classifier(8);
  const auto out = net->forward(torch::rand({2, 1, 8, 8}));
  CHECK(out.features.sizes() == torch::IntArrayRef({2, 2, 8, 8}));
  CHECK(out.logits.sizes() == torch::IntArrayRef({2, 2}));
}

TEST_CASE("parameter count of the hand-countable network") {
  auto net = megl_test::countable_classifier(5);
  CHECK(parameter_count(*net) == 26);
  ExperimentConfig c;
  auto full = make_classifier(c);
  int64_t manual = 0;
  const std::vector<int64_t> ch{3, 16, 32, 64, 128};
  for (size_t i = 0; i + 1 < ch.size(); ++i) manual += ch[i] * ch[i + 1] * 9 + ch[i + 1] + 2 * ch[i + 1];
  manual += 128 * 8 + 8;
  CHECK(parameter_count(*full) == manual);
}
