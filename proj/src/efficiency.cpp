#include <algorithm>
#include <chrono>

#include "megl/trainer.hpp"

namespace megl {

EfficiencyReport measure_efficiency(Classifier& classifier, int64_t n_warmup, int64_t n_timed) {
  if (n_timed < 1 || n_warmup < 0) fail(ErrorKind::kDomainError, "need at least one timed run");
  torch::NoGradGuard no_grad;
  classifier->eval();
  const int64_t s = classifier->image_size();
  const int64_t c = classifier->backbone().in_channels();
  const auto input = torch::linspace(0.0, 1.0, c * s * s).view({1, c, s, s});

  for (int64_t i = 0; i < n_warmup; ++i) classifier->forward(input);
  std::vector<double> ms;
  ms.reserve(static_cast<size_t>(n_timed));
  for (int64_t i = 0; i < n_timed; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto out = classifier->forward(input);
    (void)out.logits.sum().item<float>();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  const size_t n = ms.size();
  const double median = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);

  EfficiencyReport rep;
  rep.param_count = parameter_count(*classifier);
  rep.latency_ms = median;
  rep.fps = 1000.0 / median;
  return rep;
}

EfficiencyReport measure_efficiency(const std::filesystem::path& checkpoint, int64_t n_warmup,
                                    int64_t n_timed) {
  auto loaded = load_model(checkpoint);
  return measure_efficiency(loaded.model->classifier, n_warmup, n_timed);
}

}  // namespace megl
