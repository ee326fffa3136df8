#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "megl/checkpoint.hpp"
#include "megl/classifier.hpp"
#include "megl/core.hpp"
#include "megl/data.hpp"
#include "megl/grounding.hpp"
#include "megl/metrics.hpp"
#include "megl/supervision.hpp"

namespace megl {

/// Classifier f plus the grounding stack (frozen E, W_I / W_A, decoder LM).
class MeglModelImpl : public torch::nn::Module {
 public:
  MeglModelImpl(const ExperimentConfig& config, int64_t vocab_size);

  /// Everything the optimizer updates: the classifier, both projections and
  /// the decoder. The auxiliary encoder is excluded.
  std::vector<torch::Tensor> trainable_parameters();

  Classifier classifier{nullptr};
  Grounder grounder{nullptr};
};
TORCH_MODULE(MeglModel);

/// A batch in tensor form.
struct Batch {
  torch::Tensor images;    // (B, 3, S, S)
  torch::Tensor labels;    // (B)
  torch::Tensor masks;     // (B, R, R)
  torch::Tensor has_mask;  // (B) bool
  std::vector<TokenIds> texts;
  std::vector<int64_t> indices;

  int64_t size() const { return labels.numel(); }
};

Batch make_batch(const Dataset& dataset, std::span<const int64_t> indices);
Batch make_batch(const std::vector<Sample>& samples, int64_t annotation_resolution);

/// Which inputs of the textual path keep their gradient connection to the
/// classifier. Used to probe each route in isolation.
struct TextualRoutes {
  bool image_features = true;  // V_I = W_I Z_I
  bool saliency = true;        // V_A = W_A E(I * A_hat)
};

/// Differentiable loss terms for one batch. Undefined tensors mark absent
/// terms.
struct ForwardTerms {
  torch::Tensor logits;
  torch::Tensor pred;
  torch::Tensor saliency;  // (B, S, S) MINMAX Grad-CAM at image resolution
  torch::Tensor visual;
  torch::Tensor dc;
  torch::Tensor textual;
  int64_t n_supervised = 0;
  int64_t n_consistency = 0;
  int64_t n_textual = 0;
};

/// One forward pass computing every enabled term. The Grad-CAM map is
/// computed once and reused for the visual losses and the masked-image path.
/// `create_graph` keeps the map differentiable (second-order path).
ForwardTerms compute_terms(MeglModel& model, const Batch& batch, const PriorSet& priors,
                           const ExperimentConfig& config, bool create_graph,
                           TextualRoutes routes = {});

/// Combines terms as pred + lt * textual + lv * (f * visual + (1 - f) * dc)
/// in double precision, with f the annotated fraction of the batch. Terms
/// whose weight is zero are left out of the differentiated sum.
torch::Tensor combine_objective(const ForwardTerms& terms, const Batch& batch,
                                const ExperimentConfig& config);

LossBreakdown breakdown(const ForwardTerms& terms, const Batch& batch, const torch::Tensor& total);

class Trainer {
 public:
  Trainer(ExperimentConfig config, MeglModel model, PriorSet priors);

  /// One optimizer step on the joint objective.
  LossBreakdown train_step(const Batch& batch);
  LossBreakdown train_step(const std::vector<Sample>& samples);

  MeglModel& model() { return model_; }
  const PriorSet& priors() const { return priors_; }
  const ExperimentConfig& config() const { return config_; }
  torch::optim::AdamW& optimizer() { return *optimizer_; }

 private:
  ExperimentConfig config_;
  MeglModel model_;
  PriorSet priors_;
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  std::optional<LossBreakdown> last_;
};

/// Dataset-level (or class-conditional) prior from the annotated samples; a
/// uniform map when no sample is annotated.
PriorSet build_priors(const Dataset& train, const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
  ClassificationReport classification;
  double miou = 0.0;
  int64_t n_annotated = 0;
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  int64_t n_text = 0;
  int64_t n_samples = 0;

  /// Keys: Accuracy, Precision, Recall, F1 Score, mIoU, B4, R, C, plus
  /// sample counts.
  std::vector<std::pair<std::string, std::string>> entries() const;
  std::string to_text() const;
};

struct EvalOptions {
  bool text = true;
  int64_t batch_size = 64;
};

/// Grad-CAM maps for evaluation explain the predicted class.
EvalReport evaluate(MeglModel& model, const Dataset& dataset, const Vocabulary& vocab,
                    const ExperimentConfig& config, EvalOptions options = {});

// ---------------------------------------------------------------------------
// Training driver and persistence
// ---------------------------------------------------------------------------

struct EpochRecord {
  int64_t epoch = 0;
  LossBreakdown mean;
  EvalReport validation;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path history_file;
  std::vector<EpochRecord> history;
  bool interrupted = false;
};

struct TrainHooks {
  /// Called after every optimizer step with the batch indices and losses.
  std::function<void(int64_t epoch, const Batch&, const LossBreakdown&)> on_step;
  /// Cooperative stop flag; the driver checkpoints and returns when set.
  const std::atomic<bool>* stop = nullptr;
  bool validate_text = true;
};

/// Splits the manifest, builds the vocabulary and priors from the train
/// split, and runs config.epochs epochs. Writes checkpoint.megl,
/// history.tsv, vocab.txt and config.txt under config.output_dir.
TrainResult train(const DatasetManifest& manifest, const ExperimentConfig& config,
                  const TrainHooks& hooks = {});

std::string format_history(const std::vector<EpochRecord>& history);

struct LoadedModel {
  ExperimentConfig config;
  Vocabulary vocab;
  std::vector<std::string> class_names;
  MeglModel model{nullptr};
  PriorSet priors;
};

void save_model(const std::filesystem::path& path, const ExperimentConfig& config,
                const Vocabulary& vocab, const std::vector<std::string>& class_names,
                MeglModel& model, const PriorSet& priors);
LoadedModel load_model(const std::filesystem::path& path);

/// Test-split (or other split) data for a trained checkpoint, reconstructed
/// from the stored config.
Dataset load_split(const LoadedModel& loaded, Split which);

struct Explanation {
  int64_t predicted = 0;
  std::string class_name;
  torch::Tensor saliency;  // (S, S) MINMAX at image resolution
  double saliency_min = 0.0;  // pre-normalization range of the upsampled map
  double saliency_max = 0.0;
  TokenIds tokens;
  std::string rationale;
};

Explanation explain(LoadedModel& loaded, const ImageTensor& image);

// ---------------------------------------------------------------------------
// Efficiency
// ---------------------------------------------------------------------------

struct EfficiencyReport {
  int64_t param_count = 0;
  double latency_ms = 0.0;
  double fps = 0.0;
};

/// Classification-only forward at batch size 1; median latency over
/// `n_timed` runs after `n_warmup` discarded ones. Counts every parameter of
/// the classification path.
EfficiencyReport measure_efficiency(Classifier& classifier, int64_t n_warmup, int64_t n_timed);
EfficiencyReport measure_efficiency(const std::filesystem::path& checkpoint, int64_t n_warmup,
                                    int64_t n_timed);

}  // namespace megl
