#include "megl/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "megl/image_io.hpp"
#include "megl/saliency.hpp"

namespace megl {

namespace fs = std::filesystem;

MeglModelImpl::MeglModelImpl(const ExperimentConfig& config, int64_t vocab_size) {
  classifier = register_module("classifier", make_classifier(config));
  grounder = register_module("grounder", Grounder(config, vocab_size));
}

std::vector<torch::Tensor> MeglModelImpl::trainable_parameters() {
  auto params = classifier->parameters();
  for (auto& p : grounder->trainable_parameters()) params.push_back(p);
  return params;
}

Batch make_batch(const Dataset& dataset, std::span<const int64_t> indices) {
  if (indices.empty()) fail(ErrorKind::kEmptyInput, "empty batch");
  const auto idx = torch::tensor(std::vector<int64_t>(indices.begin(), indices.end()), torch::kLong);
  Batch b;
  b.images = dataset.images.index_select(0, idx);
  b.labels = dataset.labels.index_select(0, idx);
  b.masks = dataset.masks.index_select(0, idx);
  b.has_mask = dataset.has_mask.index_select(0, idx);
  for (int64_t i : indices) {
    if (i < 0 || i >= dataset.size()) fail(ErrorKind::kRangeError, "batch index out of range");
    b.texts.push_back(dataset.texts[static_cast<size_t>(i)]);
  }
  b.indices.assign(indices.begin(), indices.end());
  return b;
}

Batch make_batch(const std::vector<Sample>& samples, int64_t annotation_resolution) {
  if (samples.empty()) fail(ErrorKind::kEmptyInput, "empty batch");
  const int64_t r = annotation_resolution;
  std::vector<torch::Tensor> images, masks;
  std::vector<int64_t> labels;
  std::vector<bool> has;
  Batch b;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto& img = s.image.data();
    images.push_back(img.size(0) == 1 ? img.expand({3, img.size(1), img.size(2)}) : img);
    labels.push_back(s.label);
    if (s.visual_explanation) {
      auto g = s.visual_explanation->grid().to(torch::kFloat);
      if (g.size(0) != r || g.size(1) != r) g = resample_maps(g.unsqueeze(0), r, r)[0];
      masks.push_back(minmax_normalize(g));
      has.push_back(true);
    } else {
      masks.push_back(torch::zeros({r, r}));
      has.push_back(false);
    }
    b.texts.push_back(s.text_explanation.value_or(TokenIds{}));
    b.indices.push_back(static_cast<int64_t>(i));
  }
  b.images = torch::stack(images).to(torch::kFloat);
  b.labels = torch::tensor(labels, torch::kLong);
  b.masks = torch::stack(masks);
  b.has_mask = torch::zeros({static_cast<int64_t>(has.size())}, torch::kBool);
  for (size_t i = 0; i < has.size(); ++i) b.has_mask[static_cast<int64_t>(i)] = static_cast<bool>(has[i]);
  return b;
}

ForwardTerms compute_terms(MeglModel& model, const Batch& batch, const PriorSet& priors,
                           const ExperimentConfig& config, bool create_graph, TextualRoutes routes) {
  ForwardTerms t;
  auto out = model->classifier->forward(batch.images);
  t.logits = out.logits;
  t.pred = prediction_loss(out.logits, batch.labels);

  const bool visual_path = config.visual_on || config.consistency_on;
  if (!visual_path && !config.textual_on) return t;

  const auto targets = config.saliency_target == SaliencyTarget::kLabel
                           ? batch.labels
                           : torch::tensor(predict_batch(out.logits.detach()), torch::kLong);
  const auto raw = grad_cam_maps(out.features, out.logits, targets, create_graph);
  const int64_t s = config.image_size;
  t.saliency = upsample_maps(raw, s, s);

  if (visual_path) {
    const int64_t r = config.saliency_resolution;
    const auto on_grid = r == s ? t.saliency : minmax_normalize(resample_maps(t.saliency, r, r));
    auto v = combined_visual_batch(on_grid, batch.masks, batch.has_mask, batch.labels, priors,
                                   config.epsilon_smoothing, config.visual_on, config.consistency_on);
    t.visual = v.supervised;
    t.dc = v.consistency;
    t.n_supervised = v.n_supervised;
    t.n_consistency = v.n_consistency;
  }

  if (config.textual_on) {
    std::vector<int64_t> rows;
    std::vector<TokenIds> texts;
    for (size_t i = 0; i < batch.texts.size(); ++i) {
      if (batch.texts[i].empty()) continue;
      rows.push_back(static_cast<int64_t>(i));
      texts.push_back(batch.texts[i]);
    }
    if (!rows.empty()) {
      const auto idx = torch::tensor(rows, torch::kLong);
      auto z_image = out.pooled.index_select(0, idx);
      auto maps = t.saliency.index_select(0, idx);
      if (!routes.image_features) z_image = z_image.detach();
      if (!routes.saliency) maps = maps.detach();
      auto& g = model->grounder;
      const auto z_aux = g->aux_encoder->forward(mask_images(batch.images.index_select(0, idx), maps));
      const auto prefix = g->projector->forward(z_image, z_aux);
      const auto packed =
          pack_targets(texts, g->decoder->options().vocab_size, config.max_text_len);
      t.textual = textual_loss(prefix, packed, g->decoder, config.textual_reduction);
      t.n_textual = static_cast<int64_t>(rows.size());
    }
  }
  return t;
}

namespace {

double annotated_fraction(const Batch& batch) {
  return batch.has_mask.to(torch::kDouble).mean().item<double>();
}

}  // namespace

torch::Tensor combine_objective(const ForwardTerms& terms, const Batch& batch,
                                const ExperimentConfig& config) {
  const double f = annotated_fraction(batch);
  const double lv = config.lambda_visual;
  const double lt = config.lambda_textual;
  auto total = terms.pred.to(torch::kDouble);
  if (lt > 0.0 && terms.textual.defined()) total = total + lt * terms.textual.to(torch::kDouble);
  if (lv > 0.0 && (terms.visual.defined() || terms.dc.defined())) {
    auto visual = torch::zeros({}, torch::kDouble);
    if (terms.visual.defined()) visual = visual + f * terms.visual.to(torch::kDouble);
    if (terms.dc.defined()) visual = visual + (1.0 - f) * terms.dc.to(torch::kDouble);
    total = total + lv * visual;
  }
  return total;
}

LossBreakdown breakdown(const ForwardTerms& terms, const Batch& batch, const torch::Tensor& total) {
  LossBreakdown b;
  b.pred = terms.pred.item<double>();
  if (terms.visual.defined()) b.visual = terms.visual.item<double>();
  if (terms.dc.defined()) b.dc = terms.dc.item<double>();
  if (terms.textual.defined()) b.textual = terms.textual.item<double>();
  b.total = total.item<double>();
  b.annotated_fraction = annotated_fraction(batch);
  b.n_supervised = terms.n_supervised;
  b.n_consistency = terms.n_consistency;
  return b;
}

Trainer::Trainer(ExperimentConfig config, MeglModel model, PriorSet priors)
    : config_(std::move(config)), model_(std::move(model)), priors_(std::move(priors)) {
  validate(config_);
  optimizer_ = std::make_unique<torch::optim::AdamW>(
      model_->trainable_parameters(),
      torch::optim::AdamWOptions(config_.learning_rate).weight_decay(config_.weight_decay));
}

namespace {

std::string describe(const LossBreakdown& b) {
  const auto opt = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string("NA"); };
  std::ostringstream os;
  os << "pred=" << format_real(b.pred) << " visual=" << opt(b.visual) << " dc=" << opt(b.dc)
     << " textual=" << opt(b.textual) << " total=" << format_real(b.total);
  return os.str();
}

}  // namespace

LossBreakdown Trainer::train_step(const Batch& batch) {
  model_->train();
  const bool visual_grad =
      config_.lambda_visual > 0.0 && (config_.visual_on || config_.consistency_on);
  const bool text_grad = config_.lambda_textual > 0.0 && config_.textual_on;
  const auto terms = compute_terms(model_, batch, priors_, config_, visual_grad || text_grad);
  auto total = combine_objective(terms, batch, config_);
  auto bd = breakdown(terms, batch, total);

  const auto finite = [](const std::optional<double>& v) { return !v || std::isfinite(*v); };
  if (!std::isfinite(bd.total) || !std::isfinite(bd.pred) || !finite(bd.visual) || !finite(bd.dc) ||
      !finite(bd.textual)) {
    std::ostringstream os;
    os << "non-finite loss (" << describe(bd) << ") on batch indices [";
    for (size_t i = 0; i < batch.indices.size(); ++i) os << (i ? "," : "") << batch.indices[i];
    os << "]";
    if (last_) os << "; previous step: " << describe(*last_);
    fail(ErrorKind::kNonFiniteLoss, os.str());
  }

  optimizer_->zero_grad();
  total.backward();
  optimizer_->step();
  last_ = bd;
  return bd;
}

LossBreakdown Trainer::train_step(const std::vector<Sample>& samples) {
  for (const auto& s : samples) validate_sample(s, config_.num_classes, config_.saliency_resolution);
  return train_step(make_batch(samples, config_.saliency_resolution));
}

PriorSet build_priors(const Dataset& train, const ExperimentConfig& config) {
  const auto idx = torch::nonzero(train.has_mask).view(-1);
  if (idx.numel() == 0) {
    const int64_t r = config.saliency_resolution;
    auto uniform = torch::full({r, r}, 1.0 / static_cast<double>(r * r), torch::kDouble);
    return PriorSet::from_arrays({{"prior/dataset", uniform}}, 0);
  }
  return PriorSet::build(train.masks.index_select(0, idx), train.labels.index_select(0, idx),
                         config.num_classes, config.class_conditional_prior);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, std::string>> EvalReport::entries() const {
  std::vector<std::pair<std::string, std::string>> out{
      {"Accuracy", format_real(classification.accuracy)},
      {"Precision", format_real(classification.macro_precision)},
      {"Recall", format_real(classification.macro_recall)},
      {"F1 Score", format_real(classification.macro_f1)},
  };
  if (n_annotated > 0) out.emplace_back("mIoU", format_real(miou));
  if (n_text > 0) {
    out.emplace_back("B4", format_real(bleu4));
    out.emplace_back("R", format_real(rouge_l));
    out.emplace_back("C", format_real(cider));
  }
  out.emplace_back("samples", std::to_string(n_samples));
  out.emplace_back("annotated", std::to_string(n_annotated));
  out.emplace_back("text_samples", std::to_string(n_text));
  return out;
}

std::string EvalReport::to_text() const {
  std::string s;
  for (const auto& [k, v] : entries()) s += k + " = " + v + "\n";
  return s;
}

EvalReport evaluate(MeglModel& model, const Dataset& dataset, const Vocabulary& vocab,
                    const ExperimentConfig& config, EvalOptions options) {
  if (dataset.size() == 0) fail(ErrorKind::kEmptyDataset, "nothing to evaluate");
  model->eval();
  ConfusionAccumulator acc(config.num_classes);
  double iou_sum = 0.0;
  int64_t n_iou = 0;
  std::vector<Tokens> candidates;
  std::vector<std::vector<Tokens>> references;
  const int64_t s = config.image_size;
  const int64_t r = config.saliency_resolution;

  for (int64_t start = 0; start < dataset.size(); start += options.batch_size) {
    const int64_t end = std::min(dataset.size(), start + options.batch_size);
    std::vector<int64_t> idx(static_cast<size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto batch = make_batch(dataset, idx);

    auto out = model->classifier->forward(batch.images);
    const auto preds = predict_batch(out.logits.detach());
    const auto labels = batch.labels.contiguous();
    for (size_t i = 0; i < preds.size(); ++i) {
      acc.add(labels[static_cast<int64_t>(i)].item<int64_t>(), preds[i]);
    }
    const auto pred_t = torch::tensor(preds, torch::kLong);
    const auto raw = grad_cam_maps(out.features, out.logits, pred_t, false);
    torch::NoGradGuard no_grad;
    const auto sal = upsample_maps(raw.detach(), s, s);

    const auto ann_idx = torch::nonzero(batch.has_mask).view(-1);
    if (ann_idx.numel() > 0) {
      const auto on_grid = r == s ? sal : minmax_normalize(resample_maps(sal, r, r));
      const auto ious = iou_batch(on_grid.index_select(0, ann_idx),
                                  batch.masks.index_select(0, ann_idx), config.miou_threshold);
      iou_sum += ious.sum().item<double>();
      n_iou += ann_idx.numel();
    }

    if (!options.text) continue;
    std::vector<int64_t> rows;
    for (size_t i = 0; i < batch.texts.size(); ++i) {
      if (!batch.texts[i].empty()) rows.push_back(static_cast<int64_t>(i));
    }
    if (rows.empty()) continue;
    const auto ridx = torch::tensor(rows, torch::kLong);
    auto& g = model->grounder;
    const auto z_aux =
        g->aux_encoder->forward(mask_images(batch.images.index_select(0, ridx), sal.index_select(0, ridx)));
    const auto prefix = g->projector->forward(out.pooled.detach().index_select(0, ridx), z_aux);
    const auto generated = generate_batch(prefix, g->decoder, config.max_text_len);
    for (size_t k = 0; k < rows.size(); ++k) {
      auto cand = tokenize(vocab.decode(generated[k]));
      // An empty generation is scored as a single unknown token.
      if (cand.empty()) cand.push_back(vocab.token(Vocabulary::kUnk));
      candidates.push_back(std::move(cand));
      references.push_back({tokenize(vocab.decode(batch.texts[static_cast<size_t>(rows[k])]))});
    }
  }

  EvalReport rep;
  rep.classification = classification_report(acc);
  rep.n_samples = dataset.size();
  rep.n_annotated = n_iou;
  rep.miou = n_iou > 0 ? iou_sum / static_cast<double>(n_iou) : 0.0;
  rep.n_text = static_cast<int64_t>(candidates.size());
  if (!candidates.empty()) {
    rep.bleu4 = corpus_bleu4(candidates, references, BleuOptions{config.bleu_smoothing});
    const auto stats = CiderCorpusStats::build(references);
    double rsum = 0.0, csum = 0.0;
    for (size_t i = 0; i < candidates.size(); ++i) {
      rsum += rouge_l(candidates[i], references[i]);
      csum += cider(candidates[i], references[i], stats);
    }
    rep.rouge_l = rsum / static_cast<double>(candidates.size());
    rep.cider = csum / static_cast<double>(candidates.size());
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

std::string format_history(const std::vector<EpochRecord>& history) {
  const auto opt = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string("NA"); };
  std::ostringstream os;
  os << "epoch\tpred\tvisual\tdc\ttextual\ttotal\tannotated_fraction\tval_accuracy\tval_precision"
        "\tval_recall\tval_f1\tval_miou\tval_b4\tval_rouge_l\tval_cider\n";
  for (const auto& rec : history) {
    const auto& m = rec.mean;
    const auto& v = rec.validation;
    const bool has_val = v.n_samples > 0;
    const auto val = [&](double x, bool present) { return present ? format_real(x) : std::string("NA"); };
    os << rec.epoch << '\t' << format_real(m.pred) << '\t' << opt(m.visual) << '\t' << opt(m.dc) << '\t'
       << opt(m.textual) << '\t' << format_real(m.total) << '\t' << format_real(m.annotated_fraction)
       << '\t' << val(v.classification.accuracy, has_val) << '\t'
       << val(v.classification.macro_precision, has_val) << '\t'
       << val(v.classification.macro_recall, has_val) << '\t' << val(v.classification.macro_f1, has_val)
       << '\t' << val(v.miou, v.n_annotated > 0) << '\t' << val(v.bleu4, v.n_text > 0) << '\t'
       << val(v.rouge_l, v.n_text > 0) << '\t' << val(v.cider, v.n_text > 0) << '\n';
  }
  return os.str();
}

namespace {

struct RunningMean {
  double sum = 0.0;
  int64_t n = 0;
  void add(const std::optional<double>& v) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  std::optional<double> get() const {
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kMissingFile, "cannot write '" + path.string() + "'");
  out << text;
}

}  // namespace

TrainResult train(const DatasetManifest& manifest, const ExperimentConfig& input_config,
                  const TrainHooks& hooks) {
  ExperimentConfig config = input_config;
  validate(config);
  if (!config.manifest.empty()) config.manifest = fs::absolute(config.manifest).lexically_normal().string();
  if (config.num_threads > 0) torch::set_num_threads(static_cast<int>(config.num_threads));

  const auto parts = split(manifest, {config.train_ratio, config.val_ratio, config.test_ratio}, config.seed);
  const auto vocab = Vocabulary::build(rationale_corpus(parts.train), config.vocab_size);
  const auto train_ds = load_dataset(parts.train, vocab, config);
  if (train_ds.size() == 0) fail(ErrorKind::kEmptyDataset, "train split is empty");
  const auto val_ds = load_dataset(parts.val, vocab, config);
  auto priors = build_priors(train_ds, config);

  seed_everything(config.seed);
  MeglModel model(config, vocab.size());
  Trainer trainer(config, model, priors);

  const fs::path out_dir = config.output_dir;
  fs::create_directories(out_dir);
  TrainResult result;
  result.history_file = out_dir / "history.tsv";
  result.checkpoint = out_dir / "checkpoint.megl";

  for (int64_t epoch = 0; epoch < config.epochs && !result.interrupted; ++epoch) {
    const auto order = epoch_order(train_ds.size(), config.seed, epoch);
    RunningMean pred, visual, dc, textual, total, frac;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch_size)) {
      if (hooks.stop && hooks.stop->load()) {
        result.interrupted = true;
        break;
      }
      const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
      const auto batch = make_batch(train_ds, std::span<const int64_t>(order.data() + start, end - start));
      const auto bd = trainer.train_step(batch);
      if (hooks.on_step) hooks.on_step(epoch, batch, bd);
      pred.add(bd.pred);
      visual.add(bd.visual);
      dc.add(bd.dc);
      textual.add(bd.textual);
      total.add(bd.total);
      frac.add(bd.annotated_fraction);
    }
    if (pred.n == 0) break;
    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean.pred = *pred.get();
    rec.mean.visual = visual.get();
    rec.mean.dc = dc.get();
    rec.mean.textual = textual.get();
    rec.mean.total = *total.get();
    rec.mean.annotated_fraction = *frac.get();
    if (val_ds.size() > 0) {
      rec.validation = evaluate(model, val_ds, vocab, config, EvalOptions{hooks.validate_text, 64});
    }
    result.history.push_back(rec);
    write_text(result.history_file, format_history(result.history));
  }
  if (result.history.empty()) write_text(result.history_file, format_history(result.history));

  save_model(result.checkpoint, config, vocab, manifest.class_names, model, trainer.priors());
  vocab.save(out_dir / "vocab.txt");
  save_config(config, out_dir / "config.txt");
  return result;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

void save_model(const fs::path& path, const ExperimentConfig& config, const Vocabulary& vocab,
                const std::vector<std::string>& class_names, MeglModel& model, const PriorSet& priors) {
  Checkpoint ck;
  ck.config = config;
  export_module(*model, "model/", ck);
  for (auto& entry : priors.arrays()) ck.arrays.push_back(std::move(entry));
  ck.texts["vocab"] = vocab.to_text();
  std::string names;
  for (const auto& n : class_names) names += n + "\n";
  ck.texts["class_names"] = names;
  ck.texts["prior_contributors"] = std::to_string(priors.empty() ? 0 : priors.dataset().n_contributors);
  write_checkpoint(path, ck);
}

LoadedModel load_model(const fs::path& path) {
  const auto ck = read_checkpoint(path);
  LoadedModel lm;
  lm.config = ck.config;
  const auto text = [&](const std::string& key) -> const std::string& {
    const auto it = ck.texts.find(key);
    if (it == ck.texts.end()) fail(ErrorKind::kCorruptCheckpoint, "checkpoint lacks '" + key + "'");
    return it->second;
  };
  lm.vocab = Vocabulary::from_text(text("vocab"));
  std::istringstream names(text("class_names"));
  for (std::string line; std::getline(names, line);) {
    if (!line.empty()) lm.class_names.push_back(line);
  }
  lm.model = MeglModel(lm.config, lm.vocab.size());
  import_module(*lm.model, "model/", ck);
  lm.priors = PriorSet::from_arrays(ck.with_prefix("prior/"), std::stoll(text("prior_contributors")));
  return lm;
}

Dataset load_split(const LoadedModel& loaded, Split which) {
  const auto& c = loaded.config;
  if (c.manifest.empty()) fail(ErrorKind::kMissingFile, "checkpoint config names no manifest");
  const auto parts = split(load_manifest(c.manifest), {c.train_ratio, c.val_ratio, c.test_ratio}, c.seed);
  switch (which) {
    case Split::kTrain: return load_dataset(parts.train, loaded.vocab, c);
    case Split::kVal: return load_dataset(parts.val, loaded.vocab, c);
    case Split::kTest: return load_dataset(parts.test, loaded.vocab, c);
  }
  fail(ErrorKind::kDomainError, "unknown split");
}

Explanation explain(LoadedModel& loaded, const ImageTensor& image) {
  const auto& c = loaded.config;
  if (image.height() != c.image_size || image.width() != c.image_size) {
    fail(ErrorKind::kShapeMismatch, "image must be " + std::to_string(c.image_size) + "x" +
                                        std::to_string(c.image_size));
  }
  auto x = image.data().to(torch::kFloat);
  if (x.size(0) == 1) x = x.expand({3, x.size(1), x.size(2)});
  x = x.unsqueeze(0).contiguous();

  auto& model = loaded.model;
  model->eval();
  auto out = model->classifier->forward(x);
  Explanation ex;
  ex.predicted = predict(out.logits[0].detach());
  ex.class_name = ex.predicted < static_cast<int64_t>(loaded.class_names.size())
                      ? loaded.class_names[static_cast<size_t>(ex.predicted)]
                      : std::to_string(ex.predicted);
  const auto raw = grad_cam_maps(out.features, out.logits, torch::tensor({ex.predicted}), false).detach();

  torch::NoGradGuard no_grad;
  const auto up = resample_maps(raw, c.image_size, c.image_size);
  ex.saliency_min = up.min().item<double>();
  ex.saliency_max = up.max().item<double>();
  const auto sal = minmax_normalize(up);
  ex.saliency = sal[0];

  auto& g = model->grounder;
  const auto z_aux = g->aux_encoder->forward(mask_images(x, sal));
  const auto prefix = g->projector->forward(out.pooled.detach(), z_aux);
  ex.tokens = generate(prefix, g->decoder, c.max_text_len);
  ex.rationale = loaded.vocab.decode(ex.tokens);
  return ex;
}

}  // namespace megl
