#include <cstring>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <megl/data.hpp>
#include <megl/image_io.hpp>
#include <megl/metrics.hpp>
#include <megl/trainer.hpp>

namespace py = pybind11;
using namespace megl;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const FloatArray& array) {
  std::vector<int64_t> shape(array.shape(), array.shape() + array.ndim());
  return torch::from_blob(const_cast<float*>(array.data()), shape, torch::kFloat).clone();
}

FloatArray to_array(const torch::Tensor& tensor) {
  const auto t = tensor.detach().to(torch::kFloat).contiguous();
  FloatArray out(std::vector<py::ssize_t>(t.sizes().begin(), t.sizes().end()));
  std::memcpy(out.mutable_data(), t.data_ptr<float>(), static_cast<size_t>(t.numel()) * sizeof(float));
  return out;
}

py::dict stats_dict(const DatasetStats& s) {
  py::dict d;
  d["total"] = s.total;
  d["with_text"] = s.with_text;
  d["with_visual"] = s.with_visual;
  d["num_classes"] = s.num_classes;
  return d;
}

py::dict losses_dict(const LossBreakdown& b) {
  py::dict d;
  d["pred"] = b.pred;
  d["visual"] = b.visual ? py::cast(*b.visual) : py::none();
  d["dc"] = b.dc ? py::cast(*b.dc) : py::none();
  d["textual"] = b.textual ? py::cast(*b.textual) : py::none();
  d["total"] = b.total;
  return d;
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  for (const auto& [k, v] : r.entries()) d[py::str(k)] = std::stod(v);
  return d;
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  fail(ErrorKind::kDomainError, "split must be train, val or test");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Explanation-guided classifier training with visual and textual rationales";
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

  py::class_<ExperimentConfig>(m, "Config")
      .def(py::init<>())
      .def_static("from_text", [](const std::string& text) { return parse_config(text); })
      .def_static("load", [](const std::filesystem::path& p) { return load_config(p); })
      .def("to_text", [](const ExperimentConfig& c) { return serialize_config(c); })
      .def("save", [](const ExperimentConfig& c, const std::filesystem::path& p) { save_config(c, p); })
      .def("validate", [](const ExperimentConfig& c) { validate(c); })
      .def("__eq__", [](const ExperimentConfig& a, const ExperimentConfig& b) { return a == b; })
      .def("__repr__", [](const ExperimentConfig& c) { return serialize_config(c); })
      .def_readwrite("lambda_visual", &ExperimentConfig::lambda_visual)
      .def_readwrite("lambda_textual", &ExperimentConfig::lambda_textual)
      .def_readwrite("num_classes", &ExperimentConfig::num_classes)
      .def_readwrite("image_size", &ExperimentConfig::image_size)
      .def_readwrite("saliency_resolution", &ExperimentConfig::saliency_resolution)
      .def_readwrite("vocab_size", &ExperimentConfig::vocab_size)
      .def_readwrite("embed_dim", &ExperimentConfig::embed_dim)
      .def_readwrite("max_text_len", &ExperimentConfig::max_text_len)
      .def_readwrite("prefix_tokens", &ExperimentConfig::prefix_tokens)
      .def_readwrite("num_heads", &ExperimentConfig::num_heads)
      .def_readwrite("num_layers", &ExperimentConfig::num_layers)
      .def_readwrite("feature_dim", &ExperimentConfig::feature_dim)
      .def_readwrite("aux_feature_dim", &ExperimentConfig::aux_feature_dim)
      .def_readwrite("epsilon_smoothing", &ExperimentConfig::epsilon_smoothing)
      .def_readwrite("seed", &ExperimentConfig::seed)
      .def_readwrite("learning_rate", &ExperimentConfig::learning_rate)
      .def_readwrite("weight_decay", &ExperimentConfig::weight_decay)
      .def_readwrite("batch_size", &ExperimentConfig::batch_size)
      .def_readwrite("epochs", &ExperimentConfig::epochs)
      .def_readwrite("num_threads", &ExperimentConfig::num_threads)
      .def_readwrite("visual_on", &ExperimentConfig::visual_on)
      .def_readwrite("textual_on", &ExperimentConfig::textual_on)
      .def_readwrite("consistency_on", &ExperimentConfig::consistency_on)
      .def_readwrite("class_conditional_prior", &ExperimentConfig::class_conditional_prior)
      .def_readwrite("miou_threshold", &ExperimentConfig::miou_threshold)
      .def_readwrite("bleu_smoothing", &ExperimentConfig::bleu_smoothing)
      .def_readwrite("train_ratio", &ExperimentConfig::train_ratio)
      .def_readwrite("val_ratio", &ExperimentConfig::val_ratio)
      .def_readwrite("test_ratio", &ExperimentConfig::test_ratio)
      .def_readwrite("manifest", &ExperimentConfig::manifest)
      .def_readwrite("output_dir", &ExperimentConfig::output_dir);

  m.def("tokenize", [](const std::string& text) { return tokenize(text); });

  m.def(
      "generate_synthetic",
      [](const std::filesystem::path& out_dir, int64_t num_samples, int64_t num_classes,
         double annotation_fraction, int64_t image_size, double noise_level, int64_t seed) {
        SyntheticSpec spec{num_samples, num_classes, annotation_fraction, image_size, noise_level, seed};
        return stats_dict(generate_synthetic(spec, out_dir).stats());
      },
      py::arg("out_dir"), py::arg("num_samples") = 2000, py::arg("num_classes") = 8,
      py::arg("annotation_fraction") = 0.2, py::arg("image_size") = 32, py::arg("noise_level") = 0.5,
      py::arg("seed") = 0, "Writes a synthetic shapes dataset and returns its statistics.");

  m.def("manifest_stats", [](const std::filesystem::path& p) { return stats_dict(load_manifest(p).stats()); });

  m.def(
      "train",
      [](const ExperimentConfig& config, bool validate_text) {
        TrainResult result;
        {
          py::gil_scoped_release release;
          TrainHooks hooks;
          hooks.validate_text = validate_text;
          result = train(load_manifest(config.manifest), config, hooks);
        }
        py::list epochs;
        for (const auto& rec : result.history) {
          py::dict e;
          e["epoch"] = rec.epoch;
          e["losses"] = losses_dict(rec.mean);
          e["validation"] = report_dict(rec.validation);
          epochs.append(e);
        }
        py::dict out;
        out["checkpoint"] = result.checkpoint;
        out["history_file"] = result.history_file;
        out["history"] = epochs;
        return out;
      },
      py::arg("config"), py::arg("validate_text") = true,
      "Trains on config.manifest and writes the run under config.output_dir.");

  py::class_<LoadedModel>(m, "Model")
      .def(py::init([](const std::filesystem::path& p) { return load_model(p); }), py::arg("checkpoint"))
      .def_readonly("config", &LoadedModel::config)
      .def_readonly("class_names", &LoadedModel::class_names)
      .def(
          "explain",
          [](LoadedModel& model, const FloatArray& image) {
            const auto input = ImageTensor::from_tensor(to_tensor(image));
            Explanation e;
            {
              py::gil_scoped_release release;
              e = explain(model, input);
            }
            py::dict d;
            d["predicted"] = e.predicted;
            d["class_name"] = e.class_name;
            d["saliency"] = to_array(e.saliency);
            d["rationale"] = e.rationale;
            d["tokens"] = e.tokens;
            return d;
          },
          py::arg("image"), "Classifies a (C, H, W) image in [0, 1] and explains the prediction.")
      .def(
          "evaluate",
          [](LoadedModel& model, const std::string& split, bool text) {
            const auto which = parse_split(split);
            EvalOptions options;
            options.text = text;
            EvalReport report;
            {
              py::gil_scoped_release release;
              const auto data = load_split(model, which);
              report = evaluate(model.model, data, model.vocab, model.config, options);
            }
            return report_dict(report);
          },
          py::arg("split") = "test", py::arg("text") = true)
      .def(
          "efficiency",
          [](LoadedModel& model, int64_t n_warmup, int64_t n_timed) {
            EfficiencyReport r;
            {
              py::gil_scoped_release release;
              r = measure_efficiency(model.model->classifier, n_warmup, n_timed);
            }
            py::dict d;
            d["param_count"] = r.param_count;
            d["latency_ms"] = r.latency_ms;
            d["fps"] = r.fps;
            return d;
          },
          py::arg("n_warmup") = 10, py::arg("n_timed") = 100);

  m.def("read_image", [](const std::filesystem::path& p) { return to_array(read_pnm(p)); });

  m.def(
      "bleu4",
      [](const Tokens& candidate, const std::vector<Tokens>& references, bool smoothing) {
        return bleu4(candidate, references, {.smoothing = smoothing});
      },
      py::arg("candidate"), py::arg("references"), py::arg("smoothing") = false);
  m.def(
      "rouge_l",
      [](const Tokens& candidate, const std::vector<Tokens>& references) { return rouge_l(candidate, references); },
      py::arg("candidate"), py::arg("references"));
  m.def(
      "cider",
      [](const Tokens& candidate, const std::vector<Tokens>& references,
         const std::vector<std::vector<Tokens>>& corpus) {
        return cider(candidate, references, CiderCorpusStats::build(corpus));
      },
      py::arg("candidate"), py::arg("references"), py::arg("corpus"));
  m.def(
      "miou",
      [](const FloatArray& pred, const FloatArray& truth, double threshold) {
        return miou(SaliencyMap::make(to_tensor(pred), Normalization::kRaw),
                    SaliencyMap::make(to_tensor(truth), Normalization::kRaw), threshold);
      },
      py::arg("pred"), py::arg("truth"), py::arg("threshold") = 0.5);
}
