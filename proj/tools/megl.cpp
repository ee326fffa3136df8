// megl command line: train, eval, explain, data synth|stats, bench.

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include "megl/data.hpp"
#include "megl/image_io.hpp"
#include "megl/trainer.hpp"

namespace fs = std::filesystem;

namespace {

std::atomic<bool> g_stop{false};

void on_sigint(int) { g_stop.store(true); }

// Applies "key=value" overrides on top of a parsed config by editing its
// serialized form, so the usual parser validates every value.
megl::ExperimentConfig apply_overrides(const megl::ExperimentConfig& base,
                                       const std::vector<std::string>& overrides) {
  if (overrides.empty()) return base;
  std::istringstream in(megl::serialize_config(base));
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      megl::fail(megl::ErrorKind::kParseError, "override '" + kv + "' is not key=value");
    }
    const auto key = kv.substr(0, eq);
    std::erase_if(lines, [&](const std::string& l) { return l.rfind(key + " =", 0) == 0; });
    lines.push_back(key + " = " + kv.substr(eq + 1));
  }
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  return megl::parse_config(text);
}

megl::Split parse_split(const std::string& s) {
  if (s == "train") return megl::Split::kTrain;
  if (s == "val") return megl::Split::kVal;
  if (s == "test") return megl::Split::kTest;
  megl::fail(megl::ErrorKind::kDomainError, "unknown split '" + s + "'");
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) megl::fail(megl::ErrorKind::kMissingFile, "cannot write '" + path.string() + "'");
  out << text;
}

int run(int argc, char** argv) {
  CLI::App app{"Multimodal explanation-guided learning"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  std::string config_path;
  std::vector<std::string> overrides;
  bool quiet = false;
  train_cmd->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--set", overrides, "Override a config entry (key=value)");
  train_cmd->add_flag("--quiet", quiet, "Only print the final summary");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  std::string checkpoint;
  std::string split_name = "test";
  std::string report_path;
  bool no_text = false;
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--split", split_name, "train, val or test")->capture_default_str();
  eval_cmd->add_option("--output", report_path, "Also write the report here");
  eval_cmd->add_flag("--no-text", no_text, "Skip rationale generation and text metrics");

  // explain
  auto* explain_cmd = app.add_subcommand("explain", "Explain one image");
  std::string image_path;
  std::string out_dir = ".";
  explain_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  explain_cmd->add_option("--image", image_path, "PPM or PGM image")->required();
  explain_cmd->add_option("--out-dir", out_dir, "Where to write the outputs")->capture_default_str();

  // data
  auto* data_cmd = app.add_subcommand("data", "Dataset utilities");
  data_cmd->require_subcommand(1);
  auto* synth_cmd = data_cmd->add_subcommand("synth", "Generate the synthetic shapes dataset");
  megl::SyntheticSpec spec;
  std::string synth_out;
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--samples", spec.num_samples)->capture_default_str();
  synth_cmd->add_option("--classes", spec.num_classes)->capture_default_str();
  synth_cmd->add_option("--annotated", spec.visual_annotation_fraction, "Fraction with masks")
      ->capture_default_str();
  synth_cmd->add_option("--size", spec.image_size)->capture_default_str();
  synth_cmd->add_option("--noise", spec.noise_level)->capture_default_str();
  synth_cmd->add_option("--seed", spec.seed)->capture_default_str();
  auto* stats_cmd = data_cmd->add_subcommand("stats", "Count records and annotations");
  std::string manifest_path;
  stats_cmd->add_option("--manifest", manifest_path, "Manifest file")->required();

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "Classification latency and parameter count");
  int64_t warmup = 10;
  int64_t timed = 100;
  bench_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  bench_cmd->add_option("--warmup", warmup)->capture_default_str();
  bench_cmd->add_option("--timed", timed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  if (*train_cmd) {
    auto config = apply_overrides(megl::load_config(config_path), overrides);
    if (config.manifest.empty()) {
      megl::fail(megl::ErrorKind::kMissingFile, "config names no manifest");
    }
    // A relative manifest path is taken relative to the config file.
    fs::path mp = config.manifest;
    if (mp.is_relative() && !fs::exists(mp)) mp = fs::path(config_path).parent_path() / mp;
    config.manifest = mp.string();
    const auto manifest = megl::load_manifest(mp);

    std::signal(SIGINT, on_sigint);
    megl::TrainHooks hooks;
    hooks.stop = &g_stop;
    const auto result = megl::train(manifest, config, hooks);
    if (!quiet) std::cout << megl::format_history(result.history);
    if (result.interrupted) std::cout << "interrupted; checkpoint written\n";
    std::cout << "checkpoint = " << result.checkpoint.string() << "\n";
    std::cout << "history = " << result.history_file.string() << "\n";
    return 0;
  }

  if (*eval_cmd) {
    auto loaded = megl::load_model(checkpoint);
    const auto ds = megl::load_split(loaded, parse_split(split_name));
    const auto report = megl::evaluate(loaded.model, ds, loaded.vocab, loaded.config,
                                       megl::EvalOptions{!no_text, 64});
    const auto text = report.to_text();
    std::cout << text;
    if (!report_path.empty()) write_file(report_path, text);
    return 0;
  }

  if (*explain_cmd) {
    auto loaded = megl::load_model(checkpoint);
    const auto image = megl::ImageTensor::from_tensor(megl::read_pnm(image_path));
    const auto ex = megl::explain(loaded, image);
    const fs::path dir = out_dir;
    fs::create_directories(dir);
    const auto stem = fs::path(image_path).stem().string();
    megl::write_pnm(dir / (stem + "_saliency.pgm"), ex.saliency);
    megl::write_pfm(dir / (stem + "_saliency.pfm"), ex.saliency);
    std::ostringstream side;
    side << "normalization = minmax\n"
         << "width = " << ex.saliency.size(1) << "\n"
         << "height = " << ex.saliency.size(0) << "\n"
         << "min = " << megl::format_real(ex.saliency_min) << "\n"
         << "max = " << megl::format_real(ex.saliency_max) << "\n";
    write_file(dir / (stem + "_saliency.txt"), side.str());
    write_file(dir / (stem + "_rationale.txt"), ex.rationale + "\n");
    std::cout << "class = " << ex.class_name << "\n"
              << "class_index = " << ex.predicted << "\n"
              << "rationale = " << ex.rationale << "\n";
    return 0;
  }

  if (*synth_cmd) {
    const auto manifest = megl::generate_synthetic(spec, synth_out);
    const auto st = manifest.stats();
    std::cout << "manifest = " << (fs::path(synth_out) / "manifest.tsv").string() << "\n"
              << "total = " << st.total << "\n"
              << "with_visual = " << st.with_visual << "\n";
    return 0;
  }

  if (*stats_cmd) {
    const auto st = megl::load_manifest(manifest_path).stats();
    std::cout << "total = " << st.total << "\n"
              << "with_text = " << st.with_text << "\n"
              << "with_visual = " << st.with_visual << "\n"
              << "num_classes = " << st.num_classes << "\n";
    return 0;
  }

  if (*bench_cmd) {
    const auto rep = megl::measure_efficiency(checkpoint, warmup, timed);
    std::cout << "param_count = " << rep.param_count << "\n"
              << "latency_ms = " << megl::format_real(rep.latency_ms) << "\n"
              << "fps = " << megl::format_real(rep.fps) << "\n";
    return 0;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const megl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
