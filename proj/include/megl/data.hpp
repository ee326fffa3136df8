#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "megl/core.hpp"
#include "megl/grounding.hpp"

namespace megl {

enum class Split { kTrain, kVal, kTest };

std::string_view to_string(Split split);

struct ManifestRecord {
  std::string image_path;  // relative to the manifest directory unless absolute
  std::string label_name;
  std::string text_explanation;  // empty when the sample has no rationale
  std::optional<std::string> mask_path;

  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetStats {
  int64_t total = 0;
  int64_t with_text = 0;
  int64_t with_visual = 0;
  int64_t num_classes = 0;

  bool operator==(const DatasetStats&) const = default;
};

/// Manifest file layout (UTF-8, '\n' line ends, fields separated by one TAB):
///
///   # megl manifest v1                 comment lines start with '#'
///   #!classes<TAB>name0<TAB>name1...   ordered class list (required)
///   #!split<TAB>train|val|test         split tag (optional, default train)
///   image<TAB>label<TAB>text<TAB>mask  one record per line
///
/// Every record has exactly four fields; an empty text or mask field means
/// the explanation is absent. Masks are 8-bit PGM files where 255 is maximal
/// saliency.
struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::vector<std::string> class_names;
  Split split = Split::kTrain;
  std::filesystem::path root;

  int64_t label_index(const std::string& name) const;
  std::filesystem::path resolve(const std::string& relative) const;
  DatasetStats stats() const;

  bool operator==(const DatasetManifest& other) const {
    return records == other.records && class_names == other.class_names && split == other.split;
  }
};

DatasetManifest load_manifest(const std::filesystem::path& path);
/// Writes the manifest; record paths are written as stored.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

struct SyntheticSpec {
  int64_t num_samples = 2000;
  int64_t num_classes = 8;
  double visual_annotation_fraction = 0.2;
  int64_t image_size = 32;
  double noise_level = 0.5;
  int64_t seed = 0;
};

/// Number of distinct shape x color classes the generator can draw.
int64_t synthetic_class_capacity();
std::string synthetic_class_name(int64_t label);
std::string synthetic_rationale(int64_t label);

/// Renders the shape's pixel support for `label` centred at (cx, cy) with
/// half-extent `radius` on a size x size grid.
torch::Tensor render_shape_support(int64_t label, double cx, double cy, double radius, int64_t size);

/// Writes images/, masks/ and manifest.tsv under `out_dir` and returns the
/// manifest (split tag train).
DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

struct SplitManifests {
  DatasetManifest train;
  DatasetManifest val;
  DatasetManifest test;
};

/// Stratified seeded split. Each class is shuffled, its samples spread
/// evenly over [0, 1], and the merged order cut at the ratio boundaries, so
/// split sizes follow the ratios exactly (largest-remainder rounding) and
/// class proportions follow them approximately.
SplitManifests split(const DatasetManifest& manifest, const std::array<double, 3>& ratios,
                     int64_t seed);

/// In-memory tensors for a manifest.
struct Dataset {
  torch::Tensor images;    // (N, 3, S, S) float in [0, 1]
  torch::Tensor labels;    // (N) long
  torch::Tensor masks;     // (N, R, R) float MINMAX; zeros where absent
  torch::Tensor has_mask;  // (N) bool
  std::vector<TokenIds> texts;

  int64_t size() const { return labels.numel(); }
  Sample sample(int64_t index) const;
};

std::vector<std::string> rationale_corpus(const DatasetManifest& manifest);

Dataset load_dataset(const DatasetManifest& manifest, const Vocabulary& vocab,
                     const ExperimentConfig& config);

/// Shuffled index order for one epoch; a pure function of (seed, epoch).
std::vector<int64_t> epoch_order(int64_t n, int64_t seed, int64_t epoch);

}  // namespace megl
