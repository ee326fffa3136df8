#include "megl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "megl/image_io.hpp"
#include "megl/saliency.hpp"

namespace megl {

namespace fs = std::filesystem;

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

int64_t DatasetManifest::label_index(const std::string& name) const {
  const auto it = std::find(class_names.begin(), class_names.end(), name);
  if (it == class_names.end()) fail(ErrorKind::kUnknownLabel, "unknown label '" + name + "'");
  return it - class_names.begin();
}

fs::path DatasetManifest::resolve(const std::string& relative) const {
  const fs::path p(relative);
  return p.is_absolute() ? p : root / p;
}

DatasetStats DatasetManifest::stats() const {
  DatasetStats s;
  s.total = static_cast<int64_t>(records.size());
  for (const auto& r : records) {
    if (!r.text_explanation.empty()) ++s.with_text;
    if (r.mask_path) ++s.with_visual;
  }
  s.num_classes = static_cast<int64_t>(class_names.size());
  return s;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  size_t pos = 0;
  while (true) {
    const auto tab = line.find('\t', pos);
    out.push_back(line.substr(pos, tab == std::string::npos ? std::string::npos : tab - pos));
    if (tab == std::string::npos) break;
    pos = tab + 1;
  }
  return out;
}

Split parse_split(const std::string& s, size_t line) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  fail(ErrorKind::kParseError, "line " + std::to_string(line) + ": unknown split '" + s + "'");
}

std::string sanitize_field(std::string s) {
  std::replace_if(s.begin(), s.end(), [](char c) { return c == '\t' || c == '\n' || c == '\r'; }, ' ');
  return s;
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kMissingFile, "cannot open manifest '" + path.string() + "'");
  DatasetManifest manifest;
  manifest.root = path.parent_path();
  bool have_classes = false;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.rfind("#!", 0) == 0) {
      auto fields = split_tabs(line);
      if (fields[0] == "#!classes") {
        manifest.class_names.assign(fields.begin() + 1, fields.end());
        std::set<std::string> unique(manifest.class_names.begin(), manifest.class_names.end());
        if (unique.size() != manifest.class_names.size()) {
          fail(ErrorKind::kParseError, "line " + std::to_string(line_no) + ": duplicate class name");
        }
        have_classes = true;
      } else if (fields[0] == "#!split" && fields.size() == 2) {
        manifest.split = parse_split(fields[1], line_no);
      } else {
        fail(ErrorKind::kParseError, "line " + std::to_string(line_no) + ": unknown directive");
      }
      continue;
    }
    if (line.front() == '#') continue;
    auto fields = split_tabs(line);
    if (fields.size() != 4) {
      fail(ErrorKind::kParseError,
           "line " + std::to_string(line_no) + ": expected 4 tab-separated fields");
    }
    ManifestRecord rec{fields[0], fields[1], fields[2], std::nullopt};
    if (!fields[3].empty()) rec.mask_path = fields[3];
    if (rec.image_path.empty()) {
      fail(ErrorKind::kParseError, "line " + std::to_string(line_no) + ": empty image path");
    }
    manifest.records.push_back(std::move(rec));
  }
  if (!have_classes) fail(ErrorKind::kParseError, "manifest lacks a #!classes line");
  if (manifest.records.empty()) fail(ErrorKind::kEmptyDataset, "manifest has no records");

  std::set<std::string> seen;
  for (const auto& r : manifest.records) {
    manifest.label_index(r.label_name);
    if (!seen.insert(r.image_path).second) {
      fail(ErrorKind::kDuplicateRecord, "image listed twice: '" + r.image_path + "'");
    }
    if (!fs::exists(manifest.resolve(r.image_path))) {
      fail(ErrorKind::kMissingImage, "missing image '" + r.image_path + "'");
    }
    if (r.mask_path && !fs::exists(manifest.resolve(*r.mask_path))) {
      fail(ErrorKind::kMissingImage, "missing mask '" + *r.mask_path + "'");
    }
  }
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kMissingFile, "cannot write manifest '" + path.string() + "'");
  out << "# megl manifest v1\n#!classes";
  for (const auto& c : manifest.class_names) out << '\t' << c;
  out << "\n#!split\t" << to_string(manifest.split) << "\n";
  for (const auto& r : manifest.records) {
    out << r.image_path << '\t' << r.label_name << '\t' << sanitize_field(r.text_explanation) << '\t'
        << r.mask_path.value_or("") << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

namespace {

struct ShapeInfo {
  const char* name;
  const char* reason;
};
constexpr std::array<ShapeInfo, 4> kShapes = {{
    {"circle", "it is round with no corners"},
    {"triangle", "it has three pointed corners"},
    {"square", "it has four equal sides"},
    {"cross", "it has two crossing bars"},
}};

struct ColorInfo {
  const char* name;
  std::array<double, 3> rgb;
};
constexpr std::array<ColorInfo, 6> kColors = {{
    {"red", {0.9, 0.1, 0.1}},
    {"green", {0.1, 0.85, 0.1}},
    {"blue", {0.15, 0.2, 0.95}},
    {"yellow", {0.95, 0.9, 0.1}},
    {"magenta", {0.9, 0.1, 0.9}},
    {"cyan", {0.1, 0.9, 0.9}},
}};

const ShapeInfo& shape_of(int64_t label) { return kShapes[static_cast<size_t>(label) % kShapes.size()]; }
const ColorInfo& color_of(int64_t label) { return kColors[static_cast<size_t>(label) / kShapes.size()]; }

bool inside(int64_t shape, double dx, double dy, double r) {
  switch (shape) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: {
      const double from_apex = dy + r;  // apex at (0, -r), base at dy = r
      return from_apex >= 0.0 && dy <= r && std::abs(dx) <= from_apex / 2.0 * 1.1;
    }
    case 2: return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    default: {
      const double bar = r / 3.0;
      return (std::abs(dx) <= bar && std::abs(dy) <= r) || (std::abs(dy) <= bar && std::abs(dx) <= r);
    }
  }
}

std::string numbered(const char* prefix, int64_t i, const char* ext) {
  std::ostringstream os;
  os << prefix << std::setw(5) << std::setfill('0') << i << ext;
  return os.str();
}

}  // namespace

int64_t synthetic_class_capacity() { return static_cast<int64_t>(kShapes.size() * kColors.size()); }

std::string synthetic_class_name(int64_t label) {
  return std::string(color_of(label).name) + "_" + shape_of(label).name;
}

std::string synthetic_rationale(int64_t label) {
  const auto& c = color_of(label);
  const auto& s = shape_of(label);
  return std::string("it is a ") + c.name + " " + s.name + " because " + s.reason + " and " + c.name +
         " color";
}

torch::Tensor render_shape_support(int64_t label, double cx, double cy, double radius, int64_t size) {
  auto support = torch::zeros({size, size}, torch::kFloat);
  auto acc = support.accessor<float, 2>();
  const int64_t shape = label % static_cast<int64_t>(kShapes.size());
  for (int64_t y = 0; y < size; ++y) {
    for (int64_t x = 0; x < size; ++x) {
      if (inside(shape, x + 0.5 - cx, y + 0.5 - cy, radius)) acc[y][x] = 1.0f;
    }
  }
  return support;
}

DatasetManifest generate_synthetic(const SyntheticSpec& spec, const fs::path& out_dir) {
  if (spec.num_samples < 1) fail(ErrorKind::kDomainError, "num_samples must be >= 1");
  if (spec.num_classes < 1 || spec.num_classes > synthetic_class_capacity()) {
    fail(ErrorKind::kDomainError, "num_classes must be in [1, " +
                                      std::to_string(synthetic_class_capacity()) + "]");
  }
  if (!(spec.visual_annotation_fraction >= 0.0 && spec.visual_annotation_fraction <= 1.0)) {
    fail(ErrorKind::kDomainError, "visual_annotation_fraction must be in [0, 1]");
  }
  if (spec.image_size < 8) fail(ErrorKind::kDomainError, "image_size must be >= 8");
  if (!(spec.noise_level >= 0.0 && spec.noise_level <= 1.0)) {
    fail(ErrorKind::kDomainError, "noise_level must be in [0, 1]");
  }
  if (spec.seed < 0) fail(ErrorKind::kDomainError, "seed must be >= 0");

  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "masks");

  std::mt19937_64 rng(static_cast<uint64_t>(spec.seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const int64_t n = spec.num_samples;
  const auto n_annotated =
      static_cast<int64_t>(std::floor(spec.visual_annotation_fraction * static_cast<double>(n)));
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> annotated(static_cast<size_t>(n), false);
  for (int64_t i = 0; i < n_annotated; ++i) annotated[static_cast<size_t>(order[static_cast<size_t>(i)])] = true;

  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.split = Split::kTrain;
  for (int64_t c = 0; c < spec.num_classes; ++c) manifest.class_names.push_back(synthetic_class_name(c));

  const int64_t s = spec.image_size;
  const double size = static_cast<double>(s);
  for (int64_t i = 0; i < n; ++i) {
    const int64_t label = i % spec.num_classes;
    const double radius = size * (0.16 + 0.10 * unit(rng));
    // Centre-biased placement: the offset from the image centre is the mean
    // of two uniforms, covering the full legal range with a triangular law.
    const double reach = 0.5 * size - radius;
    const double cx = 0.5 * size + reach * (unit(rng) + unit(rng) - 1.0);
    const double cy = 0.5 * size + reach * (unit(rng) + unit(rng) - 1.0);
    const auto support = render_shape_support(label, cx, cy, radius, s);

    auto image = torch::empty({3, s, s}, torch::kFloat);
    auto img = image.accessor<float, 3>();
    const auto sup = support.accessor<float, 2>();
    const auto& rgb = color_of(label).rgb;
    for (int64_t y = 0; y < s; ++y) {
      for (int64_t x = 0; x < s; ++x) {
        for (int64_t ch = 0; ch < 3; ++ch) {
          const double noise = spec.noise_level * unit(rng);
          const double v = sup[y][x] > 0.5f
                               ? rgb[static_cast<size_t>(ch)] + 0.2 * (noise - 0.5 * spec.noise_level)
                               : noise;
          img[ch][y][x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }

    ManifestRecord rec;
    rec.image_path = numbered("images/img_", i, ".ppm");
    rec.label_name = synthetic_class_name(label);
    rec.text_explanation = synthetic_rationale(label);
    write_pnm(out_dir / rec.image_path, image);
    if (annotated[static_cast<size_t>(i)]) {
      rec.mask_path = numbered("masks/mask_", i, ".pgm");
      write_pnm(out_dir / *rec.mask_path, support);
    }
    manifest.records.push_back(std::move(rec));
  }
  save_manifest(manifest, out_dir / "manifest.tsv");
  return manifest;
}

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

SplitManifests split(const DatasetManifest& manifest, const std::array<double, 3>& ratios,
                     int64_t seed) {
  for (double r : ratios) {
    if (!(r >= 0.0)) fail(ErrorKind::kDomainError, "split ratios must be >= 0");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
    fail(ErrorKind::kDomainError, "split ratios must sum to 1");
  }
  const auto n = static_cast<int64_t>(manifest.records.size());
  if (n == 0) fail(ErrorKind::kEmptyDataset, "cannot split an empty manifest");

  // Largest-remainder sizes.
  std::array<int64_t, 3> sizes{};
  std::array<double, 3> remainders{};
  int64_t assigned = 0;
  for (size_t k = 0; k < 3; ++k) {
    const double exact = ratios[k] * static_cast<double>(n);
    sizes[k] = static_cast<int64_t>(std::floor(exact + 1e-9));
    remainders[k] = exact - static_cast<double>(sizes[k]);
    assigned += sizes[k];
  }
  while (assigned < n) {
    size_t best = 0;
    for (size_t k = 1; k < 3; ++k) {
      if (remainders[k] > remainders[best] + 1e-12) best = k;
    }
    ++sizes[best];
    remainders[best] = -1.0;
    ++assigned;
  }

  const auto num_classes = static_cast<int64_t>(manifest.class_names.size());
  std::vector<std::vector<int64_t>> by_class(static_cast<size_t>(num_classes));
  for (int64_t i = 0; i < n; ++i) {
    by_class[static_cast<size_t>(manifest.label_index(manifest.records[static_cast<size_t>(i)].label_name))]
        .push_back(i);
  }
  std::mt19937_64 rng(static_cast<uint64_t>(seed));
  struct Keyed {
    double key;
    int64_t cls;
    int64_t index;
  };
  std::vector<Keyed> keyed;
  keyed.reserve(static_cast<size_t>(n));
  for (int64_t c = 0; c < num_classes; ++c) {
    auto& members = by_class[static_cast<size_t>(c)];
    std::shuffle(members.begin(), members.end(), rng);
    const auto count = static_cast<double>(members.size());
    for (size_t r = 0; r < members.size(); ++r) {
      keyed.push_back({(static_cast<double>(r) + 0.5) / count, c, members[r]});
    }
  }
  std::sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
    return a.key != b.key ? a.key < b.key : a.cls < b.cls;
  });

  std::array<std::vector<int64_t>, 3> parts;
  size_t cursor = 0;
  for (size_t k = 0; k < 3; ++k) {
    for (int64_t j = 0; j < sizes[k]; ++j) parts[k].push_back(keyed[cursor++].index);
    std::sort(parts[k].begin(), parts[k].end());
  }

  if (sizes[0] > 0) {
    std::set<std::string> train_classes;
    for (int64_t i : parts[0]) train_classes.insert(manifest.records[static_cast<size_t>(i)].label_name);
    for (int64_t c = 0; c < num_classes; ++c) {
      if (!by_class[static_cast<size_t>(c)].empty() &&
          !train_classes.count(manifest.class_names[static_cast<size_t>(c)])) {
        fail(ErrorKind::kTooFewSamplesForStratification,
             "class '" + manifest.class_names[static_cast<size_t>(c)] + "' absent from train split");
      }
    }
  }

  const auto build = [&](const std::vector<int64_t>& idx, Split tag) {
    DatasetManifest m;
    m.class_names = manifest.class_names;
    m.root = manifest.root;
    m.split = tag;
    for (int64_t i : idx) m.records.push_back(manifest.records[static_cast<size_t>(i)]);
    return m;
  };
  return {build(parts[0], Split::kTrain), build(parts[1], Split::kVal), build(parts[2], Split::kTest)};
}

// ---------------------------------------------------------------------------
// Tensors
// ---------------------------------------------------------------------------

Sample Dataset::sample(int64_t index) const {
  Sample s{ImageTensor::from_tensor(images[index]), labels[index].item<int64_t>(), std::nullopt,
           std::nullopt};
  if (!texts[static_cast<size_t>(index)].empty()) s.text_explanation = texts[static_cast<size_t>(index)];
  if (has_mask[index].item<bool>()) {
    s.visual_explanation = SaliencyMap::make(masks[index], Normalization::kMinMax);
  }
  return s;
}

std::vector<std::string> rationale_corpus(const DatasetManifest& manifest) {
  std::vector<std::string> corpus;
  for (const auto& r : manifest.records) {
    if (!r.text_explanation.empty()) corpus.push_back(r.text_explanation);
  }
  return corpus;
}

Dataset load_dataset(const DatasetManifest& manifest, const Vocabulary& vocab,
                     const ExperimentConfig& config) {
  const auto n = static_cast<int64_t>(manifest.records.size());
  const int64_t s = config.image_size;
  const int64_t r = config.saliency_resolution;
  Dataset ds;
  ds.images = torch::zeros({n, 3, s, s}, torch::kFloat);
  ds.labels = torch::empty({n}, torch::kLong);
  ds.masks = torch::zeros({n, r, r}, torch::kFloat);
  ds.has_mask = torch::zeros({n}, torch::kBool);
  for (int64_t i = 0; i < n; ++i) {
    const auto& rec = manifest.records[static_cast<size_t>(i)];
    auto img = read_pnm(manifest.resolve(rec.image_path));
    if (img.size(1) != s || img.size(2) != s) {
      fail(ErrorKind::kShapeMismatch, "image '" + rec.image_path + "' is not " + std::to_string(s) +
                                          "x" + std::to_string(s));
    }
    if (img.size(0) == 1) img = img.expand({3, s, s});
    ds.images[i].copy_(img);
    const int64_t label = manifest.label_index(rec.label_name);
    if (label >= config.num_classes) {
      fail(ErrorKind::kLabelOutOfRange, "manifest has more classes than num_classes");
    }
    ds.labels[i] = label;
    if (rec.mask_path) {
      auto mask = read_pnm(manifest.resolve(*rec.mask_path))[0];
      if (mask.size(0) != r || mask.size(1) != r) {
        mask = resample_maps(mask.unsqueeze(0), r, r)[0];
      }
      ds.masks[i].copy_(minmax_normalize(mask));
      ds.has_mask[i] = true;
    }
    ds.texts.push_back(rec.text_explanation.empty() ? TokenIds{} : vocab.encode(rec.text_explanation));
    if (static_cast<int64_t>(ds.texts.back().size()) > config.max_text_len) {
      fail(ErrorKind::kLengthExceeded, "rationale for '" + rec.image_path + "' exceeds max_text_len");
    }
  }
  return ds;
}

std::vector<int64_t> epoch_order(int64_t n, int64_t seed, int64_t epoch) {
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<uint64_t>(seed), static_cast<uint64_t>(epoch), uint64_t{0x6d65676c}};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace megl
