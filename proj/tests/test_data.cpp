#include "testing.hpp"

#include <fstream>
#include <set>

#include <megl/data.hpp>
#include <megl/grounding.hpp>
#include <megl/image_io.hpp>

using namespace megl;
namespace fs = std::filesystem;

namespace {

std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

DatasetManifest in_memory(const std::vector<std::string>& labels, const std::vector<std::string>& classes) {
  DatasetManifest m;
  m.class_names = classes;
  for (size_t i = 0; i < labels.size(); ++i) {
    m.records.push_back({"img" + std::to_string(i) + ".ppm", labels[i], "text", std::nullopt});
  }
  return m;
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

}  // namespace

TEST_CASE("synthetic annotation fraction boundaries") {
  const auto dir = megl_test::scratch_dir("synth_fraction");
  for (double fraction : {0.0, 0.2, 1.0}) {
    SyntheticSpec spec;
    spec.num_samples = 50;
    spec.visual_annotation_fraction = fraction;
    const auto m = generate_synthetic(spec, dir / std::to_string(fraction));
    const auto st = m.stats();
    CHECK(st.total == 50);
    CHECK(st.with_text == 50);
    CHECK(st.with_visual == static_cast<int64_t>(fraction * 50));
    CHECK(st.num_classes == 8);
  }
  SyntheticSpec bad;
  bad.num_classes = synthetic_class_capacity() + 1;
  CHECK_ERROR_KIND(generate_synthetic(bad, dir / "bad"), ErrorKind::kDomainError);
  bad = SyntheticSpec{};
  bad.visual_annotation_fraction = 1.5;
  CHECK_ERROR_KIND(generate_synthetic(bad, dir / "bad"), ErrorKind::kDomainError);
}

TEST_CASE("synthetic generation is deterministic") {
  const auto dir = megl_test::scratch_dir("synth_det");
  SyntheticSpec spec;
  spec.num_samples = 12;
  spec.seed = 42;
  const auto a = generate_synthetic(spec, dir / "a");
  const auto b = generate_synthetic(spec, dir / "b");
  CHECK(a == b);
  for (const auto& r : a.records) {
    CHECK(bytes(dir / "a" / r.image_path) == bytes(dir / "b" / r.image_path));
    if (r.mask_path) CHECK(bytes(dir / "a" / *r.mask_path) == bytes(dir / "b" / *r.mask_path));
  }
  spec.seed = 43;
  const auto c = generate_synthetic(spec, dir / "c");
  CHECK(bytes(dir / "a" / a.records[0].image_path) != bytes(dir / "c" / c.records[0].image_path));
}

TEST_CASE("synthetic masks cover exactly the rendered shape") {
  const auto dir = megl_test::scratch_dir("synth_fidelity");
  SyntheticSpec spec;
  spec.num_samples = 24;
  spec.num_classes = 24;
  spec.visual_annotation_fraction = 1.0;
  spec.noise_level = 0.0;  // background exactly black, so the image reveals the shape
  const auto m = generate_synthetic(spec, dir);
  for (const auto& r : m.records) {
    const auto image = read_pnm(m.resolve(r.image_path));
    const auto mask = read_pnm(m.resolve(*r.mask_path))[0];
    const auto drawn = image.sum(0) > 0;
    CHECK(torch::equal(drawn, mask > 0));
    CHECK(mask.max().item<float>() == 1.0f);
  }
  CHECK(m.records[1].text_explanation == "it is a red triangle because it has three pointed corners and red color");
}

TEST_CASE("manifest load, round-trip and stats") {
  const auto dir = megl_test::scratch_dir("manifest");
  SyntheticSpec spec;
  spec.num_samples = 20;
  spec.visual_annotation_fraction = 0.25;
  const auto generated = generate_synthetic(spec, dir);
  const auto a = load_manifest(dir / "manifest.tsv");
  const auto b = load_manifest(dir / "manifest.tsv");
  CHECK(a == generated);
  CHECK(a == b);
  CHECK(a.stats() == DatasetStats{20, 20, 5, 8});
  save_manifest(a, dir / "copy.tsv");
  CHECK(load_manifest(dir / "copy.tsv") == a);
}

TEST_CASE("manifest errors") {
  const auto dir = megl_test::scratch_dir("manifest_errors");
  std::ofstream(dir / "a.ppm").put('x');
  const std::string head = "# megl manifest v1\n#!classes\tcat\tdog\n";
  write_text(dir / "empty.tsv", head);
  CHECK_ERROR_KIND(load_manifest(dir / "empty.tsv"), ErrorKind::kEmptyDataset);
  CHECK_ERROR_KIND(load_manifest(dir / "absent.tsv"), ErrorKind::kMissingFile);
  write_text(dir / "missing.tsv", head + "b.ppm\tcat\tt\t\n");
  CHECK_ERROR_KIND(load_manifest(dir / "missing.tsv"), ErrorKind::kMissingImage);
  write_text(dir / "mask.tsv", head + "a.ppm\tcat\tt\tnope.pgm\n");
  CHECK_ERROR_KIND(load_manifest(dir / "mask.tsv"), ErrorKind::kMissingImage);
  write_text(dir / "label.tsv", head + "a.ppm\tbird\tt\t\n");
  CHECK_ERROR_KIND(load_manifest(dir / "label.tsv"), ErrorKind::kUnknownLabel);
  write_text(dir / "dup.tsv", head + "a.ppm\tcat\tt\t\na.ppm\tdog\tt\t\n");
  CHECK_ERROR_KIND(load_manifest(dir / "dup.tsv"), ErrorKind::kDuplicateRecord);
  write_text(dir / "fields.tsv", head + "a.ppm\tcat\n");
  CHECK_ERROR_KIND(load_manifest(dir / "fields.tsv"), ErrorKind::kParseError);
  write_text(dir / "ok.tsv", head + "a.ppm\tdog\t\t\n");
  const auto ok = load_manifest(dir / "ok.tsv");
  CHECK(ok.stats() == DatasetStats{1, 0, 0, 2});
}

TEST_CASE("split sizes and partition") {
  std::vector<std::string> labels;
  for (int i = 0; i < 100; ++i) labels.push_back(i % 4 == 0 ? "a" : (i % 4 == 1 ? "b" : (i % 4 == 2 ? "c" : "d")));
  const auto m = in_memory(labels, {"a", "b", "c", "d"});
  const auto s = split(m, {0.8, 0.1, 0.1}, 3);
  CHECK(s.train.records.size() == 80);
  CHECK(s.val.records.size() == 10);
  CHECK(s.test.records.size() == 10);
  CHECK(s.val.split == Split::kVal);
  std::multiset<std::string> seen;
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    for (const auto& r : part->records) seen.insert(r.image_path);
  }
  std::multiset<std::string> all;
  for (const auto& r : m.records) all.insert(r.image_path);
  CHECK(seen == all);
  std::set<std::string> train_classes;
  for (const auto& r : s.train.records) train_classes.insert(r.label_name);
  CHECK(train_classes.size() == 4);

  const auto again = split(m, {0.8, 0.1, 0.1}, 3);
  CHECK(again.test == s.test);

  const auto everything = split(m, {1.0, 0.0, 0.0}, 0);
  CHECK(everything.train.records.size() == 100);
  CHECK(everything.val.records.empty());
  CHECK(everything.test.records.empty());
}

TEST_CASE("split errors") {
  const auto m = in_memory({"a", "a", "a", "b"}, {"a", "b"});
  CHECK_ERROR_KIND(split(m, {0.5, 0.3, 0.3}, 0), ErrorKind::kDomainError);
  CHECK_ERROR_KIND(split(m, {1.2, -0.1, -0.1}, 0), ErrorKind::kDomainError);
  CHECK_ERROR_KIND(split(m, {0.25, 0.5, 0.25}, 0), ErrorKind::kTooFewSamplesForStratification);
  CHECK_ERROR_KIND(split(in_memory({}, {"a"}), {1.0, 0.0, 0.0}, 0), ErrorKind::kEmptyDataset);
}

TEST_CASE("epoch order is a seeded permutation") {
  const auto a = epoch_order(50, 7, 3);
  CHECK(a == epoch_order(50, 7, 3));
  CHECK(a != epoch_order(50, 7, 4));
  CHECK(a != epoch_order(50, 8, 3));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int64_t i = 0; i < 50; ++i) CHECK(sorted[static_cast<size_t>(i)] == i);
}

TEST_CASE("dataset tensors follow the manifest") {
  const auto dir = megl_test::scratch_dir("dataset");
  SyntheticSpec spec;
  spec.num_samples = 16;
  spec.visual_annotation_fraction = 0.5;
  const auto m = generate_synthetic(spec, dir);
  ExperimentConfig config;
  const auto vocab = Vocabulary::build(rationale_corpus(m), config.vocab_size);
  const auto ds = load_dataset(m, vocab, config);
  CHECK(ds.size() == 16);
  CHECK(ds.images.sizes() == torch::IntArrayRef({16, 3, 32, 32}));
  for (int64_t i = 0; i < 16; ++i) {
    const auto& r = m.records[static_cast<size_t>(i)];
    CHECK(ds.has_mask[i].item<bool>() == r.mask_path.has_value());
    CHECK(ds.labels[i].item<int64_t>() == m.label_index(r.label_name));
    CHECK(vocab.decode(ds.texts[static_cast<size_t>(i)]) == r.text_explanation);
    if (r.mask_path) CHECK(torch::equal(ds.masks[i], read_pnm(m.resolve(*r.mask_path))[0]));
    const auto s = ds.sample(i);
    CHECK(s.visual_explanation.has_value() == r.mask_path.has_value());
  }

  ExperimentConfig coarse = config;
  coarse.saliency_resolution = 8;
  const auto small = load_dataset(m, vocab, coarse);
  CHECK(small.masks.sizes() == torch::IntArrayRef({16, 8, 8}));
  ExperimentConfig few = config;
  few.num_classes = 4;
  CHECK_ERROR_KIND(load_dataset(m, vocab, few), ErrorKind::kLabelOutOfRange);
}

TEST_CASE("image codecs") {
  const auto dir = megl_test::scratch_dir("image_io");
  const auto rgb = torch::randint(0, 256, {3, 5, 7}).to(torch::kFloat) / 255.0;
  write_pnm(dir / "x.ppm", rgb);
  CHECK(torch::allclose(read_pnm(dir / "x.ppm"), rgb, 0.0, 1e-7));
  const auto grey = torch::rand({4, 6});
  write_pnm(dir / "g.pgm", grey);
  const auto back = read_pnm(dir / "g.pgm");
  CHECK(back.sizes() == torch::IntArrayRef({1, 4, 6}));
  CHECK((back[0] - grey).abs().max().item<float>() <= 0.5f / 255.0f + 1e-6f);

  const auto field = torch::rand({3, 5}) * 7.0;
  write_pfm(dir / "f.pfm", field);
  CHECK(megl_test::bit_equal(read_pfm(dir / "f.pfm"), field));

  write_text(dir / "bad.ppm", "P3\n1 1\n255\n0 0 0\n");
  CHECK_ERROR_KIND(read_pnm(dir / "bad.ppm"), ErrorKind::kParseError);
  write_text(dir / "short.pgm", "P5\n4 4\n255\nab");
  CHECK_ERROR_KIND(read_pnm(dir / "short.pgm"), ErrorKind::kParseError);
  write_text(dir / "bad.pfm", "PF\n1 1\n-1.0\n");
  CHECK_ERROR_KIND(read_pfm(dir / "bad.pfm"), ErrorKind::kParseError);
  CHECK_ERROR_KIND(read_pnm(dir / "none.ppm"), ErrorKind::kMissingFile);
}
