#include "testing.hpp"

#include <fstream>

#include <megl/checkpoint.hpp>
#include <megl/trainer.hpp>

using namespace megl;
namespace fs = std::filesystem;

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.config.seed = 17;
  c.config.lambda_visual = 0.25;
  c.arrays.emplace_back("f32", torch::randn({3, 4}));
  c.arrays.emplace_back("f64", torch::randn({2}, torch::kDouble));
  c.arrays.emplace_back("i64", torch::arange(5));
  c.arrays.emplace_back("u8", torch::randint(0, 255, {7}).to(torch::kUInt8));
  c.arrays.emplace_back("bool", torch::rand({2, 2}) > 0.5);
  c.arrays.emplace_back("scalar", torch::tensor(3.5f).reshape({}));
  c.texts["vocab"] = "a\nb\n";
  c.texts["empty"] = "";
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void dump(const fs::path& p, const std::string& bytes) { std::ofstream(p, std::ios::binary) << bytes; }

}  // namespace

TEST_CASE("checkpoint round-trip is exact") {
  const auto dir = megl_test::scratch_dir("ckpt");
  torch::manual_seed(1);
  const auto c = sample_checkpoint();
  write_checkpoint(dir / "c.megl", c);
  const auto back = read_checkpoint(dir / "c.megl");
  CHECK(back.config == c.config);
  CHECK(back.texts == c.texts);
  REQUIRE(back.arrays.size() == c.arrays.size());
  for (size_t i = 0; i < c.arrays.size(); ++i) {
    CHECK(back.arrays[i].first == c.arrays[i].first);
    CHECK(megl_test::bit_equal(back.arrays[i].second, c.arrays[i].second));
  }
  CHECK(back.find("i64") != nullptr);
  CHECK(back.find("nope") == nullptr);
  write_checkpoint(dir / "again.megl", back);
  CHECK(slurp(dir / "c.megl") == slurp(dir / "again.megl"));
}

TEST_CASE("corrupted checkpoints are rejected") {
  const auto dir = megl_test::scratch_dir("ckpt_corrupt");
  write_checkpoint(dir / "c.megl", sample_checkpoint());
  const auto good = slurp(dir / "c.megl");
  for (size_t pos : {size_t{0}, size_t{9}, good.size() / 2, good.size() - 1}) {
    auto bad = good;
    bad[pos] = static_cast<char>(bad[pos] ^ 0x5a);
    dump(dir / "bad.megl", bad);
    CHECK_ERROR_KIND(read_checkpoint(dir / "bad.megl"), ErrorKind::kCorruptCheckpoint);
  }
  dump(dir / "short.megl", good.substr(0, good.size() - 20));
  CHECK_ERROR_KIND(read_checkpoint(dir / "short.megl"), ErrorKind::kCorruptCheckpoint);
  dump(dir / "tiny.megl", "MEG");
  CHECK_ERROR_KIND(read_checkpoint(dir / "tiny.megl"), ErrorKind::kCorruptCheckpoint);
  CHECK_ERROR_KIND(read_checkpoint(dir / "absent.megl"), ErrorKind::kMissingFile);
}

TEST_CASE("module export and import") {
  torch::manual_seed(2);
  torch::nn::Linear a(3, 2), b(3, 2);
  Checkpoint c;
  export_module(*a, "lin/", c);
  CHECK(c.with_prefix("lin/").size() == 2);
  import_module(*b, "lin/", c);
  CHECK(torch::equal(a->weight, b->weight));
  CHECK(torch::equal(a->bias, b->bias));
  torch::nn::Linear wide(4, 2);
  CHECK_ERROR_KIND(import_module(*wide, "lin/", c), ErrorKind::kShapeMismatch);
  CHECK_ERROR_KIND(import_module(*b, "other/", c), ErrorKind::kCorruptCheckpoint);
}

TEST_CASE("trained model round-trip") {
  const auto dir = megl_test::scratch_dir("model");
  ExperimentConfig config;
  config.num_classes = 3;
  config.class_conditional_prior = true;
  torch::manual_seed(3);
  const auto vocab = Vocabulary::build({"a red circle", "a blue square"}, 16);
  MeglModel model(config, vocab.size());
  const auto maps = torch::rand({4, 32, 32});
  const auto labels = torch::tensor({0, 0, 1, 1}, torch::kLong);
  const auto priors = PriorSet::build(maps, labels, 3, true);
  const std::vector<std::string> names = {"x", "y", "z"};
  save_model(dir / "m.megl", config, vocab, names, model, priors);
  auto loaded = load_model(dir / "m.megl");
  CHECK(loaded.config == config);
  CHECK(loaded.class_names == names);
  CHECK(loaded.vocab.size() == vocab.size());
  for (int64_t id = 0; id < vocab.size(); ++id) CHECK(loaded.vocab.token(id) == vocab.token(id));
  const auto original = model->named_parameters();
  const auto restored = loaded.model->named_parameters();
  REQUIRE(original.size() == restored.size());
  for (const auto& item : original) CHECK(megl_test::bit_equal(item.value(), restored[item.key()]));
  const auto pa = priors.arrays();
  const auto pb = loaded.priors.arrays();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(megl_test::bit_equal(pa[i].second, pb[i].second));
  }
  CHECK(loaded.priors.class_conditional());
}
