#include "testing.hpp"

#include <cmath>

#include <megl/grounding.hpp>

using namespace megl;

namespace {

DecoderLM small_decoder(int64_t vocab = 10) {
  DecoderLM lm(DecoderOptions{vocab, 4, 2, 2, 2, 8});
  lm->to(torch::kDouble);
  return lm;
}

void zero_blocks(DecoderLM& lm) {
  torch::NoGradGuard no_grad;
  for (auto& p : lm->blocks->parameters()) p.zero_();
  lm->position_embedding.zero_();
}

}  // namespace

TEST_CASE("tokenizer lowercases and strips punctuation") {
  CHECK(tokenize("It is a Red circle, because: round!") ==
        std::vector<std::string>{"it", "is", "a", "red", "circle", "because", "round"});
  CHECK(tokenize("  \t ").empty());
}

TEST_CASE("vocabulary order is frequency then lexicographic") {
  const auto v = Vocabulary::build({"b a", "a c", "a b", "y x"}, 100);
  CHECK(v.id("a") == 4);
  CHECK(v.id("b") == 5);
  CHECK(v.id("c") == 6);
  CHECK(v.id("x") == 7);
  CHECK(v.id("y") == 8);
  CHECK(v.id("zebra") == Vocabulary::kUnk);
  CHECK(v.size() == 9);
  CHECK(Vocabulary::build({"b a", "a c", "a b"}, 6).size() == 6);
  CHECK_ERROR_KIND(Vocabulary::build({"a"}, 4), ErrorKind::kDomainError);
}

TEST_CASE("vocabulary encodes, decodes and persists") {
  const auto v = Vocabulary::build({"a red circle", "a blue square"}, 100);
  const auto ids = v.encode("A red square");
  CHECK(ids.front() == Vocabulary::kBos);
  CHECK(ids.back() == Vocabulary::kEos);
  CHECK(ids.size() == 5);
  CHECK(v.decode(ids) == "a red square");
  CHECK(v.decode({Vocabulary::kBos, v.id("red"), Vocabulary::kEos, v.id("blue")}) == "red");
  CHECK(v.token(v.id("blue")) == "blue");
  CHECK_ERROR_KIND(v.token(99), ErrorKind::kTokenOutOfVocab);
  CHECK(Vocabulary::from_text(v.to_text()) == v);
  const auto dir = megl_test::scratch_dir("vocab");
  v.save(dir / "vocab.txt");
  CHECK(Vocabulary::load(dir / "vocab.txt") == v);
  CHECK_ERROR_KIND(Vocabulary::from_text("a\na\n"), ErrorKind::kParseError);
  CHECK_ERROR_KIND(Vocabulary::load(dir / "missing.txt"), ErrorKind::kMissingFile);
}

TEST_CASE("auxiliary encoder is frozen, pure and passes gradients to its input") {
  seed_everything(1);
  AuxEncoder e(3, 16);
  for (const auto& p : e->parameters()) CHECK_FALSE(p.requires_grad());
  const auto zero = torch::zeros({1, 3, 32, 32});
  const auto a = encode_aux(zero, e);
  CHECK(a.sizes() == torch::IntArrayRef({1, 16}));
  CHECK(megl_test::bit_equal(a, encode_aux(zero, e)));
  seed_everything(1);
  AuxEncoder again(3, 16);
  CHECK(megl_test::bit_equal(a, encode_aux(zero, again)));

  const auto img = torch::rand({1, 3, 32, 32}).requires_grad_(true);
  encode_aux(img, e).sum().backward();
  REQUIRE(img.grad().defined());
  CHECK(img.grad().abs().sum().item<double>() > 0.0);
  for (const auto& p : e->parameters()) CHECK_FALSE(p.grad().defined());
}

TEST_CASE("projection and additive fusion") {
  seed_everything(2);
  Projector proj(6, 5, 4, 8);
  const auto zi = torch::rand({6});
  const auto za = torch::rand({5});
  const auto v = project_and_fuse(zi, za, proj);
  CHECK(v.sizes() == torch::IntArrayRef({4, 8}));
  const auto vi = proj->w_image()->forward(zi.unsqueeze(0)).view({4, 8});
  const auto va = proj->w_aux()->forward(za.unsqueeze(0)).view({4, 8});
  CHECK(torch::allclose(v, vi + va));
  {
    torch::NoGradGuard no_grad;
    proj->w_aux()->weight.zero_();
  }
  CHECK(torch::equal(project_and_fuse(zi, za, proj), vi));
  {
    torch::NoGradGuard no_grad;
    proj->w_image()->weight.zero_();
  }
  CHECK(torch::equal(project_and_fuse(zi, za, proj), torch::zeros({4, 8})));
  CHECK_ERROR_KIND(project_and_fuse(torch::rand({7}), za, proj), ErrorKind::kShapeMismatch);
  CHECK_ERROR_KIND(project_and_fuse(zi, torch::rand({3}), proj), ErrorKind::kShapeMismatch);
}

TEST_CASE("textual loss in the saturated and uniform limits") {
  auto lm = small_decoder(10);
  zero_blocks(lm);
  {
    torch::NoGradGuard no_grad;
    auto tok = lm->token_embedding->weight;
    tok.zero_();
    tok[Vocabulary::kBos].copy_(torch::tensor({1.0, -1.0, 0.0, 0.0}));
    tok[5].copy_(torch::tensor({0.0, 0.0, 1.0, -1.0}));
    lm->head->weight.zero_();
    lm->head->bias.zero_();
    lm->head->weight[5].copy_(torch::tensor({100.0, -100.0, 0.0, 0.0}));
    lm->head->weight[Vocabulary::kEos].copy_(torch::tensor({0.0, 0.0, 100.0, -100.0}));
  }
  const auto prefix = torch::zeros({2, 4}, torch::kDouble);
  CHECK(textual_loss(prefix, TokenIds{Vocabulary::kBos, 5, Vocabulary::kEos}, lm) < 1e-6);

  {
    torch::NoGradGuard no_grad;
    lm->head->weight.zero_();
  }
  CHECK(textual_loss(prefix, TokenIds{Vocabulary::kBos, 5, 7, Vocabulary::kEos}, lm) ==
        doctest::Approx(std::log(10.0)).epsilon(1e-9));
  CHECK(textual_loss(prefix, TokenIds{Vocabulary::kBos, 5, 7, Vocabulary::kEos}, lm, TextualReduction::kSum) ==
        doctest::Approx(3 * std::log(10.0)).epsilon(1e-9));
}

TEST_CASE("teacher-forced loss is the product of per-step probabilities") {
  seed_everything(3);
  auto lm = small_decoder(10);
  const auto prefix = torch::randn({1, 2, 4}, torch::kDouble);
  for (const TokenIds& target : {TokenIds{1, 6, 2}, TokenIds{1, 4, 9, 2}, TokenIds{1, 2}}) {
    double log_prob = 0.0;
    for (size_t i = 1; i < target.size(); ++i) {
      const auto inputs = torch::tensor(TokenIds(target.begin(), target.begin() + static_cast<long>(i)), torch::kLong)
                              .view({1, -1});
      const auto p = torch::softmax(lm->forward(prefix, inputs)[0][static_cast<int64_t>(i) - 1], -1);
      log_prob += std::log(p[target[i]].item<double>());
    }
    CHECK(std::abs(textual_loss(prefix, target, lm, TextualReduction::kSum) + log_prob) <= 1e-6);
    CHECK(textual_loss(prefix, target, lm) >= 0.0);
  }
}

TEST_CASE("padded rows are scored on their own tokens only") {
  seed_everything(4);
  auto lm = small_decoder(10);
  const auto prefix = torch::randn({2, 2, 4}, torch::kDouble);
  const TokenIds a{1, 5, 6, 7, 2};
  const TokenIds b{1, 8, 2};
  const auto packed = pack_targets({a, b}, 10, 8);
  CHECK(packed.sizes() == torch::IntArrayRef({2, 5}));
  CHECK(packed[1][4].item<int64_t>() == Vocabulary::kPad);
  const double joint = textual_loss(prefix, packed, lm).item<double>();
  const double separate = 0.5 * (textual_loss(prefix[0], a, lm) + textual_loss(prefix[1], b, lm));
  CHECK(joint == doctest::Approx(separate).epsilon(1e-9));
}

TEST_CASE("target validation") {
  auto lm = small_decoder(10);
  const auto prefix = torch::zeros({2, 4}, torch::kDouble);
  CHECK_ERROR_KIND(textual_loss(prefix, TokenIds{1, 12, 2}, lm), ErrorKind::kTokenOutOfVocab);
  CHECK_ERROR_KIND(textual_loss(prefix, TokenIds{1, 4, 4, 4, 4, 4, 4, 4, 2}, lm), ErrorKind::kLengthExceeded);
  CHECK_ERROR_KIND(textual_loss(prefix, TokenIds{4, 5, 2}, lm), ErrorKind::kDomainError);
  CHECK_ERROR_KIND(textual_loss(prefix, TokenIds{1, 5, 6}, lm), ErrorKind::kDomainError);
}

TEST_CASE("greedy generation") {
  auto lm = small_decoder(10);
  {
    torch::NoGradGuard no_grad;
    lm->head->weight.zero_();
    lm->head->bias.zero_();
    lm->head->bias[Vocabulary::kEos] = 100.0;
  }
  const auto prefix = torch::randn({2, 4}, torch::kDouble);
  CHECK(generate(prefix, lm, 8) == TokenIds{Vocabulary::kBos, Vocabulary::kEos});

  seed_everything(5);
  auto free = small_decoder(10);
  const auto a = generate(prefix, free, 8);
  CHECK(a == generate(prefix, free, 8));
  CHECK(a.size() <= 8);
  CHECK(a.front() == Vocabulary::kBos);
  CHECK_ERROR_KIND(generate(prefix, free, 9), ErrorKind::kDomainError);

  // Ties go to the lowest id: uniform logits pick PAD (id 0) at every step.
  {
    torch::NoGradGuard no_grad;
    free->head->weight.zero_();
    free->head->bias.zero_();
  }
  CHECK(generate(prefix, free, 3) == TokenIds{Vocabulary::kBos, 0, 0});
}
