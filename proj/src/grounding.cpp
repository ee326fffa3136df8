#include "megl/grounding.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace megl {

// ---------------------------------------------------------------------------
// Tokens
// ---------------------------------------------------------------------------

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u)) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
    } else if (u < 0x80 && std::ispunct(u)) {
      continue;
    } else {
      current.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, int64_t max_size) {
  if (max_size <= kReserved) fail(ErrorKind::kDomainError, "vocabulary must exceed the reserved ids");
  std::map<std::string, int64_t> counts;
  for (const auto& text : corpus) {
    for (auto& tok : tokenize(text)) ++counts[tok];
  }
  std::vector<std::pair<std::string, int64_t>> ordered(counts.begin(), counts.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary vocab;
  for (const auto& [tok, n] : ordered) {
    if (vocab.size() >= max_size) break;
    vocab.index_.emplace(tok, vocab.size());
    vocab.tokens_.push_back(tok);
  }
  return vocab;
}

Vocabulary Vocabulary::from_text(std::string_view text) {
  Vocabulary vocab;
  size_t pos = 0;
  size_t line = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    const auto tok = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    ++line;
    if (tok.empty()) fail(ErrorKind::kParseError, "empty token on line " + std::to_string(line));
    if (!vocab.index_.emplace(std::string(tok), vocab.size()).second) {
      fail(ErrorKind::kParseError, "duplicate token on line " + std::to_string(line));
    }
    vocab.tokens_.emplace_back(tok);
  }
  return vocab;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kMissingFile, "cannot open vocabulary '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

std::string Vocabulary::to_text() const {
  std::string out;
  for (const auto& t : tokens_) out += t + "\n";
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kMissingFile, "cannot write vocabulary '" + path.string() + "'");
  out << to_text();
}

int64_t Vocabulary::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

std::string Vocabulary::token(int64_t id) const {
  switch (id) {
    case kPad: return "<pad>";
    case kBos: return "<bos>";
    case kEos: return "<eos>";
    case kUnk: return "<unk>";
    default: break;
  }
  if (id < 0 || id >= size()) fail(ErrorKind::kTokenOutOfVocab, "token id " + std::to_string(id));
  return tokens_[static_cast<size_t>(id - kReserved)];
}

TokenIds Vocabulary::encode(std::string_view text) const {
  TokenIds ids{kBos};
  for (const auto& tok : tokenize(text)) ids.push_back(id(tok));
  ids.push_back(kEos);
  return ids;
}

std::string Vocabulary::decode(const TokenIds& ids) const {
  std::string out;
  for (int64_t id : ids) {
    if (id == kEos) break;
    if (id == kBos || id == kPad) continue;
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Modules
// ---------------------------------------------------------------------------

AuxEncoderImpl::AuxEncoderImpl(int64_t in_channels, int64_t out_dim) : out_dim_(out_dim) {
  using torch::nn::Conv2d;
  using torch::nn::Conv2dOptions;
  net_ = register_module(
      "net", torch::nn::Sequential(Conv2d(Conv2dOptions(in_channels, 16, 3).stride(2).padding(1)),
                                   torch::nn::ReLU(),
                                   Conv2d(Conv2dOptions(16, 32, 3).stride(2).padding(1)),
                                   torch::nn::ReLU(),
                                   Conv2d(Conv2dOptions(32, 64, 3).stride(2).padding(1)),
                                   torch::nn::ReLU()));
  out_ = register_module("out", torch::nn::Linear(64, out_dim));
  for (auto& p : parameters()) p.set_requires_grad(false);
}

torch::Tensor AuxEncoderImpl::forward(const torch::Tensor& images) {
  return out_->forward(net_->forward(images).mean({2, 3}));
}

ProjectorImpl::ProjectorImpl(int64_t feature_dim, int64_t aux_dim, int64_t prefix_tokens,
                             int64_t embed_dim)
    : prefix_tokens_(prefix_tokens), embed_dim_(embed_dim) {
  const int64_t out = prefix_tokens * embed_dim;
  w_image_ = register_module("w_image",
                             torch::nn::Linear(torch::nn::LinearOptions(feature_dim, out).bias(false)));
  w_aux_ = register_module("w_aux",
                           torch::nn::Linear(torch::nn::LinearOptions(aux_dim, out).bias(false)));
}

torch::Tensor ProjectorImpl::forward(const torch::Tensor& z_image, const torch::Tensor& z_aux) {
  if (z_image.dim() != 2 || z_image.size(1) != w_image_->options.in_features()) {
    fail(ErrorKind::kShapeMismatch, "z_image must be (B, feature_dim)");
  }
  if (z_aux.dim() != 2 || z_aux.size(1) != w_aux_->options.in_features() ||
      z_aux.size(0) != z_image.size(0)) {
    fail(ErrorKind::kShapeMismatch, "z_aux must be (B, aux_feature_dim)");
  }
  const auto v_image = w_image_->forward(z_image).view({-1, prefix_tokens_, embed_dim_});
  const auto v_aux = w_aux_->forward(z_aux).view({-1, prefix_tokens_, embed_dim_});
  return v_aux + v_image;
}

DecoderBlockImpl::DecoderBlockImpl(int64_t embed_dim, int64_t num_heads) : num_heads_(num_heads) {
  ln1 = register_module("ln1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({embed_dim})));
  qkv = register_module("qkv", torch::nn::Linear(embed_dim, 3 * embed_dim));
  proj = register_module("proj", torch::nn::Linear(embed_dim, embed_dim));
  ln2 = register_module("ln2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({embed_dim})));
  fc1 = register_module("fc1", torch::nn::Linear(embed_dim, 4 * embed_dim));
  fc2 = register_module("fc2", torch::nn::Linear(4 * embed_dim, embed_dim));
}

torch::Tensor DecoderBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& causal_mask) {
  const int64_t batch = x.size(0);
  const int64_t len = x.size(1);
  const int64_t dim = x.size(2);
  const int64_t head_dim = dim / num_heads_;

  auto parts = qkv->forward(ln1->forward(x)).chunk(3, -1);
  const auto split = [&](const torch::Tensor& t) {
    return t.reshape({batch, len, num_heads_, head_dim}).transpose(1, 2);
  };
  const auto q = split(parts[0]);
  const auto k = split(parts[1]);
  const auto v = split(parts[2]);
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
  scores = scores.masked_fill(causal_mask, -std::numeric_limits<double>::infinity());
  const auto attn = torch::matmul(torch::softmax(scores, -1), v);
  auto y = x + proj->forward(attn.transpose(1, 2).reshape({batch, len, dim}));
  return y + fc2->forward(torch::gelu(fc1->forward(ln2->forward(y))));
}

DecoderLMImpl::DecoderLMImpl(DecoderOptions options) : options_(options) {
  if (options_.vocab_size <= Vocabulary::kReserved) {
    fail(ErrorKind::kDomainError, "decoder vocabulary too small");
  }
  token_embedding = register_module(
      "token_embedding", torch::nn::Embedding(options_.vocab_size, options_.embed_dim));
  position_embedding = register_parameter(
      "position_embedding",
      torch::randn({options_.prefix_tokens + options_.max_text_len, options_.embed_dim}) * 0.02);
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int64_t i = 0; i < options_.num_layers; ++i) {
    blocks->push_back(DecoderBlock(options_.embed_dim, options_.num_heads));
  }
  ln_final = register_module(
      "ln_final", torch::nn::LayerNorm(torch::nn::LayerNormOptions({options_.embed_dim})));
  head = register_module("head", torch::nn::Linear(options_.embed_dim, options_.vocab_size));
}

torch::Tensor DecoderLMImpl::forward(const torch::Tensor& prefix, const torch::Tensor& tokens) {
  const int64_t m = prefix.size(1);
  const int64_t t = tokens.size(1);
  if (m + t > position_embedding.size(0)) fail(ErrorKind::kLengthExceeded, "sequence too long");
  auto x = torch::cat({prefix, token_embedding->forward(tokens)}, 1);
  x = x + position_embedding.slice(0, 0, m + t);
  const auto mask =
      torch::ones({m + t, m + t}, torch::TensorOptions().dtype(torch::kBool)).triu(1);
  for (const auto& block : *blocks) x = block->as<DecoderBlockImpl>()->forward(x, mask);
  return head->forward(ln_final->forward(x.slice(1, m, m + t)));
}

GrounderImpl::GrounderImpl(const ExperimentConfig& config, int64_t vocab_size) {
  aux_encoder = register_module("aux_encoder", AuxEncoder(3, config.aux_feature_dim));
  projector = register_module("projector", Projector(config.feature_dim, config.aux_feature_dim,
                                                     config.prefix_tokens, config.embed_dim));
  decoder = register_module(
      "decoder", DecoderLM(DecoderOptions{vocab_size, config.embed_dim, config.num_heads,
                                          config.num_layers, config.prefix_tokens,
                                          config.max_text_len}));
}

std::vector<torch::Tensor> GrounderImpl::trainable_parameters() {
  auto params = projector->parameters();
  for (auto& p : decoder->parameters()) params.push_back(p);
  return params;
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

torch::Tensor encode_aux(const torch::Tensor& masked_images, AuxEncoder& encoder) {
  if (masked_images.dim() != 4) fail(ErrorKind::kShapeMismatch, "expected (B, C, H, W) images");
  return encoder->forward(masked_images);
}

torch::Tensor encode_aux(const ImageTensor& masked_image, AuxEncoder& encoder) {
  auto dtype = encoder->parameters().front().scalar_type();
  return encode_aux(masked_image.data().unsqueeze(0).to(dtype), encoder)[0];
}

torch::Tensor project_and_fuse(const torch::Tensor& z_image, const torch::Tensor& z_aux,
                               Projector& projector) {
  const bool single = z_image.dim() == 1;
  const auto zi = single ? z_image.unsqueeze(0) : z_image;
  const auto za = z_aux.dim() == 1 ? z_aux.unsqueeze(0) : z_aux;
  auto v = projector->forward(zi, za);
  return single ? v[0] : v;
}

torch::Tensor pack_targets(const std::vector<TokenIds>& targets, int64_t vocab_size,
                           int64_t max_text_len) {
  size_t longest = 0;
  for (const auto& t : targets) {
    if (static_cast<int64_t>(t.size()) > max_text_len) {
      fail(ErrorKind::kLengthExceeded, "target of length " + std::to_string(t.size()) +
                                           " exceeds max_text_len " + std::to_string(max_text_len));
    }
    if (t.size() < 2 || t.front() != Vocabulary::kBos || t.back() != Vocabulary::kEos) {
      fail(ErrorKind::kDomainError, "targets must start with BOS and end with EOS");
    }
    for (int64_t id : t) {
      if (id < 0 || id >= vocab_size) {
        fail(ErrorKind::kTokenOutOfVocab, "token id " + std::to_string(id) + " outside vocabulary");
      }
    }
    longest = std::max(longest, t.size());
  }
  auto packed = torch::full({static_cast<int64_t>(targets.size()), static_cast<int64_t>(longest)},
                            Vocabulary::kPad, torch::kLong);
  auto acc = packed.accessor<int64_t, 2>();
  for (size_t b = 0; b < targets.size(); ++b) {
    for (size_t i = 0; i < targets[b].size(); ++i) {
      acc[static_cast<int64_t>(b)][static_cast<int64_t>(i)] = targets[b][i];
    }
  }
  return packed;
}

torch::Tensor textual_loss(const torch::Tensor& prefix, const torch::Tensor& targets,
                           DecoderLM& decoder, TextualReduction reduction) {
  if (targets.dim() != 2 || targets.size(1) < 2) {
    fail(ErrorKind::kShapeMismatch, "targets must be (B, T) with T >= 2");
  }
  if (targets.size(1) > decoder->options().max_text_len) {
    fail(ErrorKind::kLengthExceeded, "targets exceed max_text_len");
  }
  if (targets.min().item<int64_t>() < 0 ||
      targets.max().item<int64_t>() >= decoder->options().vocab_size) {
    fail(ErrorKind::kTokenOutOfVocab, "target id outside vocabulary");
  }
  const int64_t t = targets.size(1);
  const auto inputs = targets.slice(1, 0, t - 1);
  const auto labels = targets.slice(1, 1, t);
  const auto logp = torch::log_softmax(decoder->forward(prefix, inputs), -1);
  const auto nll = -logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1);
  const auto scored = (labels != Vocabulary::kPad).to(nll.scalar_type());
  auto per_row = (nll * scored).sum(1);
  if (reduction == TextualReduction::kMean) per_row = per_row / scored.sum(1).clamp_min(1.0);
  return per_row.mean();
}

double textual_loss(const torch::Tensor& prefix, const TokenIds& target, DecoderLM& decoder,
                    TextualReduction reduction) {
  const auto packed =
      pack_targets({target}, decoder->options().vocab_size, decoder->options().max_text_len);
  const auto p = prefix.dim() == 2 ? prefix.unsqueeze(0) : prefix;
  return textual_loss(p, packed, decoder, reduction).item<double>();
}

std::vector<TokenIds> generate_batch(const torch::Tensor& prefix, DecoderLM& decoder, int64_t max_len) {
  if (max_len < 1 || max_len > decoder->options().max_text_len) {
    fail(ErrorKind::kDomainError, "max_len must be in [1, max_text_len]");
  }
  torch::NoGradGuard no_grad;
  const int64_t batch = prefix.size(0);
  std::vector<TokenIds> out(static_cast<size_t>(batch), TokenIds{Vocabulary::kBos});
  std::vector<bool> done(static_cast<size_t>(batch), false);
  auto tokens = torch::full({batch, 1}, Vocabulary::kBos, torch::kLong);
  for (int64_t step = 1; step < max_len; ++step) {
    const auto logits = decoder->forward(prefix, tokens).select(1, tokens.size(1) - 1);
    const auto next = logits.argmax(-1).contiguous();
    auto acc = next.accessor<int64_t, 1>();
    bool all_done = true;
    for (int64_t b = 0; b < batch; ++b) {
      if (done[static_cast<size_t>(b)]) continue;
      out[static_cast<size_t>(b)].push_back(acc[b]);
      if (acc[b] == Vocabulary::kEos) done[static_cast<size_t>(b)] = true;
      all_done = all_done && done[static_cast<size_t>(b)];
    }
    if (all_done) break;
    tokens = torch::cat({tokens, next.view({batch, 1})}, 1);
  }
  return out;
}

TokenIds generate(const torch::Tensor& prefix, DecoderLM& decoder, int64_t max_len) {
  const auto p = prefix.dim() == 2 ? prefix.unsqueeze(0) : prefix;
  return generate_batch(p, decoder, max_len).front();
}

}  // namespace megl
