#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "megl/core.hpp"

namespace megl {

// ---------------------------------------------------------------------------
// Tokens
// ---------------------------------------------------------------------------

/// Lowercases, drops punctuation, splits on whitespace.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  static constexpr int64_t kPad = 0;
  static constexpr int64_t kBos = 1;
  static constexpr int64_t kEos = 2;
  static constexpr int64_t kUnk = 3;
  static constexpr int64_t kReserved = 4;

  Vocabulary() = default;

  /// Tokens ordered by descending frequency, then lexicographically; at most
  /// `max_size` ids including the reserved ones.
  static Vocabulary build(const std::vector<std::string>& corpus, int64_t max_size);
  /// One token per line; line i (0-based) holds id i + 4.
  static Vocabulary load(const std::filesystem::path& path);
  static Vocabulary from_text(std::string_view text);
  void save(const std::filesystem::path& path) const;
  std::string to_text() const;

  int64_t size() const { return kReserved + static_cast<int64_t>(tokens_.size()); }
  int64_t id(std::string_view token) const;
  std::string token(int64_t id) const;

  /// BOS + ids + EOS.
  TokenIds encode(std::string_view text) const;
  /// Joins non-reserved tokens with single spaces; stops at EOS.
  std::string decode(const TokenIds& ids) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int64_t> index_;
};

// ---------------------------------------------------------------------------
// Modules
// ---------------------------------------------------------------------------

/// Frozen auxiliary image encoder standing in for a pretrained vision tower:
/// three strided 3x3 convs with ReLU, global average pool, linear to
/// `out_dim`. Parameters never require grad; gradients still flow through it
/// into its input.
class AuxEncoderImpl : public torch::nn::Module {
 public:
  AuxEncoderImpl(int64_t in_channels, int64_t out_dim);
  torch::Tensor forward(const torch::Tensor& images);
  int64_t out_dim() const { return out_dim_; }

 private:
  torch::nn::Sequential net_{nullptr};
  torch::nn::Linear out_{nullptr};
  int64_t out_dim_;
};
TORCH_MODULE(AuxEncoder);

/// V = reshape(W_I z_i) + reshape(W_A z_a), each reshaped to
/// (prefix_tokens, embed_dim).
class ProjectorImpl : public torch::nn::Module {
 public:
  ProjectorImpl(int64_t feature_dim, int64_t aux_dim, int64_t prefix_tokens, int64_t embed_dim);
  torch::Tensor forward(const torch::Tensor& z_image, const torch::Tensor& z_aux);
  torch::nn::Linear& w_image() { return w_image_; }
  torch::nn::Linear& w_aux() { return w_aux_; }

 private:
  torch::nn::Linear w_image_{nullptr};
  torch::nn::Linear w_aux_{nullptr};
  int64_t prefix_tokens_;
  int64_t embed_dim_;
};
TORCH_MODULE(Projector);

/// Pre-norm causal self-attention block.
class DecoderBlockImpl : public torch::nn::Module {
 public:
  DecoderBlockImpl(int64_t embed_dim, int64_t num_heads);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& causal_mask);

  torch::nn::LayerNorm ln1{nullptr}, ln2{nullptr};
  torch::nn::Linear qkv{nullptr}, proj{nullptr}, fc1{nullptr}, fc2{nullptr};

 private:
  int64_t num_heads_;
};
TORCH_MODULE(DecoderBlock);

struct DecoderOptions {
  int64_t vocab_size = 0;
  int64_t embed_dim = 64;
  int64_t num_heads = 4;
  int64_t num_layers = 2;
  int64_t prefix_tokens = 4;
  int64_t max_text_len = 24;
};

/// Small causal decoder LM. The visual prefix occupies the first
/// `prefix_tokens` positions; text tokens follow.
class DecoderLMImpl : public torch::nn::Module {
 public:
  explicit DecoderLMImpl(DecoderOptions options);

  /// `prefix` (B, m, D), `tokens` (B, T) -> next-token logits (B, T, V) at the
  /// token positions.
  torch::Tensor forward(const torch::Tensor& prefix, const torch::Tensor& tokens);

  const DecoderOptions& options() const { return options_; }

  torch::nn::Embedding token_embedding{nullptr};
  torch::Tensor position_embedding;
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::LayerNorm ln_final{nullptr};
  torch::nn::Linear head{nullptr};

 private:
  DecoderOptions options_;
};
TORCH_MODULE(DecoderLM);

/// Auxiliary encoder E, projections W_I / W_A and the decoder LM.
class GrounderImpl : public torch::nn::Module {
 public:
  GrounderImpl(const ExperimentConfig& config, int64_t vocab_size);

  /// Trainable parameters only (everything except the auxiliary encoder).
  std::vector<torch::Tensor> trainable_parameters();

  AuxEncoder aux_encoder{nullptr};
  Projector projector{nullptr};
  DecoderLM decoder{nullptr};
};
TORCH_MODULE(Grounder);

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Z_A for (B, C, H, W) masked images.
torch::Tensor encode_aux(const torch::Tensor& masked_images, AuxEncoder& encoder);
torch::Tensor encode_aux(const ImageTensor& masked_image, AuxEncoder& encoder);

torch::Tensor project_and_fuse(const torch::Tensor& z_image, const torch::Tensor& z_aux,
                               Projector& projector);

/// Pads variable-length sequences with PAD into a (B, T) tensor after
/// validating each (BOS first, EOS last, ids in vocabulary, length limit).
torch::Tensor pack_targets(const std::vector<TokenIds>& targets, int64_t vocab_size,
                           int64_t max_text_len);

/// Teacher-forced negative log-likelihood. `targets` is (B, T) padded with
/// PAD; positions 1.. of each row are scored. With kMean each row's sum is
/// divided by its scored-token count; rows are then averaged.
torch::Tensor textual_loss(const torch::Tensor& prefix, const torch::Tensor& targets,
                           DecoderLM& decoder, TextualReduction reduction = TextualReduction::kMean);

double textual_loss(const torch::Tensor& prefix, const TokenIds& target, DecoderLM& decoder,
                    TextualReduction reduction = TextualReduction::kMean);

/// Greedy decoding from BOS; stops after EOS or at `max_len` tokens (BOS and
/// EOS included). Ties go to the lowest token id.
std::vector<TokenIds> generate_batch(const torch::Tensor& prefix, DecoderLM& decoder, int64_t max_len);
TokenIds generate(const torch::Tensor& prefix, DecoderLM& decoder, int64_t max_len);

}  // namespace megl
