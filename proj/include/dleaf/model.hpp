#pragma once

// Toy multimodal decoder-only transformer.
//
// Pre-LayerNorm blocks (attention, then a GELU feed-forward), each wrapped in
// a residual connection, followed by a final LayerNorm and an unembedding with
// bias. Image tokens are ordinary vocabulary ids sitting inside
// `TokenSequence::image_span`. All arithmetic is in double precision.
//
// The attention row of the newest query position is exposed per layer through
// AttentionHook before it is applied to the values.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dleaf/tensor.hpp"

namespace dleaf {

struct ModelConfig {
  std::size_t num_layers = 32;
  std::size_t num_heads = 8;
  std::size_t model_dim = 64;
  std::size_t ffn_dim = 256;
  std::size_t vocab_size = 64;
  std::size_t max_positions = 512;
  ImageSpan image_span{4, 20};
  std::size_t max_new_tokens = 16;
  std::uint64_t rng_seed = 42;
  double init_scale = 0.02;
  std::optional<std::size_t> end_token;
  double layer_norm_eps = 1e-5;

  std::size_t head_dim() const noexcept { return num_heads ? model_dim / num_heads : 0; }
  std::size_t image_tokens() const noexcept { return image_span.size(); }

  // Throws ConfigError when any dimension or the image span is inconsistent.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct TokenSequence {
  std::vector<std::size_t> token_ids;
  ImageSpan image_span;

  std::size_t size() const noexcept { return token_ids.size(); }
};

struct LayerNormParams {
  Vector gain;
  Vector bias;
  bool operator==(const LayerNormParams&) const = default;
};

struct LayerWeights {
  LayerNormParams attn_norm;
  Matrix wq, wk, wv, wo;  // d x d
  LayerNormParams ffn_norm;
  Matrix w_in;            // d x ffn
  Vector b_in;
  Matrix w_out;           // ffn x d
  Vector b_out;
  bool operator==(const LayerWeights&) const = default;
};

// Softmaxed, causally masked attention of the current query over keys
// [0, T) for every head of one layer: rows is H x T.
struct AttentionSnapshot {
  std::size_t layer = 0;
  Matrix rows;

  std::size_t num_heads() const noexcept { return rows.rows(); }
  std::size_t num_keys() const noexcept { return rows.cols(); }
};

// Residual stream of the current position after every block (L entries).
struct HiddenState {
  std::vector<Vector> residuals;
};

struct StepResult {
  std::size_t position = 0;
  Vector logits;
  std::vector<AttentionSnapshot> snapshots;
  HiddenState hidden;
};

class AttentionHook {
 public:
  virtual ~AttentionHook() = default;
  virtual void begin_step(std::size_t /*position*/) {}
  // May rewrite snapshot.rows in place; whatever it leaves there is what the
  // layer multiplies into the values.
  virtual void on_attention(AttentionSnapshot& snapshot, ImageSpan span) = 0;
  virtual void end_step() {}
};

class Model;

// Per-layer keys and values of every position processed so far.
class KvCache {
 public:
  KvCache() = default;
  explicit KvCache(const Model& model);

  std::size_t length() const noexcept { return length_; }
  void clear();

 private:
  friend StepResult forward_step(const Model&, const TokenSequence&, KvCache&, AttentionHook*);
  std::size_t length_ = 0;
  std::size_t model_dim_ = 0;
  std::vector<std::vector<double>> keys_;
  std::vector<std::vector<double>> values_;
};

class Model {
 public:
  // Fills every parameter from a Gaussian with std init_scale seeded by
  // rng_seed. LayerNorm gains are 1 + noise, biases are noise.
  static Model init(const ModelConfig& config);

  const ModelConfig& config() const noexcept { return config_; }
  const Matrix& token_embedding() const noexcept { return token_embedding_; }
  const Matrix& position_embedding() const noexcept { return position_embedding_; }
  const std::vector<LayerWeights>& layers() const noexcept { return layers_; }
  const LayerNormParams& final_norm() const noexcept { return final_norm_; }
  const Matrix& unembedding() const noexcept { return unembedding_; }
  const Vector& unembedding_bias() const noexcept { return unembedding_bias_; }

  // Test hook: direct parameter access for constructing planted instances.
  std::vector<LayerWeights>& mutable_layers() noexcept { return layers_; }

  bool operator==(const Model&) const = default;

 private:
  ModelConfig config_;
  Matrix token_embedding_;
  Matrix position_embedding_;
  std::vector<LayerWeights> layers_;
  LayerNormParams final_norm_;
  Matrix unembedding_;
  Vector unembedding_bias_;
};

Vector layer_norm(std::span<const double> x, const LayerNormParams& params, double eps);

// LayerNorm with the model's final parameters followed by the unembedding.
// forward_step computes its logits through this same function.
Vector final_logits(const Model& model, std::span<const double> residual);

// Processes positions [cache.length(), sequence.size()) and returns the result
// for the last one. The hook, if any, sees only that last position.
StepResult forward_step(const Model& model, const TokenSequence& sequence, KvCache& cache,
                        AttentionHook* hook = nullptr);

struct DecodeOptions {
  std::optional<std::size_t> max_new_tokens;  // defaults to the model config
  bool keep_steps = true;
};

struct DecodeResult {
  std::vector<std::size_t> tokens;
  std::vector<StepResult> steps;
};

// Argmax decoding; ties go to the lowest token id. Stops after
// max_new_tokens or right after emitting the end token.
DecodeResult greedy_decode(const Model& model, const TokenSequence& prompt,
                           AttentionHook* hook = nullptr, const DecodeOptions& options = {});

std::size_t argmax(std::span<const double> values);

}  // namespace dleaf
