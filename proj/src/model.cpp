#include "dleaf/model.hpp"

#include <cmath>
#include <random>
#include <string>

#include "dleaf/error.hpp"
#include "dleaf/kernels.hpp"

namespace dleaf {

void ModelConfig::validate() const {
  if (num_layers == 0) throw ConfigError("num_layers must be positive");
  if (num_heads == 0) throw ConfigError("num_heads must be positive");
  if (model_dim == 0 || model_dim % num_heads != 0) {
    throw ConfigError("model_dim must be a positive multiple of num_heads (model_dim=" +
                      std::to_string(model_dim) + ", num_heads=" + std::to_string(num_heads) +
                      ")");
  }
  if (ffn_dim == 0) throw ConfigError("ffn_dim must be positive");
  if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
  if (max_positions == 0) throw ConfigError("max_positions must be positive");
  if (image_span.begin >= image_span.end) {
    throw ConfigError("image_span must satisfy begin < end");
  }
  if (image_span.end > max_positions) throw ConfigError("image_span exceeds max_positions");
  if (!(init_scale >= 0.0) || !std::isfinite(init_scale)) {
    throw ConfigError("init_scale must be finite and non-negative");
  }
  if (end_token && *end_token >= vocab_size) throw ConfigError("end_token outside vocabulary");
  if (!(layer_norm_eps > 0.0)) throw ConfigError("layer_norm_eps must be positive");
}

namespace {

class GaussianFiller {
 public:
  GaussianFiller(std::uint64_t seed, double stddev) : engine_(seed), stddev_(stddev) {}

  double next() { return stddev_ == 0.0 ? 0.0 : stddev_ * unit_(engine_); }

  Matrix matrix(std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = next();
    return m;
  }
  Vector vector(std::size_t n, double center = 0.0) {
    Vector v(n);
    for (double& x : v) x = center + next();
    return v;
  }
  LayerNormParams norm(std::size_t n) { return {vector(n, 1.0), vector(n)}; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> unit_{0.0, 1.0};
  double stddev_;
};

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

void check_finite(std::span<const double> x, std::size_t layer) {
  for (double v : x) {
    if (!std::isfinite(v)) {
      throw NumericsError("non-finite activation in layer " + std::to_string(layer));
    }
  }
}

}  // namespace

Model Model::init(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.model_dim;
  GaussianFiller fill(config.rng_seed, config.init_scale);

  Model model;
  model.config_ = config;
  model.token_embedding_ = fill.matrix(config.vocab_size, d);
  model.position_embedding_ = fill.matrix(config.max_positions, d);
  model.layers_.reserve(config.num_layers);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LayerWeights w;
    w.attn_norm = fill.norm(d);
    w.wq = fill.matrix(d, d);
    w.wk = fill.matrix(d, d);
    w.wv = fill.matrix(d, d);
    w.wo = fill.matrix(d, d);
    w.ffn_norm = fill.norm(d);
    w.w_in = fill.matrix(d, config.ffn_dim);
    w.b_in = fill.vector(config.ffn_dim);
    w.w_out = fill.matrix(config.ffn_dim, d);
    w.b_out = fill.vector(d);
    model.layers_.push_back(std::move(w));
  }
  model.final_norm_ = fill.norm(d);
  model.unembedding_ = fill.matrix(d, config.vocab_size);
  model.unembedding_bias_ = fill.vector(config.vocab_size);
  return model;
}

KvCache::KvCache(const Model& model)
    : model_dim_(model.config().model_dim),
      keys_(model.config().num_layers),
      values_(model.config().num_layers) {}

void KvCache::clear() {
  length_ = 0;
  for (auto& k : keys_) k.clear();
  for (auto& v : values_) v.clear();
}

Vector layer_norm(std::span<const double> x, const LayerNormParams& params, double eps) {
  if (x.size() != params.gain.size() || x.size() != params.bias.size()) {
    throw ShapeError("layer_norm: parameter size mismatch");
  }
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = (x[i] - mean) * inv * params.gain[i] + params.bias[i];
  }
  return out;
}

Vector final_logits(const Model& model, std::span<const double> residual) {
  const Vector normed = layer_norm(residual, model.final_norm(), model.config().layer_norm_eps);
  Vector logits(model.config().vocab_size);
  kernels::matvec(normed, model.unembedding(), logits);
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += model.unembedding_bias()[i];
  return logits;
}

StepResult forward_step(const Model& model, const TokenSequence& sequence, KvCache& cache,
                        AttentionHook* hook) {
  const ModelConfig& cfg = model.config();
  const std::size_t total = sequence.size();
  if (total == 0) throw ShapeError("forward_step: empty sequence");
  if (total > cfg.max_positions) {
    throw ShapeError("forward_step: sequence length " + std::to_string(total) +
                     " exceeds max_positions " + std::to_string(cfg.max_positions));
  }
  if (cache.keys_.size() != cfg.num_layers || cache.model_dim_ != cfg.model_dim) {
    throw ShapeError("forward_step: cache was built for a different model");
  }
  if (cache.length_ >= total) {
    throw ShapeError("forward_step: cache already covers the whole sequence");
  }
  if (!sequence.image_span.empty() && sequence.image_span.end > total) {
    throw ShapeError("forward_step: image span outside the sequence");
  }

  const std::size_t d = cfg.model_dim;
  StepResult result;
  result.position = total - 1;

  Vector q(d), k(d), v(d), mixed(d), projected(d), hidden(cfg.ffn_dim), ffn_out(d);
  for (std::size_t pos = cache.length_; pos < total; ++pos) {
    const std::size_t token = sequence.token_ids[pos];
    if (token >= cfg.vocab_size) {
      throw ShapeError("forward_step: token id " + std::to_string(token) +
                       " outside vocabulary at position " + std::to_string(pos));
    }
    const bool current = pos + 1 == total;
    if (current && hook) hook->begin_step(pos);

    Vector x(d);
    for (std::size_t i = 0; i < d; ++i) {
      x[i] = model.token_embedding()(token, i) + model.position_embedding()(pos, i);
    }

    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      const LayerWeights& w = model.layers()[l];
      const Vector h = layer_norm(x, w.attn_norm, cfg.layer_norm_eps);
      kernels::matvec(h, w.wq, q);
      kernels::matvec(h, w.wk, k);
      kernels::matvec(h, w.wv, v);
      auto& keys = cache.keys_[l];
      auto& values = cache.values_[l];
      keys.insert(keys.end(), k.begin(), k.end());
      values.insert(values.end(), v.begin(), v.end());

      const std::size_t visible = pos + 1;
      AttentionSnapshot snapshot{l, Matrix(cfg.num_heads, visible)};
      kernels::attention_probs(q, keys, visible, cfg.num_heads, snapshot.rows);
      if (current && hook) hook->on_attention(snapshot, sequence.image_span);
      kernels::attention_mix(snapshot.rows, values, mixed);
      kernels::matvec(mixed, w.wo, projected);
      for (std::size_t i = 0; i < d; ++i) x[i] += projected[i];

      const Vector h2 = layer_norm(x, w.ffn_norm, cfg.layer_norm_eps);
      kernels::matvec(h2, w.w_in, hidden);
      for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] = gelu(hidden[i] + w.b_in[i]);
      kernels::matvec(hidden, w.w_out, ffn_out);
      for (std::size_t i = 0; i < d; ++i) x[i] += ffn_out[i] + w.b_out[i];
      check_finite(x, l);

      if (current) {
        result.snapshots.push_back(std::move(snapshot));
        result.hidden.residuals.push_back(x);
      }
    }
    cache.length_ = pos + 1;
    if (current) {
      result.logits = final_logits(model, x);
      if (hook) hook->end_step();
    }
  }
  return result;
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

DecodeResult greedy_decode(const Model& model, const TokenSequence& prompt, AttentionHook* hook,
                           const DecodeOptions& options) {
  if (prompt.image_span.end > prompt.size()) {
    throw ShapeError("greedy_decode: prompt shorter than the end of its image span");
  }
  const std::size_t budget = options.max_new_tokens.value_or(model.config().max_new_tokens);
  DecodeResult out;
  if (budget == 0) return out;

  TokenSequence sequence = prompt;
  KvCache cache(model);
  for (std::size_t step = 0; step < budget; ++step) {
    StepResult r = forward_step(model, sequence, cache, hook);
    const std::size_t token = argmax(r.logits);
    out.tokens.push_back(token);
    if (options.keep_steps) out.steps.push_back(std::move(r));
    if (model.config().end_token && token == *model.config().end_token) break;
    sequence.token_ids.push_back(token);
  }
  return out;
}

}  // namespace dleaf
