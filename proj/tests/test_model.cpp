#include "dleaf/model.hpp"

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "dleaf/engine.hpp"
#include "dleaf/error.hpp"
#include "test_support.hpp"

namespace dleaf {
namespace {

ModelConfig small_config(std::uint64_t seed = 7) {
  ModelConfig c;
  c.num_layers = 2;
  c.num_heads = 2;
  c.model_dim = 8;
  c.ffn_dim = 16;
  c.vocab_size = 12;
  c.max_positions = 32;
  c.image_span = {1, 3};
  c.max_new_tokens = 4;
  c.rng_seed = seed;
  c.init_scale = 0.5;
  return c;
}

// Whole-sequence forward pass without any cache: every position attends over
// its full causal prefix, recomputed from scratch.
Vector reference_logits(const Model& m, const std::vector<std::size_t>& ids) {
  const ModelConfig& c = m.config();
  const std::size_t T = ids.size(), d = c.model_dim, H = c.num_heads, hd = d / H;
  auto ln = [&](const Vector& x, const LayerNormParams& p) {
    double mean = 0.0, var = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(d);
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    Vector out(d);
    for (std::size_t i = 0; i < d; ++i) out[i] = (x[i] - mean) / std::sqrt(var + c.layer_norm_eps) * p.gain[i] + p.bias[i];
    return out;
  };
  auto mul = [](const Vector& x, const Matrix& w) {
    Vector y(w.cols(), 0.0);
    for (std::size_t j = 0; j < w.cols(); ++j)
      for (std::size_t i = 0; i < w.rows(); ++i) y[j] += x[i] * w(i, j);
    return y;
  };

  std::vector<Vector> xs(T, Vector(d));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < d; ++i) xs[t][i] = m.token_embedding()(ids[t], i) + m.position_embedding()(t, i);

  for (const auto& w : m.layers()) {
    std::vector<Vector> q(T), k(T), v(T);
    for (std::size_t t = 0; t < T; ++t) {
      const Vector h = ln(xs[t], w.attn_norm);
      q[t] = mul(h, w.wq);
      k[t] = mul(h, w.wk);
      v[t] = mul(h, w.wv);
    }
    std::vector<Vector> next = xs;
    for (std::size_t t = 0; t < T; ++t) {
      Vector mixed(d, 0.0);
      for (std::size_t hh = 0; hh < H; ++hh) {
        std::vector<double> s(t + 1);
        double peak = -1e300, total = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          double dot = 0.0;
          for (std::size_t j = 0; j < hd; ++j) dot += q[t][hh * hd + j] * k[u][hh * hd + j];
          s[u] = dot / std::sqrt(static_cast<double>(hd));
          peak = std::max(peak, s[u]);
        }
        for (double& x : s) total += (x = std::exp(x - peak));
        for (std::size_t u = 0; u <= t; ++u)
          for (std::size_t j = 0; j < hd; ++j) mixed[hh * hd + j] += s[u] / total * v[u][hh * hd + j];
      }
      const Vector proj = mul(mixed, w.wo);
      for (std::size_t i = 0; i < d; ++i) next[t][i] += proj[i];
      Vector hidden = mul(ln(next[t], w.ffn_norm), w.w_in);
      for (std::size_t i = 0; i < hidden.size(); ++i) {
        const double a = hidden[i] + w.b_in[i];
        hidden[i] = 0.5 * a * (1.0 + std::erf(a / std::sqrt(2.0)));
      }
      const Vector out = mul(hidden, w.w_out);
      for (std::size_t i = 0; i < d; ++i) next[t][i] += out[i] + w.b_out[i];
    }
    xs = std::move(next);
  }
  Vector logits = mul(ln(xs.back(), m.final_norm()), m.unembedding());
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += m.unembedding_bias()[i];
  return logits;
}

struct IdentityHook : AttentionHook {
  std::size_t calls = 0;
  std::vector<AttentionSnapshot> seen;
  void on_attention(AttentionSnapshot& s, ImageSpan) override {
    ++calls;
    seen.push_back(s);
  }
};

TEST(ModelConfigTest, RejectsBadDimensions) {
  ModelConfig c = small_config();
  c.model_dim = 9;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.image_span = {3, 3};
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.num_heads = 0;
  EXPECT_THROW(Model::init(c), ConfigError);
}

TEST(ModelConfigTest, HeadDim) {
  ModelConfig c;
  c.model_dim = 8;
  c.num_heads = 2;
  EXPECT_EQ(c.head_dim(), 4u);
}

TEST(ModelInitTest, SameSeedSameWeights) {
  EXPECT_EQ(Model::init(small_config(42)), Model::init(small_config(42)));
  EXPECT_FALSE(Model::init(small_config(42)) == Model::init(small_config(43)));
}

TEST(ModelInitTest, ZeroScaleGivesUniformAttention) {
  ModelConfig c = small_config();
  c.init_scale = 0.0;
  const Model m = Model::init(c);
  IdentityHook hook;
  KvCache cache(m);
  const TokenSequence seq{{1, 2, 3, 4, 5}, c.image_span};
  forward_step(m, seq, cache, &hook);
  ASSERT_EQ(hook.seen.size(), c.num_layers);
  for (const auto& s : hook.seen)
    for (double v : s.rows.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 5.0);
}

TEST(ForwardTest, ZeroQueryKeyWeightsGiveUniformRows) {
  Model m = Model::init(small_config());
  for (auto& w : m.mutable_layers()) {
    for (double& v : w.wq.data()) v = 0.0;
    for (double& v : w.wk.data()) v = 0.0;
  }
  IdentityHook hook;
  KvCache cache(m);
  forward_step(m, TokenSequence{{3, 1, 4}, {1, 3}}, cache, &hook);
  for (const auto& s : hook.seen)
    for (double v : s.rows.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(ForwardTest, CachedLogitsMatchFullRecompute) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Model m = Model::init(small_config(seed));
    const std::vector<std::size_t> ids{5, 7, 2};
    KvCache cache(m);
    TokenSequence seq{{ids[0]}, {0, 1}};
    for (std::size_t t = 1; t <= ids.size(); ++t) {
      seq.token_ids.assign(ids.begin(), ids.begin() + t);
      const StepResult r = forward_step(m, seq, cache);
      const Vector ref = reference_logits(m, seq.token_ids);
      ASSERT_EQ(r.logits.size(), ref.size());
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(r.logits[i], ref[i], 1e-6);
    }
  }
}

TEST(ForwardTest, PrefillMatchesFullRecomputeOnLongerSequence) {
  ModelConfig c = small_config(11);
  c.num_layers = 3;
  const Model m = Model::init(c);
  auto rng = testing::rng_for(11);
  std::uniform_int_distribution<std::size_t> tok(0, c.vocab_size - 1);
  std::vector<std::size_t> ids(9);
  for (auto& t : ids) t = tok(rng);
  KvCache cache(m);
  const StepResult r = forward_step(m, TokenSequence{ids, {1, 3}}, cache);
  const Vector ref = reference_logits(m, ids);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(r.logits[i], ref[i], 1e-6);
}

TEST(ForwardTest, IdentityHookLeavesLogitsUnchanged) {
  const Model m = Model::init(small_config());
  const TokenSequence seq{{1, 2, 3, 4}, {1, 3}};
  KvCache a(m), b(m);
  IdentityHook hook;
  const StepResult plain = forward_step(m, seq, a);
  const StepResult hooked = forward_step(m, seq, b, &hook);
  EXPECT_EQ(plain.logits, hooked.logits);
}

TEST(ForwardTest, RowsAreCausalProbabilityVectors) {
  const Model m = Model::init(small_config());
  IdentityHook hook;
  KvCache cache(m);
  TokenSequence seq{{1, 2, 3}, {1, 3}};
  forward_step(m, seq, cache, &hook);
  seq.token_ids.push_back(4);
  forward_step(m, seq, cache, &hook);
  // Prefill hooks only the last prompt row, then one row per new position.
  ASSERT_EQ(hook.calls, 2 * m.config().num_layers);
  for (const auto& s : hook.seen) {
    for (std::size_t h = 0; h < s.num_heads(); ++h) {
      double total = 0.0;
      for (double v : s.rows.row(h)) {
        EXPECT_GE(v, 0.0);
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
  EXPECT_EQ(hook.seen.front().num_keys(), 3u);
  EXPECT_EQ(hook.seen.back().num_keys(), 4u);
}

TEST(ForwardTest, StepResultShapes) {
  const Model m = Model::init(small_config());
  KvCache cache(m);
  const StepResult r = forward_step(m, TokenSequence{{1, 2, 3}, {1, 3}}, cache);
  EXPECT_EQ(r.position, 2u);
  EXPECT_EQ(r.logits.size(), m.config().vocab_size);
  EXPECT_EQ(r.snapshots.size(), m.config().num_layers);
  EXPECT_EQ(r.hidden.residuals.size(), m.config().num_layers);
  for (const auto& x : r.hidden.residuals)
    for (double v : x) EXPECT_TRUE(std::isfinite(v));
}

TEST(ForwardTest, FinalResidualThroughFinalHeadGivesLogits) {
  const Model m = Model::init(small_config());
  KvCache cache(m);
  const StepResult r = forward_step(m, TokenSequence{{1, 2, 3}, {1, 3}}, cache);
  EXPECT_EQ(final_logits(m, r.hidden.residuals.back()), r.logits);
}

TEST(ForwardTest, HookEditsReachTheLogits) {
  struct ZeroSpan : AttentionHook {
    void on_attention(AttentionSnapshot& s, ImageSpan span) override {
      for (std::size_t h = 0; h < s.num_heads(); ++h)
        for (std::size_t k = span.begin; k < span.end; ++k) s.rows(h, k) = 0.0;
    }
  } hook;
  const Model m = Model::init(small_config());
  const TokenSequence seq{{1, 2, 3, 4}, {1, 3}};
  KvCache a(m), b(m);
  EXPECT_NE(forward_step(m, seq, a).logits, forward_step(m, seq, b, &hook).logits);
}

TEST(ForwardTest, ShapeErrors) {
  const Model m = Model::init(small_config());
  KvCache cache(m);
  EXPECT_THROW(forward_step(m, TokenSequence{{}, {0, 1}}, cache), ShapeError);
  EXPECT_THROW(forward_step(m, TokenSequence{{1, 99}, {0, 1}}, cache), ShapeError);
  EXPECT_THROW(forward_step(m, TokenSequence{{1, 2}, {0, 5}}, cache), ShapeError);
  std::vector<std::size_t> too_long(m.config().max_positions + 1, 1);
  KvCache fresh(m);
  EXPECT_THROW(forward_step(m, TokenSequence{too_long, {0, 1}}, fresh), ShapeError);
  KvCache used(m);
  forward_step(m, TokenSequence{{1, 2}, {0, 1}}, used);
  EXPECT_THROW(forward_step(m, TokenSequence{{1, 2}, {0, 1}}, used), ShapeError);
}

TEST(ForwardTest, NonFiniteActivationThrows) {
  Model m = Model::init(small_config());
  m.mutable_layers()[0].b_out[0] = std::numeric_limits<double>::infinity();
  KvCache cache(m);
  EXPECT_THROW(forward_step(m, TokenSequence{{1, 2}, {0, 1}}, cache), NumericsError);
}

TEST(DecodeTest, ZeroBudgetGivesNothing) {
  const Model m = Model::init(small_config());
  DecodeOptions opts;
  opts.max_new_tokens = 0;
  const DecodeResult r = greedy_decode(m, TokenSequence{{1, 2, 3}, {1, 3}}, nullptr, opts);
  EXPECT_TRUE(r.tokens.empty());
  EXPECT_TRUE(r.steps.empty());
}

TEST(DecodeTest, DeterministicAndOneStepPerToken) {
  const Model m = Model::init(small_config());
  const TokenSequence prompt{{1, 2, 3}, {1, 3}};
  const DecodeResult a = greedy_decode(m, prompt);
  const DecodeResult b = greedy_decode(m, prompt);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.tokens.size(), m.config().max_new_tokens);
  EXPECT_EQ(a.steps.size(), a.tokens.size());
  for (std::size_t i = 0; i < a.tokens.size(); ++i) EXPECT_EQ(a.tokens[i], argmax(a.steps[i].logits));
}

TEST(DecodeTest, MatchesReferenceArgmaxChain) {
  const Model m = Model::init(small_config(5));
  std::vector<std::size_t> ids{4, 1, 6};
  const DecodeResult r = greedy_decode(m, TokenSequence{ids, {1, 3}});
  for (std::size_t t : r.tokens) {
    EXPECT_EQ(t, argmax(reference_logits(m, ids)));
    ids.push_back(t);
  }
}

TEST(DecodeTest, StopsAfterEndToken) {
  ModelConfig c = small_config();
  const Model probe = Model::init(c);
  const TokenSequence prompt{{1, 2, 3}, {1, 3}};
  const auto free_run = greedy_decode(probe, prompt);
  c.end_token = free_run.tokens.front();
  const auto stopped = greedy_decode(Model::init(c), prompt);
  EXPECT_EQ(stopped.tokens, std::vector<std::size_t>{free_run.tokens.front()});
}

TEST(DecodeTest, PromptShorterThanSpanThrows) {
  const Model m = Model::init(small_config());
  EXPECT_THROW(greedy_decode(m, TokenSequence{{1, 2}, {1, 3}}), ShapeError);
}

TEST(DecodeTest, EmptyWindowHookEqualsBaseline) {
  const Model m = Model::init(small_config());
  const TokenSequence prompt{{1, 2, 3}, {1, 3}};
  DleafConfig cfg;
  cfg.heads = 1;
  cfg.window = LayerWindow::empty();
  DleafHook hook(cfg);
  const auto base = greedy_decode(m, prompt);
  const auto hooked = greedy_decode(m, prompt, &hook);
  EXPECT_EQ(base.tokens, hooked.tokens);
  for (std::size_t i = 0; i < base.steps.size(); ++i) EXPECT_EQ(base.steps[i].logits, hooked.steps[i].logits);
  for (const auto& step : hook.log().steps) EXPECT_TRUE(step.decisions.empty());
}

TEST(ArgmaxTest, TiesGoToLowestIndex) {
  const Vector v{1.0, 3.0, 3.0, 2.0};
  EXPECT_EQ(argmax(v), 1u);
}

}  // namespace
}  // namespace dleaf
