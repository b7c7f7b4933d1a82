#include "dleaf/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "dleaf/diagnostics.hpp"
#include "dleaf/error.hpp"
#include "test_support.hpp"

namespace dleaf {
namespace {

AttentionSnapshot snapshot_of(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t h = rows.size(), t = rows.begin()->size();
  AttentionSnapshot s{0, Matrix(h, t)};
  std::size_t r = 0;
  for (const auto& row : rows) {
    std::size_t c = 0;
    for (double v : row) s.rows(r, c++) = v;
    ++r;
  }
  return s;
}

double entropy_oracle(const Vector& v) {
  double total = 0.0, h = 0.0;
  for (double x : v) total += x;
  for (double x : v)
    if (x > 0) h -= x / total * std::log(x / total);
  return h;
}

TEST(MamTest, SingleHeadIsItsSlice) {
  const auto s = snapshot_of({{0.1, 0.2, 0.3, 0.4}});
  EXPECT_EQ(compute_mam(s, {1, 3}).values, (Vector{0.2, 0.3}));
}

TEST(MamTest, ElementwiseMax) {
  const auto s = snapshot_of({{0.1, 0.2}, {0.3, 0.05}});
  EXPECT_EQ(compute_mam(s, {0, 2}).values, (Vector{0.3, 0.2}));
}

TEST(MamTest, MatchesDoubleLoopOnRandomSnapshots) {
  auto rng = testing::rng_for(10);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = testing::random_snapshot(rng, 8, 20);
    const ImageSpan span = testing::random_span(rng, 20);
    const MamVector mam = compute_mam(s, span);
    for (std::size_t n = 0; n < span.size(); ++n) {
      double best = -1.0;
      for (std::size_t h = 0; h < 8; ++h) best = std::max(best, s.rows(h, span.begin + n));
      EXPECT_EQ(mam.values[n], best);
      for (std::size_t h = 0; h < 8; ++h) EXPECT_GE(mam.values[n], s.rows(h, span.begin + n));
    }
  }
}

TEST(MamTest, SpanErrors) {
  const auto s = snapshot_of({{0.5, 0.5}});
  EXPECT_THROW(compute_mam(s, {1, 1}), SpanError);
  EXPECT_THROW(compute_mam(s, {1, 3}), SpanError);
}

TEST(LiaeTest, UniformIsLogN) {
  EXPECT_NEAR(liae(MamVector{{0.25, 0.25, 0.25, 0.25}}), std::log(4.0), 1e-12);
  EXPECT_NEAR(liae(MamVector{{0.25, 0.25, 0.25, 0.25}}), 1.386294, 1e-6);
}

TEST(LiaeTest, OneHotIsZero) { EXPECT_EQ(liae(MamVector{{0.0, 0.7, 0.0}}), 0.0); }

TEST(LiaeTest, TwoPointExample) {
  EXPECT_NEAR(liae(MamVector{{0.3, 0.2}}), -0.6 * std::log(0.6) - 0.4 * std::log(0.4), 1e-12);
}

TEST(LiaeTest, ZeroMassThrows) { EXPECT_THROW(liae(MamVector{{0.0, 0.0}}), ZeroMassError); }

TEST(LiaeTest, BoundedByLogN) {
  auto rng = testing::rng_for(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = testing::random_snapshot(rng, 4, 12);
    const ImageSpan span = testing::random_span(rng, 12);
    const double v = liae(compute_mam(s, span));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, std::log(static_cast<double>(span.size())) + 1e-12);
    EXPECT_NEAR(v, entropy_oracle(compute_mam(s, span).values), 1e-12);
  }
}

TEST(IafTest, FullAndEmptySpan) {
  const auto s = snapshot_of({{0.0, 0.6, 0.4, 0.0}, {1.0, 0.0, 0.0, 0.0}});
  EXPECT_DOUBLE_EQ(iaf(s, 0, {1, 3}), 1.0);
  EXPECT_DOUBLE_EQ(iaf(s, 1, {1, 3}), 0.0);
  EXPECT_THROW(iaf(s, 2, {1, 3}), ShapeError);
}

TEST(IafTest, RandomRowsMatchSumAndStayInUnitInterval) {
  auto rng = testing::rng_for(12);
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = testing::random_snapshot(rng, 3, 10);
    const ImageSpan span = testing::random_span(rng, 10);
    for (std::size_t h = 0; h < 3; ++h) {
      double sum = 0.0;
      for (std::size_t k = span.begin; k < span.end; ++k) sum += s.rows(h, k);
      EXPECT_NEAR(iaf(s, h, span), sum, 1e-15);
      EXPECT_GE(iaf(s, h, span), 0.0);
      EXPECT_LE(iaf(s, h, span), 1.0 + 1e-12);
    }
  }
}

// Running-minimum simulation written independently of detect_layer.
std::vector<bool> simulate_bas(const std::vector<double>& xs) {
  std::vector<bool> flags;
  double bas = std::numeric_limits<double>::infinity();
  for (double x : xs) {
    flags.push_back(x > bas);
    bas = std::min(bas, x);
  }
  return flags;
}

TEST(BasTest, FirstLayerNeverFlags) {
  BasState st;
  EXPECT_FALSE(detect_layer(5.0, st));
  EXPECT_EQ(st.bas, 5.0);
}

TEST(BasTest, WorkedSequence) {
  BasState st;
  std::vector<bool> flags;
  for (double x : {2.0, 1.5, 1.8}) flags.push_back(detect_layer(x, st));
  EXPECT_EQ(flags, (std::vector<bool>{false, false, true}));
  EXPECT_EQ(st.bas, 1.5);
}

TEST(BasTest, ConstantSequenceNeverFlags) {
  BasState st;
  for (int i = 0; i < 10; ++i) EXPECT_FALSE(detect_layer(0.7, st));
}

TEST(BasTest, RandomSequencesMatchSimulationAndBasNeverRises) {
  auto rng = testing::rng_for(13);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  std::uniform_int_distribution<int> len(1, 40);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> xs(len(rng));
    for (double& x : xs) x = u(rng);
    BasState st;
    std::vector<bool> flags;
    double prev = st.bas;
    for (double x : xs) {
      flags.push_back(detect_layer(x, st));
      EXPECT_LE(st.bas, prev);
      prev = st.bas;
    }
    EXPECT_EQ(flags, simulate_bas(xs));
  }
}

TEST(BasTest, AlgorithmLiteralVariant) {
  BasState st;
  // bas starts at +inf: not below the score, so the literal branch flags.
  EXPECT_TRUE(detect_layer(1.0, st, BasRule::algorithm_literal));
  st.bas = 1.0;
  EXPECT_FALSE(detect_layer(2.0, st, BasRule::algorithm_literal));
  EXPECT_EQ(st.bas, 2.0);
  EXPECT_TRUE(detect_layer(1.5, st, BasRule::algorithm_literal));
  EXPECT_EQ(st.bas, 2.0);
}

TEST(SelectHeadsTest, WorkedExample) {
  const HeadSelection sel = select_heads(Vector{0.9, 0.1, 0.5, 0.7}, 2);
  EXPECT_EQ(sel.corrected, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(sel.best, 0u);
}

TEST(SelectHeadsTest, TiesBreakByIndex) {
  const HeadSelection sel = select_heads(Vector{0.3, 0.3, 0.3, 0.3}, 1);
  EXPECT_EQ(sel.corrected, (std::vector<std::size_t>{0}));
  EXPECT_EQ(sel.best, 3u);
}

TEST(SelectHeadsTest, ZeroAndTooMany) {
  EXPECT_TRUE(select_heads(Vector{0.1, 0.2}, 0).corrected.empty());
  EXPECT_THROW(select_heads(Vector{0.1, 0.2}, 2), ConfigError);
}

TEST(SelectHeadsTest, BestNeverCorrected) {
  auto rng = testing::rng_for(14);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    Vector scores(8);
    for (double& s : scores) s = std::round(u(rng) * 4) / 4;  // plenty of ties
    const std::size_t n = trial % 8;
    const HeadSelection sel = select_heads(scores, n);
    EXPECT_EQ(sel.corrected.size(), n);
    EXPECT_EQ(std::count(sel.corrected.begin(), sel.corrected.end(), sel.best), 0);
    for (std::size_t h : sel.corrected) EXPECT_LE(scores[h], scores[sel.best]);
  }
}

TEST(FuseTest, GammaZeroIsIdentity) {
  auto rng = testing::rng_for(15);
  auto s = testing::random_snapshot(rng, 4, 8);
  const auto before = s;
  fuse_heads(s, {{0, 1}, 3}, 0.0, {2, 6}, false);
  EXPECT_EQ(s.rows, before.rows);
}

TEST(FuseTest, GammaOneCopiesBestSlice) {
  auto rng = testing::rng_for(16);
  auto s = testing::random_snapshot(rng, 4, 8);
  const auto before = s;
  fuse_heads(s, {{0, 1}, 3}, 1.0, {2, 6}, false);
  for (std::size_t h : {0, 1})
    for (std::size_t k = 0; k < 8; ++k)
      EXPECT_EQ(s.rows(h, k), (k >= 2 && k < 6) ? before.rows(3, k) : before.rows(h, k));
}

TEST(FuseTest, WorkedExample) {
  auto s = snapshot_of({{0.1, 0.1, 0.8}, {0.4, 0.3, 0.3}});
  fuse_heads(s, {{0}, 1}, 0.8, {0, 2}, false);
  EXPECT_NEAR(s.rows(0, 0), 0.34, 1e-12);
  EXPECT_NEAR(s.rows(0, 1), 0.26, 1e-12);
  EXPECT_EQ(s.rows(0, 2), 0.8);
}

TEST(FuseTest, RowSumIdentityConvexityAndIafGain) {
  auto rng = testing::rng_for(17);
  std::uniform_real_distribution<double> ug(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    auto s = testing::random_snapshot(rng, 6, 12);
    const ImageSpan span = testing::random_span(rng, 12);
    const double gamma = ug(rng);
    Vector scores(6);
    for (std::size_t h = 0; h < 6; ++h) scores[h] = iaf(s, h, span);
    const HeadSelection sel = select_heads(scores, 3);
    const auto before = s;
    fuse_heads(s, sel, gamma, span, false);
    for (std::size_t h : sel.corrected) {
      double total = 0.0;
      for (double v : s.rows.row(h)) total += v;
      EXPECT_NEAR(total, 1.0 + gamma * (scores[sel.best] - scores[h]), 1e-6);
      for (std::size_t k = span.begin; k < span.end; ++k) {
        const double a = before.rows(h, k), b = before.rows(sel.best, k);
        EXPECT_GE(s.rows(h, k), std::min(a, b) - 1e-15);
        EXPECT_LE(s.rows(h, k), std::max(a, b) + 1e-15);
      }
      EXPECT_GE(iaf(s, h, span), scores[h] - 1e-15);
    }
  }
}

TEST(FuseTest, RenormalizedRowsSumToOne) {
  auto rng = testing::rng_for(18);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = testing::random_snapshot(rng, 4, 9);
    const ImageSpan span = testing::random_span(rng, 9);
    fuse_heads(s, {{0, 2}, 1}, 0.7, span, true);
    for (std::size_t h = 0; h < 4; ++h) {
      double total = 0.0;
      for (double v : s.rows.row(h)) total += v;
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(FuseTest, IdempotentAtGammaOne) {
  auto rng = testing::rng_for(19);
  auto s = testing::random_snapshot(rng, 4, 8);
  fuse_heads(s, {{0, 2}, 1}, 1.0, {1, 7}, false);
  const auto once = s;
  fuse_heads(s, {{0, 2}, 1}, 1.0, {1, 7}, false);
  EXPECT_EQ(s.rows, once.rows);
}

TEST(FuseTest, BestInCorrectedRejected) {
  auto s = snapshot_of({{0.5, 0.5}, {0.5, 0.5}});
  EXPECT_THROW(fuse_heads(s, {{1}, 1}, 0.5, {0, 1}, false), ConfigError);
}

TEST(WindowTest, ParseAndPrint) {
  EXPECT_EQ(parse_window("0-25"), LayerWindow::range(0, 25));
  EXPECT_EQ(parse_window("3,7"), LayerWindow::range(3, 7));
  EXPECT_EQ(parse_window("all"), LayerWindow::every());
  EXPECT_EQ(parse_window("none"), LayerWindow::empty());
  EXPECT_EQ(to_string(LayerWindow::range(2, 9)), "2-9");
  EXPECT_THROW(parse_window("9-2"), ConfigError);
  EXPECT_THROW(parse_window("x-2"), ConfigError);
  EXPECT_THROW(parse_window("12"), ConfigError);
  EXPECT_TRUE(LayerWindow::range(2, 4).contains(4));
  EXPECT_FALSE(LayerWindow::range(2, 4).contains(5));
  EXPECT_FALSE(LayerWindow::empty().contains(0));
}

TEST(DleafConfigTest, Validation) {
  DleafConfig c;
  EXPECT_NO_THROW(c.validate_for(32, 8));
  c.gamma = 1.2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DleafConfig{};
  EXPECT_THROW(c.validate_for(32, 4), ConfigError);  // n = 4 is not below H = 4
  EXPECT_THROW(c.validate_for(20, 8), ConfigError);  // window reaches layer 25
  c.alpha = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(DleafConfigTest, ParseEnums) {
  EXPECT_EQ(parse_detection_metric("lias"), DetectionMetric::lias);
  EXPECT_EQ(parse_head_metric("iae"), HeadMetric::iae);
  EXPECT_EQ(parse_bas_rule("algorithm_literal"), BasRule::algorithm_literal);
  EXPECT_THROW(parse_detection_metric("LIAE"), ConfigError);
}

TEST(DetectionScoreTest, Orientation) {
  const MamVector mam{{0.2, 0.1, 0.3}};
  DleafConfig c;
  EXPECT_DOUBLE_EQ(detection_score(mam, c), liae(mam));
  c.detection_metric = DetectionMetric::liaf;
  EXPECT_DOUBLE_EQ(detection_score(mam, c), -liaf(mam));
  c.detection_metric = DetectionMetric::lias;
  c.alpha = 0.3;
  EXPECT_DOUBLE_EQ(detection_score(mam, c), 0.3 * liae(mam) - 0.7 * liaf(mam));
}

TEST(HeadScoresTest, Orientation) {
  const auto s = snapshot_of({{0.3, 0.3, 0.4}, {0.6, 0.0, 0.4}});
  DleafConfig c;
  EXPECT_EQ(head_scores(s, {0, 2}, c), (Vector{0.6, 0.6}));
  c.head_metric = HeadMetric::iae;
  const Vector e = head_scores(s, {0, 2}, c);
  EXPECT_NEAR(e[0], -std::log(2.0), 1e-12);
  EXPECT_EQ(e[1], 0.0);  // focused head ranks above the diffuse one
  c.head_metric = HeadMetric::ias;
  c.beta = 0.5;
  EXPECT_NEAR(head_scores(s, {0, 2}, c)[0], 0.5 * 0.6 + 0.5 * std::log(2.0), 1e-12);
}

// Layers share a shape of decreasing entropy except layer 7, which is diffuse.
std::vector<AttentionSnapshot> layered_trace(std::size_t layers, std::size_t diffuse) {
  std::vector<AttentionSnapshot> out;
  for (std::size_t l = 0; l < layers; ++l) {
    AttentionSnapshot s{l, Matrix(4, 9)};
    for (std::size_t h = 0; h < 4; ++h) {
      const double mass = l == diffuse ? (h == 2 ? 0.8 : 0.1) : 0.6;
      Vector w(8);
      double total = 0.0;
      for (std::size_t n = 0; n < 8; ++n) {
        w[n] = l == diffuse ? 1.0 : std::exp(0.3 * static_cast<double>(l + 1) * static_cast<double>(n));
        total += w[n];
      }
      for (std::size_t n = 0; n < 8; ++n) s.rows(h, n) = mass * w[n] / total;
      s.rows(h, 8) = 1.0 - mass;
    }
    out.push_back(std::move(s));
  }
  return out;
}

TEST(ApplyDleafTest, OnlyDiffuseLayerFlagged) {
  auto layers = layered_trace(12, 7);
  DleafConfig c;
  c.heads = 2;
  c.window = LayerWindow::range(0, 11);
  const StepLog log = apply_dleaf(layers, {0, 8}, c);
  EXPECT_EQ(log.flagged_layers(), (std::vector<std::size_t>{7}));
  ASSERT_EQ(log.corrections.size(), 1u);
  EXPECT_EQ(log.corrections[0].best, 2u);
  EXPECT_EQ(log.corrections[0].corrected, (std::vector<std::size_t>{0, 1}));
  EXPECT_NEAR(log.corrections[0].iaf_after[0], 0.8 * 0.8 + 0.2 * 0.1, 1e-12);
  for (std::size_t i = 1; i < log.decisions.size(); ++i) EXPECT_LE(log.decisions[i].bas, log.decisions[i - 1].bas);
}

TEST(ApplyDleafTest, OutOfWindowLayersUntouched) {
  auto layers = layered_trace(12, 7);
  const auto before = layers;
  DleafConfig c;
  c.window = LayerWindow::range(0, 5);
  const StepLog log = apply_dleaf(layers, {0, 8}, c);
  EXPECT_EQ(log.decisions.size(), 6u);
  EXPECT_TRUE(log.flagged_layers().empty());
  for (std::size_t l = 0; l < layers.size(); ++l) EXPECT_EQ(layers[l].rows, before[l].rows);
}

TEST(ApplyDleafTest, ZeroHeadsFlagsButChangesNothing) {
  auto layers = layered_trace(12, 7);
  const auto before = layers;
  DleafConfig c;
  c.heads = 0;
  const StepLog log = apply_dleaf(layers, {0, 8}, c);
  EXPECT_EQ(log.flagged_layers(), (std::vector<std::size_t>{7}));
  EXPECT_TRUE(log.corrections.at(0).corrected.empty());
  for (std::size_t l = 0; l < layers.size(); ++l) EXPECT_EQ(layers[l].rows, before[l].rows);
}

TEST(ApplyDleafTest, Deterministic) {
  auto rng = testing::rng_for(20);
  std::vector<AttentionSnapshot> layers;
  for (std::size_t l = 0; l < 10; ++l) layers.push_back(testing::random_snapshot(rng, 8, 16, l));
  auto a = layers, b = layers;
  DleafConfig c;
  c.window = LayerWindow::every();
  const StepLog la = apply_dleaf(a, {2, 14}, c), lb = apply_dleaf(b, {2, 14}, c);
  EXPECT_EQ(la.flagged_layers(), lb.flagged_layers());
  ASSERT_EQ(la.corrections.size(), lb.corrections.size());
  for (std::size_t i = 0; i < la.corrections.size(); ++i) {
    EXPECT_EQ(la.corrections[i].corrected, lb.corrections[i].corrected);
    EXPECT_EQ(la.corrections[i].iaf_after, lb.corrections[i].iaf_after);
  }
}

TEST(ApplyDleafTest, LogInvariantsOnRandomSteps) {
  auto rng = testing::rng_for(21);
  DleafConfig c;
  c.window = LayerWindow::every();
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<AttentionSnapshot> layers;
    for (std::size_t l = 0; l < 12; ++l) layers.push_back(testing::random_snapshot(rng, 8, 16, l));
    const StepLog log = apply_dleaf(layers, {2, 14}, c);
    for (const auto& fix : log.corrections) {
      EXPECT_EQ(fix.corrected.size(), std::min<std::size_t>(c.heads, 7));
      EXPECT_EQ(std::count(fix.corrected.begin(), fix.corrected.end(), fix.best), 0);
      for (std::size_t h : fix.corrected) EXPECT_GE(fix.iaf_after[h], fix.iaf_before[h]);
    }
  }
}

}  // namespace
}  // namespace dleaf
