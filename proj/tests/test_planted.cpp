#include "dleaf/planted.hpp"

#include <gtest/gtest.h>

#include "dleaf/error.hpp"

namespace dleaf {
namespace {

PlantedOptions small_options(std::size_t steps = 120) {
  PlantedOptions o;
  o.steps = steps;
  return o;
}

std::size_t count_label(const PlantedTask& task, Label label) {
  std::size_t n = 0;
  for (const auto& r : task.traces.records) n += r.label == label;
  return n;
}

TEST(PlantedTest, DeterministicInSeed) {
  const PlantedTask a = planted_task({}, 11, small_options()), b = planted_task({}, 11, small_options());
  const PlantedTask c = planted_task({}, 12, small_options());
  ASSERT_EQ(a.traces.records.size(), 120u);
  EXPECT_EQ(a.planted_layers, b.planted_layers);
  bool differs = a.planted_layers != c.planted_layers;
  for (std::size_t r = 0; r < a.traces.records.size(); ++r) {
    EXPECT_EQ(a.traces.records[r].attention, b.traces.records[r].attention);
    EXPECT_EQ(a.traces.records[r].label, b.traces.records[r].label);
    differs |= a.traces.records[r].attention != c.traces.records[r].attention;
  }
  EXPECT_TRUE(differs);
}

TEST(PlantedTest, ProneFractionAndPlantingWindow) {
  const PlantedOptions opt = small_options(200);
  const PlantedTask task = planted_task({}, 3, opt);
  std::size_t prone = 0;
  for (const auto& layers : task.planted_layers) {
    prone += !layers.empty();
    EXPECT_LE(layers.size(), opt.max_planted_layers);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      EXPECT_GE(layers[i], 1u);
      EXPECT_LE(layers[i], opt.planting_window.last);
      if (i) EXPECT_LT(layers[i - 1], layers[i]);
    }
  }
  EXPECT_EQ(prone, 80u);
}

TEST(PlantedTest, OracleMatchesPlanting) {
  const PlantedTask task = planted_task({}, 5, small_options(200));
  for (std::size_t r = 0; r < task.traces.records.size(); ++r) {
    const bool planted = !task.planted_layers[r].empty();
    EXPECT_EQ(task.traces.records[r].label == Label::hallucinated, planted) << "record " << r;
  }
}

TEST(PlantedTest, RecordsAreSubStochastic) {
  const PlantedTask task = planted_task({}, 6, small_options(40));
  for (const auto& rec : task.traces.records) {
    ASSERT_EQ(rec.attention.size(), 32u);
    for (const auto& slice : rec.attention) {
      for (std::size_t h = 0; h < slice.rows(); ++h) {
        double total = 0.0;
        for (double v : slice.row(h)) {
          EXPECT_GE(v, 0.0);
          total += v;
        }
        EXPECT_LE(total, 1.0 + 1e-12);
      }
    }
  }
}

TEST(PlantedTest, ThresholdBoundaries) {
  SyntheticScene zero;
  zero.tau = 0.0;
  const PlantedTask none = planted_task(zero, 7, small_options(60));
  EXPECT_EQ(count_label(none, Label::hallucinated), 0u);
  EXPECT_EQ(evaluate_planted(none, DleafConfig{}).hallucinated_after, 0u);

  SyntheticScene high;
  high.tau = 1.0 + 1e-6;
  const PlantedTask all = planted_task(high, 7, small_options(60));
  EXPECT_EQ(count_label(all, Label::hallucinated), 60u);
  DleafConfig cfg;
  cfg.renormalize = true;
  EXPECT_EQ(evaluate_planted(all, cfg).hallucinated_after, 60u);
  EXPECT_EQ(evaluate_planted(all, DleafConfig{}).hallucinated_after, 60u);
}

TEST(PlantedTest, CorrectionStrictlyReduces) {
  const PlantedTask task = planted_task({}, 42, small_options(500));
  const PlantedOutcome before = evaluate_planted(task, std::nullopt);
  const PlantedOutcome after = evaluate_planted(task, DleafConfig{});
  EXPECT_EQ(before.hallucinated_before, count_label(task, Label::hallucinated));
  EXPECT_EQ(before.hallucinated_after, before.hallucinated_before);
  EXPECT_LT(after.hallucinated_after, after.hallucinated_before);
  EXPECT_GE(after.detection_recall(), 0.9);
  EXPECT_GE(after.detection_precision(), 0.8);
  EXPECT_EQ(after.log.steps.size(), 500u);
}

TEST(PlantedTest, GammaSweepWeaklyDecreasing) {
  const PlantedTask task = planted_task({}, 9, small_options(200));
  std::size_t previous = task.traces.records.size() + 1;
  std::vector<bool> prev_after;
  for (double gamma : {0.0, 0.1, 0.3, 0.5, 0.7, 0.8, 0.9, 1.0}) {
    DleafConfig cfg;
    cfg.gamma = gamma;
    const PlantedOutcome out = evaluate_planted(task, cfg);
    EXPECT_LE(out.hallucinated_after, previous) << "gamma " << gamma;
    // per step: once repaired, a larger gamma keeps it repaired
    if (!prev_after.empty()) {
      for (std::size_t r = 0; r < out.after.size(); ++r) {
        if (!prev_after[r]) EXPECT_FALSE(out.after[r]);
      }
    }
    previous = out.hallucinated_after;
    prev_after = out.after;
    if (gamma == 0.0) EXPECT_EQ(out.hallucinated_after, out.hallucinated_before);
  }
}

TEST(PlantedTest, StepImageMassOracle) {
  std::vector<AttentionSnapshot> layers;
  Matrix a(2, 3, 0.0), b(2, 3, 0.0);
  a(0, 0) = 0.5;
  a(1, 1) = 0.3;  // mean 0.4
  b(0, 0) = 0.2;
  b(1, 2) = 0.2;  // mean 0.2
  layers.push_back({0, a});
  layers.push_back({1, b});
  EXPECT_DOUBLE_EQ(step_image_mass(layers, {0, 2}), 0.1);
  EXPECT_DOUBLE_EQ(step_image_mass(layers, {0, 3}), 0.2);
}

TEST(PlantedTest, InvalidScenes) {
  SyntheticScene empty;
  empty.present_objects.clear();
  EXPECT_THROW(planted_task(empty, 1), ConfigError);
  SyntheticScene outside;
  outside.present_objects = {3};
  EXPECT_THROW(planted_task(outside, 1), ConfigError);
  PlantedOptions wide;
  wide.planting_window = LayerWindow::range(0, 40);
  EXPECT_THROW(planted_task({}, 1, wide), ConfigError);
  DleafConfig too_many;
  too_many.heads = 8;
  EXPECT_THROW(evaluate_planted(planted_task({}, 1, small_options(5)), too_many), ConfigError);
}

}  // namespace
}  // namespace dleaf
