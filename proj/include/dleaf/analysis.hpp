#pragma once

// Trace-level statistics report: per-layer Wilcoxon tests between real and
// hallucinated tokens, rank correlation and isotonic fits between paired
// layer metrics, and the weakest-head histogram.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dleaf/diagnostics.hpp"
#include "dleaf/stats.hpp"
#include "dleaf/trace.hpp"

namespace dleaf {

struct LayerTest {
  Vector differences;  // per layer, real minus hallucinated
  stats::TestResult test;
};

// One constant piece of an isotonic fit over the points sorted by x.
struct FitBlock {
  double x_min = 0.0;
  double x_max = 0.0;
  double value = 0.0;
  std::size_t count = 0;
};

struct JointFit {
  std::string x_name, y_name;
  double rho = 0.0;
  bool increasing = true;  // direction of the fit, taken from the sign of rho
  std::vector<FitBlock> blocks;
};

struct AnalysisReport {
  std::size_t records = 0, real = 0, hallucinated = 0, unlabeled = 0;
  std::optional<LabelSplitStats> split;
  std::optional<LayerTest> attention_test;
  std::optional<LayerTest> entropy_test;
  std::optional<LayerTest> liae_test;  // per-layer mean LIAE
  JointFit liae_liaf;
  JointFit iae_iaf;
  std::optional<std::vector<std::size_t>> histogram;
  std::size_t histogram_k = 0;
};

// Paired Wilcoxon over layers. When every difference is zero the result is
// reported as p = 1 with method "degenerate".
LayerTest layer_test(const Vector& real, const Vector& hallucinated);

// Spearman rho of (x, y) and a PAVA fit of y on x in the direction of rho.
JointFit joint_fit(std::string x_name, const Vector& x, std::string y_name, const Vector& y);

// Label-dependent parts are left empty when either class is missing.
AnalysisReport analyze_traces(const TraceSet& traces, std::size_t histogram_k = 32);

nlohmann::ordered_json to_json(const AnalysisReport& report);

}  // namespace dleaf
