#include "dleaf/analysis.hpp"

#include <algorithm>
#include <numeric>

#include "dleaf/error.hpp"

namespace dleaf {

LayerTest layer_test(const Vector& real, const Vector& hallucinated) {
  if (real.size() != hallucinated.size()) throw ShapeError("layer_test: length mismatch");
  LayerTest out;
  out.differences.resize(real.size());
  for (std::size_t i = 0; i < real.size(); ++i) out.differences[i] = real[i] - hallucinated[i];
  try {
    out.test = stats::wilcoxon_signed_rank(out.differences);
  } catch (const DegenerateSampleError&) {
    out.test = {0.0, 1.0, 0, "degenerate"};
  }
  return out;
}

JointFit joint_fit(std::string x_name, const Vector& x, std::string y_name, const Vector& y) {
  if (x.size() != y.size()) throw ShapeError("joint_fit: length mismatch");
  if (x.empty()) throw EmptyInputError("joint_fit: no points");
  JointFit fit{std::move(x_name), std::move(y_name), 0.0, true, {}};
  try {
    fit.rho = stats::spearman(x, y);
  } catch (const DegenerateSampleError&) {
    fit.rho = 0.0;
  }
  fit.increasing = fit.rho >= 0.0;

  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  Vector ys(x.size());
  const double sign = fit.increasing ? 1.0 : -1.0;
  for (std::size_t i = 0; i < order.size(); ++i) ys[i] = sign * y[order[i]];
  const Vector levels = stats::isotonic_pava(ys);

  for (std::size_t i = 0; i < order.size(); ++i) {
    const double xv = x[order[i]], level = sign * levels[i];
    if (!fit.blocks.empty() && fit.blocks.back().value == level) {
      fit.blocks.back().x_max = xv;
      ++fit.blocks.back().count;
    } else {
      fit.blocks.push_back({xv, xv, level, 1});
    }
  }
  return fit;
}

namespace {

Vector flatten(const Matrix& m) { return Vector(m.data().begin(), m.data().end()); }

nlohmann::ordered_json to_json(const stats::TestResult& t) {
  return {{"statistic", t.statistic}, {"p_value", t.p_value}, {"n_effective", t.n_effective},
          {"method", t.method}};
}

nlohmann::ordered_json to_json(const JointFit& f) {
  nlohmann::ordered_json blocks = nlohmann::ordered_json::array();
  for (const auto& b : f.blocks) {
    blocks.push_back({{"x_min", b.x_min}, {"x_max", b.x_max}, {"value", b.value}, {"count", b.count}});
  }
  return {{"x", f.x_name}, {"y", f.y_name}, {"spearman_rho", f.rho},
          {"direction", f.increasing ? "increasing" : "decreasing"}, {"fit", blocks}};
}

nlohmann::ordered_json to_json(const LayerTest& t) {
  return {{"differences", t.differences}, {"wilcoxon", to_json(t.test)}};
}

}  // namespace

AnalysisReport analyze_traces(const TraceSet& traces, std::size_t histogram_k) {
  if (traces.records.empty()) throw EmptyInputError("analyze: trace has no records");
  AnalysisReport r;
  r.records = traces.records.size();
  for (const auto& rec : traces.records) {
    if (rec.label == Label::real) ++r.real;
    else if (rec.label == Label::hallucinated) ++r.hallucinated;
    else ++r.unlabeled;
  }

  const LayerMetricTable table = layer_metrics(traces);
  r.liae_liaf = joint_fit("liae", flatten(table.liae), "liaf", flatten(table.liaf));
  r.iae_iaf = joint_fit("mean_iae", flatten(table.mean_iae), "mean_iaf", flatten(table.mean_iaf));

  if (r.real > 0 && r.hallucinated > 0) {
    r.split = label_split_layer_stats(traces);
    r.attention_test = layer_test(r.split->attention_real, r.split->attention_hallucinated);
    r.entropy_test = layer_test(r.split->entropy_real, r.split->entropy_hallucinated);
    const std::size_t layers = traces.header.num_layers;
    Vector liae_real(layers, 0.0), liae_hall(layers, 0.0);
    for (std::size_t i = 0; i < traces.records.size(); ++i) {
      const Label label = traces.records[i].label;
      if (label == Label::unlabeled) continue;
      Vector& target = label == Label::real ? liae_real : liae_hall;
      for (std::size_t l = 0; l < layers; ++l) target[l] += table.liae(i, l);
    }
    for (std::size_t l = 0; l < layers; ++l) {
      liae_real[l] /= static_cast<double>(r.real);
      liae_hall[l] /= static_cast<double>(r.hallucinated);
    }
    r.liae_test = layer_test(liae_real, liae_hall);
  }
  if (r.hallucinated > 0 && histogram_k > 0) {
    r.histogram_k = std::min(histogram_k, traces.header.num_layers * traces.header.num_heads);
    r.histogram = global_head_histogram(traces, r.histogram_k);
  }
  return r;
}

nlohmann::ordered_json to_json(const AnalysisReport& r) {
  nlohmann::ordered_json j;
  j["records"] = {{"total", r.records}, {"real", r.real}, {"hallucinated", r.hallucinated},
                  {"unlabeled", r.unlabeled}};
  if (r.split) {
    j["layer_stats"] = {{"attention_real", r.split->attention_real},
                        {"attention_hallucinated", r.split->attention_hallucinated},
                        {"entropy_real", r.split->entropy_real},
                        {"entropy_hallucinated", r.split->entropy_hallucinated}};
    j["attention_test"] = to_json(*r.attention_test);
    j["entropy_test"] = to_json(*r.entropy_test);
    j["liae_test"] = to_json(*r.liae_test);
  } else {
    j["layer_stats"] = nullptr;
    j["attention_test"] = nullptr;
    j["entropy_test"] = nullptr;
    j["liae_test"] = nullptr;
  }
  j["liae_liaf"] = to_json(r.liae_liaf);
  j["iae_iaf"] = to_json(r.iae_iaf);
  if (r.histogram) {
    j["head_histogram"] = {{"k", r.histogram_k}, {"per_layer", *r.histogram}};
  } else {
    j["head_histogram"] = nullptr;
  }
  return j;
}

}  // namespace dleaf
