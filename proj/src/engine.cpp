#include "dleaf/engine.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numeric>

#include "dleaf/diagnostics.hpp"
#include "dleaf/error.hpp"

namespace dleaf {

std::string to_string(DetectionMetric m) {
  switch (m) {
    case DetectionMetric::liae: return "liae";
    case DetectionMetric::liaf: return "liaf";
    case DetectionMetric::lias: return "lias";
  }
  return "?";
}

std::string to_string(HeadMetric m) {
  switch (m) {
    case HeadMetric::iaf: return "iaf";
    case HeadMetric::iae: return "iae";
    case HeadMetric::ias: return "ias";
  }
  return "?";
}

std::string to_string(BasRule r) {
  return r == BasRule::running_min ? "running_min" : "algorithm_literal";
}

DetectionMetric parse_detection_metric(const std::string& s) {
  if (s == "liae") return DetectionMetric::liae;
  if (s == "liaf") return DetectionMetric::liaf;
  if (s == "lias") return DetectionMetric::lias;
  throw ConfigError("unknown detection metric '" + s + "' (expected liae, liaf or lias)");
}

HeadMetric parse_head_metric(const std::string& s) {
  if (s == "iaf") return HeadMetric::iaf;
  if (s == "iae") return HeadMetric::iae;
  if (s == "ias") return HeadMetric::ias;
  throw ConfigError("unknown head metric '" + s + "' (expected iaf, iae or ias)");
}

BasRule parse_bas_rule(const std::string& s) {
  if (s == "running_min") return BasRule::running_min;
  if (s == "algorithm_literal") return BasRule::algorithm_literal;
  throw ConfigError("unknown bas rule '" + s + "'");
}

std::string to_string(const LayerWindow& w) {
  switch (w.kind) {
    case LayerWindow::Kind::all: return "all";
    case LayerWindow::Kind::none: return "none";
    case LayerWindow::Kind::range: return std::to_string(w.first) + "-" + std::to_string(w.last);
  }
  return "?";
}

LayerWindow parse_window(const std::string& s) {
  if (s == "all") return LayerWindow::every();
  if (s == "none") return LayerWindow::empty();
  const auto sep = s.find_first_of("-,");
  if (sep == std::string::npos) throw ConfigError("malformed layer window '" + s + "'");
  try {
    std::size_t used_a = 0, used_b = 0;
    const std::string a = s.substr(0, sep), b = s.substr(sep + 1);
    const unsigned long first = std::stoul(a, &used_a);
    const unsigned long last = std::stoul(b, &used_b);
    if (used_a != a.size() || used_b != b.size()) throw std::invalid_argument(s);
    if (first > last) throw ConfigError("layer window '" + s + "' has first > last");
    return LayerWindow::range(first, last);
  } catch (const std::logic_error&) {
    throw ConfigError("malformed layer window '" + s + "'");
  }
}

void DleafConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
  if (window.kind == LayerWindow::Kind::range && window.first > window.last) {
    throw ConfigError("layer window has first > last");
  }
}

void DleafConfig::validate_for(std::size_t num_layers, std::size_t num_heads) const {
  validate();
  if (heads >= num_heads) {
    throw ConfigError("heads to correct (" + std::to_string(heads) +
                      ") must be below the head count (" + std::to_string(num_heads) + ")");
  }
  if (window.kind == LayerWindow::Kind::range && window.last >= num_layers) {
    throw ConfigError("layer window " + to_string(window) + " exceeds the model's " +
                      std::to_string(num_layers) + " layers");
  }
}

namespace {

void check_span(const AttentionSnapshot& snapshot, ImageSpan span) {
  if (span.empty()) throw SpanError("image span is empty");
  if (span.end > snapshot.num_keys()) {
    throw SpanError("image span [" + std::to_string(span.begin) + ", " +
                    std::to_string(span.end) + ") exceeds " +
                    std::to_string(snapshot.num_keys()) + " keys");
  }
}

}  // namespace

MamVector compute_mam(const AttentionSnapshot& snapshot, ImageSpan span) {
  check_span(snapshot, span);
  MamVector mam{Vector(span.size(), 0.0)};
  if (snapshot.num_heads() == 0) return mam;
  for (std::size_t n = 0; n < span.size(); ++n) {
    double best = snapshot.rows(0, span.begin + n);
    for (std::size_t h = 1; h < snapshot.num_heads(); ++h) {
      best = std::max(best, snapshot.rows(h, span.begin + n));
    }
    mam.values[n] = best;
  }
  return mam;
}

double normalized_entropy(std::span<const double> values) {
  double total = 0.0;
  for (double v : values) total += v;
  if (!(total > 0.0)) throw ZeroMassError("entropy of a vector with no mass");
  double h = 0.0;
  for (double v : values) {
    if (v > 0.0) {
      const double p = v / total;
      h -= p * std::log(p);
    }
  }
  return h;
}

double liae(const MamVector& mam) { return normalized_entropy(mam.values); }

double iaf(const AttentionSnapshot& snapshot, std::size_t head, ImageSpan span) {
  if (head >= snapshot.num_heads()) throw ShapeError("iaf: head index out of range");
  check_span(snapshot, span);
  double mass = 0.0;
  for (std::size_t k = span.begin; k < span.end; ++k) mass += snapshot.rows(head, k);
  return mass;
}

bool detect_layer(double score, BasState& state, BasRule rule) {
  if (rule == BasRule::algorithm_literal) {
    if (state.bas < score) {
      state.bas = score;
      return false;
    }
    return true;
  }
  if (score > state.bas) return true;
  state.bas = score;
  return false;
}

HeadSelection select_heads(std::span<const double> scores, std::size_t n) {
  if (scores.empty()) throw ConfigError("select_heads: no heads to rank");
  if (n >= scores.size()) {
    throw ConfigError("select_heads: cannot correct " + std::to_string(n) + " of " +
                      std::to_string(scores.size()) + " heads");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  HeadSelection sel;
  sel.corrected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  sel.best = order.back();
  return sel;
}

void fuse_heads(AttentionSnapshot& snapshot, const HeadSelection& selection, double gamma,
                ImageSpan span, bool renormalize) {
  check_span(snapshot, span);
  if (selection.best >= snapshot.num_heads()) throw ShapeError("fuse_heads: bad best head");
  for (std::size_t h : selection.corrected) {
    if (h >= snapshot.num_heads()) throw ShapeError("fuse_heads: bad corrected head");
    if (h == selection.best) throw ConfigError("fuse_heads: best head is also corrected");
    for (std::size_t k = span.begin; k < span.end; ++k) {
      snapshot.rows(h, k) = gamma * snapshot.rows(selection.best, k) + (1.0 - gamma) * snapshot.rows(h, k);
    }
    if (renormalize) {
      auto row = snapshot.rows.row(h);
      double total = 0.0;
      for (double v : row) total += v;
      if (total > 0.0) {
        for (double& v : row) v /= total;
      }
    }
  }
}

double detection_score(const MamVector& mam, const DleafConfig& config) {
  switch (config.detection_metric) {
    case DetectionMetric::liae: return liae(mam);
    case DetectionMetric::liaf: return -liaf(mam);
    case DetectionMetric::lias: return lias(liae(mam), liaf(mam), config.alpha);
  }
  return 0.0;
}

Vector head_scores(const AttentionSnapshot& snapshot, ImageSpan span, const DleafConfig& config) {
  Vector scores(snapshot.num_heads());
  for (std::size_t h = 0; h < scores.size(); ++h) {
    switch (config.head_metric) {
      case HeadMetric::iaf: scores[h] = iaf(snapshot, h, span); break;
      case HeadMetric::iae: scores[h] = -iae(snapshot, h, span); break;
      case HeadMetric::ias:
        scores[h] = ias(iaf(snapshot, h, span), iae(snapshot, h, span), config.beta);
        break;
    }
  }
  return scores;
}

std::vector<std::size_t> StepLog::flagged_layers() const {
  std::vector<std::size_t> out;
  for (const auto& d : decisions) {
    if (d.flagged) out.push_back(d.layer);
  }
  return out;
}

DleafStepper::DleafStepper(DleafConfig config) : config_(std::move(config)) { config_.validate(); }

void DleafStepper::begin(std::size_t step, std::size_t position) {
  state_ = BasState{};
  current_ = StepLog{};
  current_.step = step;
  current_.position = position;
}

void DleafStepper::process(AttentionSnapshot& snapshot, ImageSpan span) {
  if (!config_.window.contains(snapshot.layer)) return;
  const double before = state_.bas;
  const double score = detection_score(compute_mam(snapshot, span), config_);
  const bool flagged = detect_layer(score, state_, config_.bas_rule);
  assert(config_.bas_rule != BasRule::running_min || state_.bas <= before);
  (void)before;
  current_.decisions.push_back({snapshot.layer, score, state_.bas, flagged});
  if (!flagged) return;

  const Vector scores = head_scores(snapshot, span, config_);
  HeadCorrection fix;
  fix.layer = snapshot.layer;
  HeadSelection sel = select_heads(scores, config_.heads);
  fix.iaf_before.resize(snapshot.num_heads());
  for (std::size_t h = 0; h < snapshot.num_heads(); ++h) fix.iaf_before[h] = iaf(snapshot, h, span);
  fuse_heads(snapshot, sel, config_.gamma, span, config_.renormalize);
  fix.iaf_after.resize(snapshot.num_heads());
  for (std::size_t h = 0; h < snapshot.num_heads(); ++h) fix.iaf_after[h] = iaf(snapshot, h, span);
  fix.corrected = std::move(sel.corrected);
  fix.best = sel.best;
  current_.corrections.push_back(std::move(fix));
}

StepLog DleafStepper::finish() { return std::move(current_); }

StepLog apply_dleaf(std::span<AttentionSnapshot> layers, ImageSpan span, const DleafConfig& config,
                    std::size_t step) {
  DleafStepper stepper(config);
  stepper.begin(step, step);
  for (auto& snapshot : layers) stepper.process(snapshot, span);
  return stepper.finish();
}

void DleafHook::begin_step(std::size_t position) { stepper_.begin(log_.steps.size(), position); }

void DleafHook::on_attention(AttentionSnapshot& snapshot, ImageSpan span) {
  stepper_.process(snapshot, span);
}

void DleafHook::end_step() { log_.steps.push_back(stepper_.finish()); }

}  // namespace dleaf
