#pragma once

// Detect-and-correct loop over per-layer attention.
//
// Per forward step, layers inside the window are visited in order. Each layer
// gets a detection score computed from its max-over-heads image attention
// (LIAE by default). A running minimum of that score (BAS) is kept across the
// step; a layer whose score strictly exceeds the current BAS is flagged. For a
// flagged layer the heads are ranked by image focus, and the n weakest have
// their image-span attention blended toward the strongest head's with weight
// gamma. Unflagged layers lower BAS to their own score.

#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dleaf/model.hpp"
#include "dleaf/tensor.hpp"

namespace dleaf {

enum class DetectionMetric { liae, liaf, lias };
enum class HeadMetric { iaf, iae, ias };
// running_min: BAS = min(BAS, score), flag when score > BAS.
// algorithm_literal: the pseudo-code branch order, which raises BAS when the
// score is larger and corrects otherwise; kept for comparison runs.
enum class BasRule { running_min, algorithm_literal };

std::string to_string(DetectionMetric m);
std::string to_string(HeadMetric m);
std::string to_string(BasRule r);
DetectionMetric parse_detection_metric(const std::string& s);
HeadMetric parse_head_metric(const std::string& s);
BasRule parse_bas_rule(const std::string& s);

// Inclusive layer interval, every layer, or no layer at all.
struct LayerWindow {
  enum class Kind { range, all, none };
  Kind kind = Kind::range;
  std::size_t first = 0;
  std::size_t last = 25;

  static LayerWindow range(std::size_t first, std::size_t last) { return {Kind::range, first, last}; }
  static LayerWindow every() { return {Kind::all, 0, 0}; }
  static LayerWindow empty() { return {Kind::none, 0, 0}; }

  bool contains(std::size_t layer) const noexcept {
    switch (kind) {
      case Kind::all: return true;
      case Kind::none: return false;
      case Kind::range: return layer >= first && layer <= last;
    }
    return false;
  }
  bool operator==(const LayerWindow&) const = default;
};

std::string to_string(const LayerWindow& w);
// Accepts "all", "none", "A-B" or "A,B".
LayerWindow parse_window(const std::string& s);

struct DleafConfig {
  double gamma = 0.8;
  std::size_t heads = 4;
  LayerWindow window;
  DetectionMetric detection_metric = DetectionMetric::liae;
  HeadMetric head_metric = HeadMetric::iaf;
  double alpha = 0.5;
  double beta = 0.5;
  bool renormalize = false;
  BasRule bas_rule = BasRule::running_min;

  // Range checks that do not depend on the model.
  void validate() const;
  // Also checks heads < num_heads and window.last < num_layers.
  void validate_for(std::size_t num_layers, std::size_t num_heads) const;

  bool operator==(const DleafConfig&) const = default;
};

struct MamVector {
  Vector values;
};

// Elementwise max over heads of the image-span columns. Throws SpanError for
// an empty span or one past the snapshot's keys.
MamVector compute_mam(const AttentionSnapshot& snapshot, ImageSpan span);

// Shannon entropy (natural log) of values / sum(values). ZeroMassError when
// the sum is not positive.
double normalized_entropy(std::span<const double> values);

double liae(const MamVector& mam);

// Attention mass one head puts on the image span.
double iaf(const AttentionSnapshot& snapshot, std::size_t head, ImageSpan span);

struct BasState {
  double bas = std::numeric_limits<double>::infinity();
};

// Returns whether the layer is flagged and updates state per `rule`.
bool detect_layer(double score, BasState& state, BasRule rule = BasRule::running_min);

struct HeadSelection {
  std::vector<std::size_t> corrected;
  std::size_t best = 0;
};

// Stable ascending sort of scores; the first n are corrected and the last is
// best. ConfigError when n >= number of heads.
HeadSelection select_heads(std::span<const double> scores, std::size_t n);

// Blends each corrected head's span entries toward the best head's:
// a <- gamma * best + (1 - gamma) * a. With renormalize, each corrected row is
// then divided by its new sum.
void fuse_heads(AttentionSnapshot& snapshot, const HeadSelection& selection, double gamma,
                ImageSpan span, bool renormalize);

// Detection score of a layer; larger means less trustworthy.
double detection_score(const MamVector& mam, const DleafConfig& config);
// Per-head ranking key; larger means better focused.
Vector head_scores(const AttentionSnapshot& snapshot, ImageSpan span, const DleafConfig& config);

struct LayerDecision {
  std::size_t layer = 0;
  double score = 0.0;
  double bas = 0.0;  // after this layer's update
  bool flagged = false;
};

struct HeadCorrection {
  std::size_t layer = 0;
  std::vector<std::size_t> corrected;
  std::size_t best = 0;
  Vector iaf_before;
  Vector iaf_after;
};

struct StepLog {
  std::size_t step = 0;
  std::size_t position = 0;
  std::vector<LayerDecision> decisions;
  std::vector<HeadCorrection> corrections;

  std::vector<std::size_t> flagged_layers() const;
};

struct InterventionLog {
  std::vector<StepLog> steps;
};

// One step of the loop, fed layer by layer.
class DleafStepper {
 public:
  explicit DleafStepper(DleafConfig config);

  void begin(std::size_t step, std::size_t position);
  void process(AttentionSnapshot& snapshot, ImageSpan span);
  StepLog finish();

  const DleafConfig& config() const noexcept { return config_; }

 private:
  DleafConfig config_;
  BasState state_;
  StepLog current_;
};

// Runs the loop over one step's snapshots (layer order), correcting them in
// place. Corrections do not propagate between layers here, since the
// snapshots are fixed recordings.
StepLog apply_dleaf(std::span<AttentionSnapshot> layers, ImageSpan span, const DleafConfig& config,
                    std::size_t step = 0);

class DleafHook : public AttentionHook {
 public:
  explicit DleafHook(DleafConfig config) : stepper_(std::move(config)) {}

  void begin_step(std::size_t position) override;
  void on_attention(AttentionSnapshot& snapshot, ImageSpan span) override;
  void end_step() override;

  const InterventionLog& log() const noexcept { return log_; }
  void clear() { log_.steps.clear(); }

 private:
  DleafStepper stepper_;
  InterventionLog log_;
};

}  // namespace dleaf
