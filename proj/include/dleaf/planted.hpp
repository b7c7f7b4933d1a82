#pragma once

// Synthetic closed-loop task with a known hallucination oracle.
//
// Every step gets one attention snapshot per layer. In ordinary layers all
// heads share one image-attention shape softmax(s_l * z) whose sharpness s_l
// grows with depth, so the layer entropy falls strictly from layer to layer,
// and every head keeps image mass above tau. A hallucination-prone step has a
// few planted layers inside `planting_window` where heads attend near
// uniformly: one strong head keeps high image mass, the others drop well
// below tau. The oracle calls a step hallucinated when some layer's mean
// per-head image mass is below tau.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "dleaf/engine.hpp"
#include "dleaf/trace.hpp"

namespace dleaf {

struct SyntheticScene {
  std::vector<std::size_t> present_objects{40, 45, 50};
  std::size_t num_image_tokens = 16;
  double tau = 0.4;
};

struct PlantedOptions {
  std::size_t steps = 500;
  std::size_t num_layers = 32;
  std::size_t num_heads = 8;
  std::size_t text_keys = 8;
  std::size_t vocab_size = 64;
  std::size_t object_vocab_begin = 32;  // ids [begin, vocab_size) name objects
  double prone_fraction = 0.4;
  std::size_t max_planted_layers = 3;
  LayerWindow planting_window = LayerWindow::range(1, 25);
};

struct PlantedTask {
  SyntheticScene scene;
  PlantedOptions options;
  TraceSet traces;  // labels are the no-intervention oracle
  std::vector<std::vector<std::size_t>> planted_layers;  // per record, ascending
};

// Deterministic in (scene, options, seed).
PlantedTask planted_task(const SyntheticScene& scene, std::uint64_t seed,
                         const PlantedOptions& options = {});

// Mean over heads of the image mass of each layer, then the minimum over layers.
double step_image_mass(std::span<const AttentionSnapshot> layers, ImageSpan span);

struct PlantedOutcome {
  std::size_t hallucinated_before = 0;
  std::size_t hallucinated_after = 0;
  std::vector<bool> after;  // per record
  std::size_t true_positive_layers = 0;
  std::size_t false_positive_layers = 0;
  std::size_t false_negative_layers = 0;
  InterventionLog log;

  double detection_precision() const;
  double detection_recall() const;
};

// Scores the task without intervention (nullopt) or after running the
// detect-and-correct loop on every step.
PlantedOutcome evaluate_planted(const PlantedTask& task, const std::optional<DleafConfig>& config);

}  // namespace dleaf
