#include "dleaf/planted.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dleaf/error.hpp"
#include "dleaf/kernels.hpp"

namespace dleaf {

namespace {

constexpr double kSharpnessFirst = 1.5;
constexpr double kSharpnessLast = 4.0;
constexpr double kDiffuseSharpness = 0.15;

Vector softmax_scaled(const Vector& z, double scale) {
  Vector p(z.size());
  double peak = z[0] * scale;
  for (double v : z) peak = std::max(peak, v * scale);
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] * scale - peak);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

void validate(const SyntheticScene& scene, const PlantedOptions& opt) {
  if (scene.present_objects.empty()) throw ConfigError("scene needs at least one present object");
  if (scene.num_image_tokens < 2) throw ConfigError("scene needs at least two image tokens");
  if (opt.num_layers < 2 || opt.num_heads < 2) throw ConfigError("planted task needs L, H >= 2");
  if (opt.object_vocab_begin >= opt.vocab_size) throw ConfigError("empty object vocabulary");
  for (std::size_t obj : scene.present_objects) {
    if (obj < opt.object_vocab_begin || obj >= opt.vocab_size) {
      throw ConfigError("present object " + std::to_string(obj) + " outside the object vocabulary");
    }
  }
  if (!(opt.prone_fraction >= 0.0 && opt.prone_fraction <= 1.0)) {
    throw ConfigError("prone_fraction must lie in [0, 1]");
  }
  if (opt.max_planted_layers == 0) throw ConfigError("max_planted_layers must be positive");
  if (opt.planting_window.kind != LayerWindow::Kind::range ||
      opt.planting_window.last >= opt.num_layers) {
    throw ConfigError("planting window must be a range inside the model");
  }
}

}  // namespace

PlantedTask planted_task(const SyntheticScene& scene, std::uint64_t seed, const PlantedOptions& options) {
  validate(scene, options);
  PlantedTask task{scene, options, {}, {}};
  const std::size_t L = options.num_layers, H = options.num_heads, N = scene.num_image_tokens;

  TraceHeader& header = task.traces.header;
  header.num_layers = L;
  header.num_heads = H;
  header.num_image_tokens = N;
  header.vocab_size = options.vocab_size;
  header.source = "planted:seed=" + std::to_string(seed);
  header.image_span = {options.text_keys / 2, options.text_keys / 2 + N};

  std::vector<std::size_t> absent;
  for (std::size_t id = options.object_vocab_begin; id < options.vocab_size; ++id) {
    if (std::find(scene.present_objects.begin(), scene.present_objects.end(), id) ==
        scene.present_objects.end()) {
      absent.push_back(id);
    }
  }
  if (absent.empty()) absent = scene.present_objects;

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(options.steps);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const auto prone_count =
      static_cast<std::size_t>(std::llround(options.prone_fraction * static_cast<double>(options.steps)));
  std::vector<bool> prone(options.steps, false);
  for (std::size_t i = 0; i < prone_count; ++i) prone[order[i]] = true;

  const std::size_t first = options.planting_window.first, last = options.planting_window.last;
  const std::size_t first_plantable = std::max<std::size_t>(first, 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (std::size_t s = 0; s < options.steps; ++s) {
    std::vector<std::size_t> planted;
    if (prone[s] && last >= first_plantable) {
      const std::size_t span_layers = last - first_plantable + 1;
      const std::size_t count = 1 + static_cast<std::size_t>(unit(rng) * static_cast<double>(
                                        std::min(options.max_planted_layers, span_layers)));
      std::vector<std::size_t> pool(span_layers);
      std::iota(pool.begin(), pool.end(), first_plantable);
      std::shuffle(pool.begin(), pool.end(), rng);
      planted.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(
                                                       std::min(count, span_layers)));
      std::sort(planted.begin(), planted.end());
    }

    Vector z(N);
    for (double& v : z) v = normal(rng);

    TraceRecord rec;
    rec.step = s;
    rec.row_sums = Matrix(L, H, 1.0);
    for (std::size_t l = 0; l < L; ++l) {
      Matrix slice(H, N);
      const bool anomalous = std::binary_search(planted.begin(), planted.end(), l);
      if (!anomalous) {
        const double sharp =
            kSharpnessFirst + (kSharpnessLast - kSharpnessFirst) * static_cast<double>(l) /
                                  static_cast<double>(L - 1);
        const Vector shape = softmax_scaled(z, sharp);
        for (std::size_t h = 0; h < H; ++h) {
          const double mass = 0.5 + 0.4 * unit(rng);
          for (std::size_t n = 0; n < N; ++n) slice(h, n) = mass * shape[n];
        }
      } else {
        const std::size_t strong = static_cast<std::size_t>(unit(rng) * static_cast<double>(H)) % H;
        for (std::size_t h = 0; h < H; ++h) {
          const double mass = h == strong ? 0.75 + 0.2 * unit(rng) : 0.05 + 0.2 * unit(rng);
          Vector noise(N);
          for (double& v : noise) v = normal(rng);
          const Vector shape = softmax_scaled(noise, kDiffuseSharpness);
          for (std::size_t n = 0; n < N; ++n) slice(h, n) = mass * shape[n];
        }
      }
      rec.attention.push_back(std::move(slice));
    }

    const auto snapshots = to_snapshots(rec);
    const bool hallucinated = step_image_mass(snapshots, record_span(rec)) < scene.tau;
    rec.label = hallucinated ? Label::hallucinated : Label::real;
    const auto& pool = prone[s] ? absent : scene.present_objects;
    rec.token_id = pool[s % pool.size()];
    rec.token = "obj" + std::to_string(rec.token_id);
    task.traces.records.push_back(std::move(rec));
    task.planted_layers.push_back(std::move(planted));
  }
  return task;
}

double step_image_mass(std::span<const AttentionSnapshot> layers, ImageSpan span) {
  double lowest = std::numeric_limits<double>::infinity();
  for (const auto& snap : layers) {
    double mass = 0.0;
    for (std::size_t h = 0; h < snap.num_heads(); ++h) mass += iaf(snap, h, span);
    lowest = std::min(lowest, mass / static_cast<double>(snap.num_heads()));
  }
  return lowest;
}

double PlantedOutcome::detection_precision() const {
  const std::size_t flagged = true_positive_layers + false_positive_layers;
  return flagged == 0 ? 0.0 : static_cast<double>(true_positive_layers) / static_cast<double>(flagged);
}

double PlantedOutcome::detection_recall() const {
  const std::size_t planted = true_positive_layers + false_negative_layers;
  return planted == 0 ? 0.0 : static_cast<double>(true_positive_layers) / static_cast<double>(planted);
}

PlantedOutcome evaluate_planted(const PlantedTask& task, const std::optional<DleafConfig>& config) {
  if (config) config->validate_for(task.options.num_layers, task.options.num_heads);
  const auto& records = task.traces.records;
  const std::size_t count = records.size();

  struct PerStep {
    bool before = false, after = false;
    std::size_t tp = 0, fp = 0, fn = 0;
    StepLog log;
  };
  std::vector<PerStep> per(count);

  kernels::parallel_for(count, [&](std::size_t r) {
    const TraceRecord& rec = records[r];
    auto snapshots = to_snapshots(rec);
    const ImageSpan span = record_span(rec);
    PerStep& out = per[r];
    out.before = step_image_mass(snapshots, span) < task.scene.tau;
    if (!config) {
      out.after = out.before;
      return;
    }
    out.log = apply_dleaf(snapshots, span, *config, rec.step);
    out.after = step_image_mass(snapshots, span) < task.scene.tau;
    const auto flagged = out.log.flagged_layers();
    const auto& planted = task.planted_layers[r];
    for (std::size_t l : flagged) {
      (std::binary_search(planted.begin(), planted.end(), l) ? out.tp : out.fp) += 1;
    }
    for (std::size_t l : planted) {
      if (!std::binary_search(flagged.begin(), flagged.end(), l)) ++out.fn;
    }
  });

  PlantedOutcome outcome;
  outcome.after.reserve(count);
  for (auto& p : per) {
    outcome.hallucinated_before += p.before;
    outcome.hallucinated_after += p.after;
    outcome.after.push_back(p.after);
    outcome.true_positive_layers += p.tp;
    outcome.false_positive_layers += p.fp;
    outcome.false_negative_layers += p.fn;
    if (config) outcome.log.steps.push_back(std::move(p.log));
  }
  return outcome;
}

}  // namespace dleaf
