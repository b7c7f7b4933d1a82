// dleaf: runs, sweeps, trace analyses, scoring, DPO check and throughput.
//
// Every subcommand writes its artifacts plus manifest.json into --out-dir
// (default $DLEAF_OUT_DIR, else ./dleaf-out). Reports are byte-identical for
// identical inputs; only the manifest carries wall-clock timestamps.
//
// Exit codes: 0 success, 1 internal or I/O error, 2 validation error.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dleaf/analysis.hpp"
#include "dleaf/config_file.hpp"
#include "dleaf/dpo.hpp"
#include "dleaf/engine.hpp"
#include "dleaf/error.hpp"
#include "dleaf/eval.hpp"
#include "dleaf/model.hpp"
#include "dleaf/planted.hpp"
#include "dleaf/throughput.hpp"
#include "dleaf/trace.hpp"
#include "dleaf/trace_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace dleaf;

namespace {

constexpr const char* kToolVersion = "0.1.0";
constexpr const char* kManifestName = "manifest.json";

struct CommonOptions {
  std::string model_config;
  std::string dleaf_config;
  std::uint64_t seed = 42;
  std::string out_dir;
  bool json_output = false;

  std::optional<double> gamma;
  std::optional<std::size_t> heads;
  std::optional<std::string> window;
  std::optional<double> alpha;
  std::optional<double> beta;
  bool renormalize = false;
  std::optional<std::string> detection_metric;
  std::optional<std::string> head_metric;
  std::optional<std::string> bas_rule;
  bool no_dleaf = false;
};

std::string default_out_dir() {
  const char* env = std::getenv("DLEAF_OUT_DIR");
  return env && *env ? std::string(env) : std::string("dleaf-out");
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void add_common(CLI::App& cmd, CommonOptions& o, bool with_dleaf) {
  cmd.add_option("--model-config", o.model_config, "Model key=value config file");
  cmd.add_option("--seed", o.seed, "Seed for every random choice of the subcommand")->capture_default_str();
  cmd.add_option("--out-dir", o.out_dir, "Output directory (env DLEAF_OUT_DIR, else ./dleaf-out)");
  cmd.add_flag("--json", o.json_output, "Print the report as JSON on stdout");
  if (!with_dleaf) return;
  cmd.add_option("--dleaf-config", o.dleaf_config, "D-LEAF key=value config file");
  cmd.add_option("--gamma", o.gamma, "Fusion weight toward the best head [default: 0.8]");
  cmd.add_option("--heads", o.heads, "Heads corrected per flagged layer [default: 4]");
  cmd.add_option("--window", o.window, "Layer window: A-B (inclusive), all or none [default: 0-25]");
  cmd.add_option("--alpha", o.alpha, "LIAS weight alpha [default: 0.5]");
  cmd.add_option("--beta", o.beta, "IAS weight beta [default: 0.5]");
  cmd.add_flag("--renormalize", o.renormalize, "Renormalize corrected rows to sum 1 [default: off]");
  cmd.add_option("--detection-metric", o.detection_metric, "liae, liaf or lias [default: liae]");
  cmd.add_option("--head-metric", o.head_metric, "iaf, iae or ias [default: iaf]");
  cmd.add_option("--bas-rule", o.bas_rule, "running_min or algorithm_literal [default: running_min]");
  cmd.add_flag("--no-dleaf", o.no_dleaf, "Disable detection and correction");
}

ModelConfig resolve_model(const CommonOptions& o) {
  ModelConfig c = o.model_config.empty() ? ModelConfig{} : read_model_config(o.model_config);
  c.rng_seed = o.seed;
  c.validate();
  return c;
}

DleafConfig resolve_dleaf(const CommonOptions& o) {
  DleafConfig c = o.dleaf_config.empty() ? DleafConfig{} : read_dleaf_config(o.dleaf_config);
  if (o.gamma) c.gamma = *o.gamma;
  if (o.heads) c.heads = *o.heads;
  if (o.window) c.window = parse_window(*o.window);
  if (o.alpha) c.alpha = *o.alpha;
  if (o.beta) c.beta = *o.beta;
  if (o.renormalize) c.renormalize = true;
  if (o.detection_metric) c.detection_metric = parse_detection_metric(*o.detection_metric);
  if (o.head_metric) c.head_metric = parse_head_metric(*o.head_metric);
  if (o.bas_rule) c.bas_rule = parse_bas_rule(*o.bas_rule);
  c.validate();
  return c;
}

// Collects artifacts of one invocation and writes the manifest last.
class Output {
 public:
  Output(const CommonOptions& o, std::string subcommand)
      : dir_(o.out_dir.empty() ? default_out_dir() : o.out_dir), started_(utc_now()) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create " + dir_.string() + ": " + ec.message());
    manifest_["tool"] = "dleaf";
    manifest_["version"] = kToolVersion;
    manifest_["subcommand"] = std::move(subcommand);
    manifest_["output_dir"] = dir_.string();
    manifest_["seed"] = o.seed;
    manifest_["config_paths"] = {{"model", o.model_config}, {"dleaf", o.dleaf_config}};
  }

  const fs::path& dir() const { return dir_; }
  json& parameters() { return manifest_["parameters"]; }

  fs::path artifact(const std::string& name) {
    manifest_["artifacts"].push_back(name);
    return dir_ / name;
  }

  void write_json(const std::string& name, json body) {
    body["manifest"] = kManifestName;
    std::ofstream out(artifact(name));
    if (!out) throw IoError("cannot write " + (dir_ / name).string());
    out << body.dump(2) << "\n";
  }

  void finish() {
    manifest_["started_at"] = started_;
    manifest_["finished_at"] = utc_now();
    std::ofstream out(dir_ / kManifestName);
    if (!out) throw IoError("cannot write manifest in " + dir_.string());
    out << manifest_.dump(2) << "\n";
  }

 private:
  fs::path dir_;
  std::string started_;
  json manifest_;
};

std::vector<std::size_t> parse_id_list(const std::string& s) {
  std::vector<std::size_t> ids;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      ids.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("bad token id '" + item + "' in --prompt");
    }
  }
  if (ids.empty()) throw ConfigError("--prompt is empty");
  return ids;
}

std::vector<std::size_t> default_prompt(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> token(0, c.vocab_size - 1);
  std::vector<std::size_t> ids(c.image_span.end + 4);
  for (auto& id : ids) id = token(rng);
  return ids;
}

json planted_summary(const PlantedOutcome& out) {
  return {{"hallucinated_before", out.hallucinated_before},
          {"hallucinated_after", out.hallucinated_after},
          {"reduction", out.hallucinated_before
                            ? relative_reduction(static_cast<double>(out.hallucinated_before),
                                                 static_cast<double>(out.hallucinated_after))
                            : 0.0},
          {"flagged_true_positive_layers", out.true_positive_layers},
          {"flagged_false_positive_layers", out.false_positive_layers},
          {"missed_planted_layers", out.false_negative_layers},
          {"detection_precision", out.detection_precision()},
          {"detection_recall", out.detection_recall()}};
}

void print(const CommonOptions& o, const json& report, const std::string& text) {
  if (o.json_output) {
    std::cout << report.dump(2) << "\n";
  } else {
    std::cout << text;
  }
}

// --- run --------------------------------------------------------------------

struct RunOptions {
  bool planted = false;
  std::size_t steps = 500;
  std::string prompt;
  std::optional<std::size_t> max_new_tokens;
};

std::optional<DleafConfig> active_config(const CommonOptions& o, const DleafConfig& c) {
  if (o.no_dleaf) return std::nullopt;
  return c;
}

json planted_parameters(const RunOptions& r) {
  return {{"mode", "planted"}, {"steps", r.steps}};
}

int cmd_run_planted(const CommonOptions& o, const RunOptions& r) {
  const DleafConfig dc = resolve_dleaf(o);
  PlantedOptions po;
  po.steps = r.steps;
  const SyntheticScene scene;
  const PlantedTask task = planted_task(scene, o.seed, po);
  const PlantedOutcome outcome = evaluate_planted(task, active_config(o, dc));

  Output out(o, "run");
  out.parameters() = planted_parameters(r);
  out.parameters()["dleaf_enabled"] = !o.no_dleaf;
  out.parameters()["dleaf"] = to_json(dc);
  write_trace(out.artifact("trace.ndjson"), task.traces.header, task.traces.records);
  write_intervention_log(out.artifact("intervention.ndjson"), outcome.log);

  json report;
  report["mode"] = "planted";
  report["steps"] = r.steps;
  report["dleaf_enabled"] = !o.no_dleaf;
  report["result"] = planted_summary(outcome);
  out.write_json("report.json", report);
  out.finish();

  std::ostringstream text;
  text << "planted run: " << r.steps << " steps\n"
       << "  hallucinated before: " << outcome.hallucinated_before << "\n"
       << "  hallucinated after:  " << outcome.hallucinated_after << "\n"
       << "  detection precision: " << outcome.detection_precision() << "\n"
       << "  detection recall:    " << outcome.detection_recall() << "\n"
       << "  artifacts in " << out.dir().string() << "\n";
  print(o, report, text.str());
  return 0;
}

int cmd_run_model(const CommonOptions& o, const RunOptions& r) {
  const ModelConfig mc = resolve_model(o);
  const DleafConfig dc = resolve_dleaf(o);
  if (!o.no_dleaf) dc.validate_for(mc.num_layers, mc.num_heads);
  const Model model = Model::init(mc);

  TokenSequence prompt{r.prompt.empty() ? default_prompt(mc, o.seed) : parse_id_list(r.prompt),
                       mc.image_span};
  DleafHook hook(dc);
  DecodeOptions opts;
  opts.max_new_tokens = r.max_new_tokens;
  const DecodeResult result = greedy_decode(model, prompt, o.no_dleaf ? nullptr : &hook, opts);

  Output out(o, "run");
  out.parameters() = {{"mode", "model"},
                      {"prompt", prompt.token_ids},
                      {"max_new_tokens", r.max_new_tokens ? *r.max_new_tokens : mc.max_new_tokens},
                      {"dleaf_enabled", !o.no_dleaf},
                      {"model", to_json(mc)},
                      {"dleaf", to_json(dc)}};

  std::vector<TraceRecord> records;
  for (std::size_t i = 0; i < result.steps.size(); ++i) {
    records.push_back(make_record(result.steps[i], mc.image_span, i, result.tokens[i]));
  }
  write_trace(out.artifact("trace.ndjson"), make_header(mc, mc.image_span, "model:seed=" + std::to_string(o.seed)),
              records);
  write_intervention_log(out.artifact("intervention.ndjson"), hook.log());

  std::size_t flagged = 0;
  for (const auto& step : hook.log().steps) flagged += step.flagged_layers().size();
  json report;
  report["mode"] = "model";
  report["dleaf_enabled"] = !o.no_dleaf;
  report["prompt"] = prompt.token_ids;
  report["tokens"] = result.tokens;
  report["flagged_layers_total"] = flagged;
  out.write_json("tokens.json", {{"tokens", result.tokens}});
  out.write_json("report.json", report);
  out.finish();

  std::ostringstream text;
  text << "generated:";
  for (auto t : result.tokens) text << " " << t;
  text << "\nflagged layers: " << flagged << "\nartifacts in " << out.dir().string() << "\n";
  print(o, report, text.str());
  return 0;
}

// --- sweep ------------------------------------------------------------------

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) parts.push_back(item);
  }
  return parts;
}

double parse_number(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("bad grid value '" + s + "'");
}

DleafConfig with_axis(DleafConfig c, const std::string& axis, const std::string& value) {
  if (axis == "gamma") c.gamma = parse_number(value);
  else if (axis == "heads") c.heads = static_cast<std::size_t>(parse_number(value));
  else if (axis == "window") c.window = parse_window(value);
  else if (axis == "alpha") c.alpha = parse_number(value);
  else if (axis == "beta") c.beta = parse_number(value);
  else throw ConfigError("unknown sweep axis '" + axis + "'");
  if (axis == "heads" && static_cast<double>(c.heads) != parse_number(value)) {
    throw ConfigError("heads must be a non-negative integer, got '" + value + "'");
  }
  c.validate();
  return c;
}

int cmd_sweep(const CommonOptions& o, const std::string& axis, const std::string& grid, std::size_t steps) {
  const DleafConfig base = resolve_dleaf(o);
  const auto values = split(grid, axis == "window" ? ';' : ',');
  if (values.empty()) throw ConfigError("--grid is empty");
  std::vector<DleafConfig> configs;
  for (const auto& v : values) configs.push_back(with_axis(base, axis, v));

  PlantedOptions po;
  po.steps = steps;
  const PlantedTask task = planted_task(SyntheticScene{}, o.seed, po);

  // Grid points run in order; each evaluation is itself parallel over steps.
  std::vector<PlantedOutcome> outcomes;
  for (const auto& c : configs) outcomes.push_back(evaluate_planted(task, active_config(o, c)));

  Output out(o, "sweep");
  out.parameters() = {{"mode", "planted"}, {"steps", steps}, {"axis", axis}, {"grid", values},
                      {"dleaf_enabled", !o.no_dleaf}, {"dleaf", to_json(base)}};

  json rows = json::array();
  std::ostringstream tsv;
  tsv << axis << "\thallucinated_before\thallucinated_after\tdetection_precision\tdetection_recall\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    json row = planted_summary(outcomes[i]);
    row["index"] = i;
    row["value"] = values[i];
    rows.push_back(row);
    tsv << values[i] << "\t" << outcomes[i].hallucinated_before << "\t" << outcomes[i].hallucinated_after
        << "\t" << outcomes[i].detection_precision() << "\t" << outcomes[i].detection_recall() << "\n";
  }
  {
    std::ofstream f(out.artifact("sweep.tsv"));
    if (!f) throw IoError("cannot write sweep.tsv");
    f << tsv.str();
  }
  json report{{"axis", axis}, {"steps", steps}, {"rows", rows}};
  out.write_json("report.json", report);
  out.finish();
  print(o, report, tsv.str());
  return 0;
}

// --- analyze ----------------------------------------------------------------

int cmd_analyze(const CommonOptions& o, const std::string& trace_path, const std::string& labels,
                std::size_t top_k) {
  TraceSet traces = read_trace(trace_path);
  json label_join = nullptr;
  if (!labels.empty()) {
    const LabelJoin join = attach_labels(traces.records, labels);
    label_join = {{"matched", join.matched}, {"unlabeled", join.unlabeled},
                  {"orphan_labels", join.orphan_labels}};
  }
  const AnalysisReport report = analyze_traces(traces, top_k);

  Output out(o, "analyze");
  out.parameters() = {{"trace", trace_path}, {"labels", labels}, {"top_k", top_k}};
  json body = to_json(report);
  body["trace"] = trace_path;
  body["label_join"] = label_join;
  out.write_json("analysis.json", body);
  out.finish();

  std::ostringstream text;
  text << "records: " << report.records << " (real " << report.real << ", hallucinated "
       << report.hallucinated << ", unlabeled " << report.unlabeled << ")\n";
  if (report.attention_test) {
    text << "attention real vs hallucinated: W = " << report.attention_test->test.statistic
         << ", p = " << report.attention_test->test.p_value << " (" << report.attention_test->test.method
         << ")\n"
         << "entropy real vs hallucinated:   W = " << report.entropy_test->test.statistic
         << ", p = " << report.entropy_test->test.p_value << " (" << report.entropy_test->test.method << ")\n"
         << "LIAE real vs hallucinated:      W = " << report.liae_test->test.statistic
         << ", p = " << report.liae_test->test.p_value << " (" << report.liae_test->test.method << ")\n";
  } else {
    text << "label tests skipped: need both real and hallucinated records\n";
  }
  text << "spearman rho liae/liaf: " << report.liae_liaf.rho << "\n"
       << "spearman rho iae/iaf:   " << report.iae_iaf.rho << "\n";
  print(o, body, text.str());
  return 0;
}

// --- score ------------------------------------------------------------------

int cmd_score_chair(const CommonOptions& o, const std::string& annotations, const std::string& synonyms,
                    std::optional<double> baseline) {
  const auto corpus = read_annotations(annotations);
  const SynonymMap syn = synonyms.empty() ? SynonymMap{} : read_synonyms(synonyms);
  const ChairResult r = chair_scores(corpus, syn);

  Output out(o, "score");
  out.parameters() = {{"metric", "chair"}, {"annotations", annotations}, {"synonyms", synonyms}};
  json report{{"metric", "chair"},
              {"chair_s", r.chair_s},
              {"chair_i", r.chair_i},
              {"captions", r.captions},
              {"hallucinated_captions", r.hallucinated_captions},
              {"mentioned_objects", r.mentioned_objects},
              {"hallucinated_objects", r.hallucinated_objects},
              {"zero_mentions", r.zero_mentions}};
  if (baseline) {
    out.parameters()["baseline_chair_s"] = *baseline;
    report["baseline_chair_s"] = *baseline;
    report["relative_reduction"] = relative_reduction(*baseline, r.chair_s);
  }
  out.write_json("score.json", report);
  out.finish();

  std::ostringstream text;
  text << "CHAIR_S " << r.chair_s << "  CHAIR_I " << r.chair_i << "  (" << r.captions << " captions)\n";
  print(o, report, text.str());
  return 0;
}

int cmd_score_pope(const CommonOptions& o, const std::string& items_path) {
  const auto items = read_pope_items(items_path);
  const PopeResult r = pope_score(items);

  Output out(o, "score");
  out.parameters() = {{"metric", "pope"}, {"items", items_path}};
  json report{{"metric", "pope"},
              {"accuracy", r.accuracy},
              {"precision", r.precision},
              {"recall", r.recall},
              {"f1", r.f1},
              {"confusion",
               {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"fn", r.confusion.fn}, {"tn", r.confusion.tn}}}};
  out.write_json("score.json", report);
  out.finish();

  std::ostringstream text;
  text << "accuracy " << r.accuracy << "  precision " << r.precision << "  recall " << r.recall << "  F1 "
       << r.f1 << "\n";
  print(o, report, text.str());
  return 0;
}

// --- dpo-check --------------------------------------------------------------

int cmd_dpo_check(const CommonOptions& o, dpo::DpoCheckOptions d) {
  d.seed = o.seed;
  const dpo::DpoCheckReport r = dpo::run_dpo_check(d);

  Output out(o, "dpo-check");
  out.parameters() = {{"instances", d.instances}, {"dim", d.dim}, {"vocab", d.vocab}, {"pairs", d.pairs},
                      {"beta", d.beta}, {"fd_eps", d.fd_eps}, {"gamma_grid", d.gamma_grid}};
  json report{{"max_init_loss_error", r.max_init_loss_error},
              {"max_fd_relative_error", r.max_fd_relative_error},
              {"max_shared_ratio_error", r.max_shared_ratio_error},
              {"mean_distinct_discrepancy", r.mean_distinct_discrepancy},
              {"gamma_grid", d.gamma_grid},
              {"feature_gap", r.feature_gap},
              {"checks",
               {{"init_loss", r.loss_ok},
                {"gradient", r.gradient_ok},
                {"shared_context_ratio", r.ratio_ok},
                {"feature_gap_monotone", r.feature_gap_monotone}}},
              {"passed", r.passed()}};
  out.write_json("dpo_check.json", report);
  out.finish();

  std::ostringstream text;
  text << "loss at init:         " << (r.loss_ok ? "ok" : "FAIL") << " (max error " << r.max_init_loss_error
       << ")\n"
       << "gradient vs FD:       " << (r.gradient_ok ? "ok" : "FAIL") << " (max rel error "
       << r.max_fd_relative_error << ")\n"
       << "shared-context ratio: " << (r.ratio_ok ? "ok" : "FAIL") << " (max error "
       << r.max_shared_ratio_error << ")\n"
       << "feature gap monotone: " << (r.feature_gap_monotone ? "ok" : "FAIL") << "\n";
  print(o, report, text.str());
  return r.passed() ? 0 : 2;
}

// --- throughput -------------------------------------------------------------

int cmd_throughput(const CommonOptions& o, std::size_t tokens, std::size_t reps) {
  ModelConfig mc = resolve_model(o);
  mc.end_token.reset();
  const DleafConfig dc = resolve_dleaf(o);
  dc.validate_for(mc.num_layers, mc.num_heads);
  const std::vector<std::size_t> ids = default_prompt(mc, o.seed);
  mc.max_positions = std::max(mc.max_positions, ids.size() + tokens);
  const Model model = Model::init(mc);
  const TokenSequence prompt{ids, mc.image_span};

  const ThroughputComparison cmp = measure_hook_overhead(model, prompt, dc, tokens, reps);

  Output out(o, "throughput");
  out.parameters() = {{"tokens", tokens}, {"repetitions", reps}, {"model", to_json(mc)}, {"dleaf", to_json(dc)}};
  json report{{"tokens_per_run", cmp.baseline.tokens_per_run},
              {"baseline_tps", cmp.baseline.tokens_per_second},
              {"dleaf_tps", cmp.candidate.tokens_per_second},
              {"baseline_median_tps", cmp.baseline.median},
              {"dleaf_median_tps", cmp.candidate.median},
              {"overhead", cmp.overhead}};
  out.write_json("throughput.json", report);
  out.finish();

  std::ostringstream text;
  text << std::fixed << std::setprecision(1) << "config      median tok/s\n"
       << "baseline    " << cmp.baseline.median << "\n"
       << "d-leaf      " << cmp.candidate.median << "\n"
       << std::setprecision(2) << "overhead    " << 100.0 * cmp.overhead << "%\n";
  print(o, report, text.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Detect-and-correct attention lab: runs, sweeps, analyses and checks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  CommonOptions common;
  RunOptions run_opts;
  auto* run = app.add_subcommand("run", "Decode with the toy model, or score the planted task");
  add_common(*run, common, true);
  run->add_flag("--planted", run_opts.planted, "Run on the planted synthetic task");
  run->add_option("--steps", run_opts.steps, "Planted task steps")->capture_default_str();
  run->add_option("--prompt", run_opts.prompt, "Comma-separated prompt token ids (default: seeded)");
  run->add_option("--max-new-tokens", run_opts.max_new_tokens, "Override the model's max_new_tokens");

  std::string axis, grid;
  std::size_t sweep_steps = 500;
  auto* sweep = app.add_subcommand("sweep", "Sweep one D-LEAF parameter on the planted task");
  add_common(*sweep, common, true);
  sweep->add_option("--axis", axis, "gamma, heads, window, alpha or beta")
      ->required()
      ->check(CLI::IsMember({"gamma", "heads", "window", "alpha", "beta"}));
  sweep->add_option("--grid", grid, "Comma-separated values (';'-separated for window)")->required();
  sweep->add_option("--steps", sweep_steps, "Planted task steps")->capture_default_str();

  std::string trace_path, label_path;
  std::size_t top_k = 32;
  auto* analyze = app.add_subcommand("analyze", "Statistics over a DLEAF-TRACE file");
  add_common(*analyze, common, false);
  analyze->add_option("trace", trace_path, "Trace file")->required();
  analyze->add_option("--labels", label_path, "NDJSON label file joined on step");
  analyze->add_option("--top-k", top_k, "Weakest (layer, head) pairs in the histogram")->capture_default_str();

  auto* score = app.add_subcommand("score", "Object-hallucination scores");
  score->require_subcommand(1);
  std::string annotations, synonyms, pope_items;
  std::optional<double> baseline;
  auto* chair = score->add_subcommand("chair", "CHAIR_S and CHAIR_I over caption annotations");
  add_common(*chair, common, false);
  chair->add_option("--annotations", annotations, "NDJSON caption annotations")->required();
  chair->add_option("--synonyms", synonyms, "JSON synonym map");
  chair->add_option("--baseline-chair-s", baseline, "Report relative reduction against this CHAIR_S");
  auto* pope = score->add_subcommand("pope", "POPE accuracy, precision, recall and F1");
  add_common(*pope, common, false);
  pope->add_option("--items", pope_items, "NDJSON probe answers")->required();

  dpo::DpoCheckOptions dpo_opts;
  auto* dpo_cmd = app.add_subcommand("dpo-check", "Verify the DPO gradient identity numerically");
  add_common(*dpo_cmd, common, false);
  dpo_cmd->add_option("--instances", dpo_opts.instances, "Random instances")->capture_default_str();
  dpo_cmd->add_option("--dim", dpo_opts.dim, "Embedding dimension")->capture_default_str();
  dpo_cmd->add_option("--vocab", dpo_opts.vocab, "Vocabulary size")->capture_default_str();
  dpo_cmd->add_option("--pairs", dpo_opts.pairs, "Preference pairs per instance")->capture_default_str();
  dpo_cmd->add_option("--dpo-beta", dpo_opts.beta, "DPO temperature")->capture_default_str();

  std::size_t tp_tokens = 128, tp_reps = kMinRepetitions;
  auto* throughput = app.add_subcommand("throughput", "Tokens per second with and without D-LEAF");
  add_common(*throughput, common, true);
  throughput->add_option("--tokens", tp_tokens, "Tokens decoded per run")->capture_default_str();
  throughput->add_option("--repetitions", tp_reps, "Measured runs per configuration")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*run) return run_opts.planted ? cmd_run_planted(common, run_opts) : cmd_run_model(common, run_opts);
    if (*sweep) return cmd_sweep(common, axis, grid, sweep_steps);
    if (*analyze) return cmd_analyze(common, trace_path, label_path, top_k);
    if (*chair) return cmd_score_chair(common, annotations, synonyms, baseline);
    if (*pope) return cmd_score_pope(common, pope_items);
    if (*dpo_cmd) return cmd_dpo_check(common, dpo_opts);
    if (*throughput) return cmd_throughput(common, tp_tokens, tp_reps);
  } catch (const Error& e) {
    std::cerr << "dleaf: " << e.what() << "\n";
    return e.is_validation() ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "dleaf: internal error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
