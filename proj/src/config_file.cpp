#include "dleaf/config_file.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "dleaf/error.hpp"

namespace dleaf {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void fail(std::size_t line, const std::string& msg) {
  throw ConfigError("line " + std::to_string(line) + ": " + msg);
}

std::size_t to_size(const std::string& v, std::size_t line) {
  std::size_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) fail(line, "expected a non-negative integer, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& v, std::size_t line) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) fail(line, "expected a non-negative integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& v, std::size_t line) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    fail(line, "expected a number, got '" + v + "'");
  }
  if (used != v.size()) fail(line, "expected a number, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& v, std::size_t line) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(line, "expected true or false, got '" + v + "'");
}

ImageSpan to_span(const std::string& v, std::size_t line) {
  const auto dash = v.find('-');
  if (dash == std::string::npos) fail(line, "expected BEGIN-END, got '" + v + "'");
  return {to_size(trim(v.substr(0, dash)), line), to_size(trim(v.substr(dash + 1)), line)};
}

template <typename Parse>
auto wrap(const std::string& v, std::size_t line, Parse parse) {
  try {
    return parse(v);
  } catch (const Error& e) {
    fail(line, e.what());
  }
}

using Setter = std::function<void(const std::string&, std::size_t)>;

void apply(const KeyValues& kv, const std::map<std::string, Setter>& setters, const char* what) {
  for (const auto& [key, entry] : kv) {
    const auto it = setters.find(key);
    if (it == setters.end()) fail(entry.second, std::string("unknown ") + what + " key '" + key + "'");
    it->second(entry.first, entry.second);
  }
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

KeyValues parse_key_values(std::istream& in) {
  KeyValues kv;
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string text = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) fail(line, "expected key = value");
    const std::string key = trim(text.substr(0, eq));
    const std::string value = trim(text.substr(eq + 1));
    if (key.empty()) fail(line, "missing key");
    if (value.empty()) fail(line, "missing value for '" + key + "'");
    if (!kv.emplace(key, std::make_pair(value, line)).second) fail(line, "duplicate key '" + key + "'");
  }
  return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return parse_key_values(in);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

ModelConfig model_config_from(const KeyValues& kv) {
  ModelConfig c;
  const std::map<std::string, Setter> setters{
      {"num_layers", [&](auto& v, auto l) { c.num_layers = to_size(v, l); }},
      {"num_heads", [&](auto& v, auto l) { c.num_heads = to_size(v, l); }},
      {"model_dim", [&](auto& v, auto l) { c.model_dim = to_size(v, l); }},
      {"ffn_dim", [&](auto& v, auto l) { c.ffn_dim = to_size(v, l); }},
      {"vocab_size", [&](auto& v, auto l) { c.vocab_size = to_size(v, l); }},
      {"max_positions", [&](auto& v, auto l) { c.max_positions = to_size(v, l); }},
      {"image_span", [&](auto& v, auto l) { c.image_span = to_span(v, l); }},
      {"max_new_tokens", [&](auto& v, auto l) { c.max_new_tokens = to_size(v, l); }},
      {"seed", [&](auto& v, auto l) { c.rng_seed = to_u64(v, l); }},
      {"init_scale", [&](auto& v, auto l) { c.init_scale = to_double(v, l); }},
      {"end_token",
       [&](auto& v, auto l) {
         if (v == "none") c.end_token.reset();
         else c.end_token = to_size(v, l);
       }},
      {"layer_norm_eps", [&](auto& v, auto l) { c.layer_norm_eps = to_double(v, l); }},
  };
  apply(kv, setters, "model");
  c.validate();
  return c;
}

DleafConfig dleaf_config_from(const KeyValues& kv) {
  DleafConfig c;
  const std::map<std::string, Setter> setters{
      {"gamma", [&](auto& v, auto l) { c.gamma = to_double(v, l); }},
      {"heads", [&](auto& v, auto l) { c.heads = to_size(v, l); }},
      {"window", [&](auto& v, auto l) { c.window = wrap(v, l, parse_window); }},
      {"detection_metric",
       [&](auto& v, auto l) { c.detection_metric = wrap(v, l, parse_detection_metric); }},
      {"head_metric", [&](auto& v, auto l) { c.head_metric = wrap(v, l, parse_head_metric); }},
      {"alpha", [&](auto& v, auto l) { c.alpha = to_double(v, l); }},
      {"beta", [&](auto& v, auto l) { c.beta = to_double(v, l); }},
      {"renormalize", [&](auto& v, auto l) { c.renormalize = to_bool(v, l); }},
      {"bas_rule", [&](auto& v, auto l) { c.bas_rule = wrap(v, l, parse_bas_rule); }},
  };
  apply(kv, setters, "dleaf");
  c.validate();
  return c;
}

ModelConfig read_model_config(const std::filesystem::path& path) {
  const KeyValues kv = read_key_values(path);
  try {
    return model_config_from(kv);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

DleafConfig read_dleaf_config(const std::filesystem::path& path) {
  const KeyValues kv = read_key_values(path);
  try {
    return dleaf_config_from(kv);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string to_config_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "num_layers = " << c.num_layers << "\n"
     << "num_heads = " << c.num_heads << "\n"
     << "model_dim = " << c.model_dim << "\n"
     << "ffn_dim = " << c.ffn_dim << "\n"
     << "vocab_size = " << c.vocab_size << "\n"
     << "max_positions = " << c.max_positions << "\n"
     << "image_span = " << c.image_span.begin << "-" << c.image_span.end << "\n"
     << "max_new_tokens = " << c.max_new_tokens << "\n"
     << "seed = " << c.rng_seed << "\n"
     << "init_scale = " << fmt_double(c.init_scale) << "\n"
     << "end_token = " << (c.end_token ? std::to_string(*c.end_token) : std::string("none")) << "\n"
     << "layer_norm_eps = " << fmt_double(c.layer_norm_eps) << "\n";
  return os.str();
}

std::string to_config_text(const DleafConfig& c) {
  std::ostringstream os;
  os << "gamma = " << fmt_double(c.gamma) << "\n"
     << "heads = " << c.heads << "\n"
     << "window = " << to_string(c.window) << "\n"
     << "detection_metric = " << to_string(c.detection_metric) << "\n"
     << "head_metric = " << to_string(c.head_metric) << "\n"
     << "alpha = " << fmt_double(c.alpha) << "\n"
     << "beta = " << fmt_double(c.beta) << "\n"
     << "renormalize = " << (c.renormalize ? "true" : "false") << "\n"
     << "bas_rule = " << to_string(c.bas_rule) << "\n";
  return os.str();
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["num_layers"] = c.num_layers;
  j["num_heads"] = c.num_heads;
  j["model_dim"] = c.model_dim;
  j["ffn_dim"] = c.ffn_dim;
  j["vocab_size"] = c.vocab_size;
  j["max_positions"] = c.max_positions;
  j["image_span"] = {c.image_span.begin, c.image_span.end};
  j["max_new_tokens"] = c.max_new_tokens;
  j["seed"] = c.rng_seed;
  j["init_scale"] = c.init_scale;
  j["end_token"] = c.end_token ? nlohmann::ordered_json(*c.end_token) : nlohmann::ordered_json(nullptr);
  j["layer_norm_eps"] = c.layer_norm_eps;
  return j;
}

nlohmann::ordered_json to_json(const DleafConfig& c) {
  nlohmann::ordered_json j;
  j["gamma"] = c.gamma;
  j["heads"] = c.heads;
  j["window"] = to_string(c.window);
  j["detection_metric"] = to_string(c.detection_metric);
  j["head_metric"] = to_string(c.head_metric);
  j["alpha"] = c.alpha;
  j["beta"] = c.beta;
  j["renormalize"] = c.renormalize;
  j["bas_rule"] = to_string(c.bas_rule);
  return j;
}

}  // namespace dleaf
