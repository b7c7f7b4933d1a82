#include "dleaf/trace_io.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "dleaf/error.hpp"

namespace dleaf {

using nlohmann::json;

namespace {

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

Matrix matrix_from_json(const json& j, const std::string& what) {
  if (!j.is_array()) throw DimError(what + " is not an array");
  const std::size_t rows = j.size();
  const std::size_t cols = rows ? j[0].size() : 0;
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!j[r].is_array() || j[r].size() != cols) throw DimError(what + " is ragged");
    for (std::size_t c = 0; c < cols; ++c) {
      if (!j[r][c].is_number()) throw SchemaError(what + " holds a non-number");
      m(r, c) = j[r][c].get<double>();
    }
  }
  return m;
}

void check_header(const TraceHeader& h) {
  if (h.magic != kTraceMagic) throw SchemaError("bad magic '" + h.magic + "'");
  if (h.schema_version != kTraceSchemaVersion) {
    throw SchemaError("unsupported version " + std::to_string(h.schema_version));
  }
  if (h.num_layers == 0 || h.num_heads == 0 || h.num_image_tokens == 0 || h.vocab_size == 0) {
    throw DimError("header dimensions must be positive");
  }
  if (h.image_span.size() != h.num_image_tokens) {
    throw DimError("image_span length does not match num_image_tokens");
  }
}

void check_record_values(const TraceRecord& rec) {
  for (std::size_t l = 0; l < rec.attention.size(); ++l) {
    for (double v : rec.attention[l].data()) {
      if (!std::isfinite(v) || v < -kTraceRangeSlack || v > 1.0 + kTraceRangeSlack) {
        throw RangeError("attention entry " + std::to_string(v) + " outside [0, 1] in step " +
                         std::to_string(rec.step) + ", layer " + std::to_string(l));
      }
    }
  }
  if (rec.row_sums) {
    for (double v : rec.row_sums->data()) {
      if (!std::isfinite(v) || v < -kTraceRangeSlack) {
        throw RangeError("row sum " + std::to_string(v) + " invalid in step " +
                         std::to_string(rec.step));
      }
    }
  }
}

TraceHeader header_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("header line is not an object");
  TraceHeader h;
  h.magic = j.value("magic", std::string{});
  if (h.magic != kTraceMagic) throw SchemaError("bad magic '" + h.magic + "'");
  if (!j.contains("schema_version") || !j["schema_version"].is_number_integer()) {
    throw SchemaError("missing schema_version");
  }
  h.schema_version = j["schema_version"].get<int>();
  if (h.schema_version != kTraceSchemaVersion) {
    throw SchemaError("unsupported version " + std::to_string(h.schema_version));
  }
  try {
    h.num_layers = j.at("num_layers").get<std::size_t>();
    h.num_heads = j.at("num_heads").get<std::size_t>();
    h.num_image_tokens = j.at("num_image_tokens").get<std::size_t>();
    h.vocab_size = j.at("vocab_size").get<std::size_t>();
    h.source = j.value("source", std::string{});
    const auto& span = j.at("image_span");
    if (!span.is_array() || span.size() != 2) throw SchemaError("image_span must be [begin, end]");
    h.image_span = {span[0].get<std::size_t>(), span[1].get<std::size_t>()};
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed header: ") + e.what());
  }
  check_header(h);
  return h;
}

TraceRecord record_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("record line is not an object");
  TraceRecord rec;
  try {
    rec.step = j.at("step").get<std::size_t>();
    rec.token_id = j.at("token_id").get<std::size_t>();
    if (j.contains("token") && !j["token"].is_null()) rec.token = j["token"].get<std::string>();
    rec.label = parse_label(j.value("label", std::string{"unlabeled"}));
    const auto& att = j.at("attention");
    if (!att.is_array()) throw DimError("attention is not an array");
    for (std::size_t l = 0; l < att.size(); ++l) {
      rec.attention.push_back(matrix_from_json(att[l], "attention layer " + std::to_string(l)));
    }
    if (j.contains("row_sums") && !j["row_sums"].is_null()) {
      rec.row_sums = matrix_from_json(j["row_sums"], "row_sums");
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed record: ") + e.what());
  }
  return rec;
}

template <class Fn>
auto with_line(std::size_t line, Fn&& fn) {
  try {
    return fn();
  } catch (const SchemaError& e) {
    throw SchemaError("line " + std::to_string(line) + ": " + e.what());
  } catch (const DimError& e) {
    throw DimError("line " + std::to_string(line) + ": " + e.what());
  } catch (const RangeError& e) {
    throw RangeError("line " + std::to_string(line) + ": " + e.what());
  } catch (const LabelError& e) {
    throw LabelError("line " + std::to_string(line) + ": " + e.what());
  }
}

json parse_line(const std::string& text, std::size_t line) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("line " + std::to_string(line) + ": " + e.what());
  }
}

}  // namespace

json to_json(const TraceHeader& h) {
  return json{{"magic", h.magic},
              {"schema_version", h.schema_version},
              {"num_layers", h.num_layers},
              {"num_heads", h.num_heads},
              {"num_image_tokens", h.num_image_tokens},
              {"vocab_size", h.vocab_size},
              {"source", h.source},
              {"image_span", {h.image_span.begin, h.image_span.end}}};
}

json to_json(const TraceRecord& rec) {
  json j{{"step", rec.step}, {"token_id", rec.token_id}, {"label", to_string(rec.label)}};
  if (rec.token) j["token"] = *rec.token;
  json att = json::array();
  for (const auto& m : rec.attention) att.push_back(matrix_to_json(m));
  j["attention"] = std::move(att);
  if (rec.row_sums) j["row_sums"] = matrix_to_json(*rec.row_sums);
  return j;
}

void write_trace(std::ostream& out, const TraceHeader& header, std::span<const TraceRecord> records) {
  check_header(header);
  for (const auto& rec : records) {
    check_record_dims(header, rec);
    check_record_values(rec);
  }
  out << to_json(header).dump() << '\n';
  for (const auto& rec : records) out << to_json(rec).dump() << '\n';
}

void write_trace(const std::filesystem::path& path, const TraceHeader& header,
                 std::span<const TraceRecord> records) {
  std::ostringstream buffer;
  write_trace(buffer, header, records);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << buffer.str();
  if (!out) throw IoError("write to " + path.string() + " failed");
}

TraceSet read_trace(std::istream& in) {
  TraceSet set;
  std::string text;
  std::size_t line = 0;
  bool have_header = false;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    const json j = parse_line(text, line);
    if (!have_header) {
      set.header = with_line(line, [&] { return header_from_json(j); });
      have_header = true;
      continue;
    }
    TraceRecord rec = with_line(line, [&] {
      TraceRecord r = record_from_json(j);
      check_record_dims(set.header, r);
      check_record_values(r);
      return r;
    });
    set.records.push_back(std::move(rec));
  }
  if (!have_header) throw SchemaError("trace has no header line");
  return set;
}

TraceSet read_trace(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open trace " + path.string());
  try {
    return read_trace(in);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  } catch (const SchemaError& e) {
    throw SchemaError(path.string() + ": " + e.what());
  } catch (const DimError& e) {
    throw DimError(path.string() + ": " + e.what());
  } catch (const RangeError& e) {
    throw RangeError(path.string() + ": " + e.what());
  }
}

LabelJoin attach_labels(std::vector<TraceRecord>& records, std::istream& label_lines) {
  std::map<std::size_t, Label> labels;
  std::string text;
  std::size_t line = 0;
  while (std::getline(label_lines, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    const json j = parse_line(text, line);
    with_line(line, [&] {
      if (!j.is_object() || !j.contains("step") || !j.contains("label")) {
        throw LabelError("label line needs 'step' and 'label'");
      }
      std::size_t step = 0;
      std::string label;
      try {
        step = j["step"].get<std::size_t>();
        label = j["label"].get<std::string>();
      } catch (const json::exception&) {
        throw LabelError("label line has mistyped fields");
      }
      if (!labels.emplace(step, parse_label(label)).second) {
        throw LabelError("duplicate step " + std::to_string(step));
      }
      return 0;
    });
  }

  LabelJoin join;
  std::size_t used = 0;
  for (auto& rec : records) {
    auto it = labels.find(rec.step);
    if (it == labels.end()) {
      rec.label = Label::unlabeled;
      ++join.unlabeled;
    } else {
      rec.label = it->second;
      ++join.matched;
      ++used;
    }
  }
  std::map<std::size_t, int> seen;
  for (const auto& rec : records) seen[rec.step] = 1;
  for (const auto& [step, label] : labels) {
    if (!seen.count(step)) ++join.orphan_labels;
  }
  return join;
}

LabelJoin attach_labels(std::vector<TraceRecord>& records, const std::filesystem::path& label_file) {
  std::ifstream in(label_file, std::ios::binary);
  if (!in) throw IoError("cannot open label file " + label_file.string());
  return attach_labels(records, in);
}

json to_json(const StepLog& step) {
  json decisions = json::array();
  for (const auto& d : step.decisions) {
    decisions.push_back({{"layer", d.layer}, {"score", d.score}, {"bas", d.bas}, {"flagged", d.flagged}});
  }
  json corrections = json::array();
  for (const auto& c : step.corrections) {
    corrections.push_back({{"layer", c.layer},
                           {"corrected_heads", c.corrected},
                           {"best_head", c.best},
                           {"iaf_before", c.iaf_before},
                           {"iaf_after", c.iaf_after}});
  }
  return json{{"step", step.step},
              {"position", step.position},
              {"flagged_layers", step.flagged_layers()},
              {"decisions", std::move(decisions)},
              {"corrections", std::move(corrections)}};
}

void write_intervention_log(const std::filesystem::path& path, const InterventionLog& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& step : log.steps) out << to_json(step).dump() << '\n';
  if (!out) throw IoError("write to " + path.string() + " failed");
}

}  // namespace dleaf
