#pragma once

// DLEAF-TRACE v1: newline-delimited JSON. Line 1 is the header object, each
// following line one record. Reals are written with round-trip precision.
//
//   {"magic":"DLEAF-TRACE","schema_version":1,"num_layers":L,"num_heads":H,
//    "num_image_tokens":N,"vocab_size":V,"source":"...","image_span":[b,e]}
//   {"step":0,"token_id":7,"token":"cat","label":"real",
//    "attention":[[[a_0_0_0, ...], ...], ...],   // L x H x N
//    "row_sums":[[...], ...]}                    // optional, L x H
//
// Label files are NDJSON lines {"step":s,"label":"real"|"hallucinated"|"unlabeled"}.

#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "dleaf/engine.hpp"
#include "dleaf/trace.hpp"
#include "json.hpp"

namespace dleaf {

// Entries may exceed [0, 1] by at most this much before RangeError.
inline constexpr double kTraceRangeSlack = 1e-9;

nlohmann::json to_json(const TraceHeader& header);
nlohmann::json to_json(const TraceRecord& record);

// Validates everything first; nothing is written if any record is rejected.
void write_trace(const std::filesystem::path& path, const TraceHeader& header,
                 std::span<const TraceRecord> records);
void write_trace(std::ostream& out, const TraceHeader& header, std::span<const TraceRecord> records);

// Throws ParseError (malformed line, with its 1-based number), SchemaError
// (bad magic or version), DimError, RangeError, IoError.
TraceSet read_trace(const std::filesystem::path& path);
TraceSet read_trace(std::istream& in);

struct LabelJoin {
  std::size_t matched = 0;
  std::size_t unlabeled = 0;
  std::size_t orphan_labels = 0;  // label lines naming a step with no record
};

// Joins labels by step. Records without a label line become unlabeled.
// Duplicate steps in the label file raise LabelError.
LabelJoin attach_labels(std::vector<TraceRecord>& records, const std::filesystem::path& label_file);
LabelJoin attach_labels(std::vector<TraceRecord>& records, std::istream& label_lines);

nlohmann::json to_json(const StepLog& step);
void write_intervention_log(const std::filesystem::path& path, const InterventionLog& log);

}  // namespace dleaf
