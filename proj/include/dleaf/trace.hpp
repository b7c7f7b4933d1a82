#pragma once

// Offline attention traces: one record per generated token holding the
// image-span slice of every layer's current-query attention row.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dleaf/model.hpp"
#include "dleaf/tensor.hpp"

namespace dleaf {

enum class Label { real, hallucinated, unlabeled };

std::string to_string(Label label);
Label parse_label(const std::string& s);

inline constexpr const char* kTraceMagic = "DLEAF-TRACE";
inline constexpr int kTraceSchemaVersion = 1;

struct TraceHeader {
  std::string magic = kTraceMagic;
  int schema_version = kTraceSchemaVersion;
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;
  std::size_t num_image_tokens = 0;
  std::size_t vocab_size = 0;
  std::string source;
  ImageSpan image_span;

  bool operator==(const TraceHeader&) const = default;
};

struct TraceRecord {
  std::size_t step = 0;
  std::size_t token_id = 0;
  std::optional<std::string> token;
  Label label = Label::unlabeled;
  std::vector<Matrix> attention;     // num_layers entries, each H x N
  std::optional<Matrix> row_sums;    // num_layers x H, full-row sums
};

struct TraceSet {
  TraceHeader header;
  std::vector<TraceRecord> records;
};

TraceHeader make_header(const ModelConfig& config, ImageSpan span, std::string source);

// Image-span slice of one decode step.
TraceRecord make_record(const StepResult& result, ImageSpan span, std::size_t step,
                        std::size_t token_id);

// Rebuilds per-layer snapshots from a record. Columns [0, N) hold the stored
// span slice; one trailing column holds the rest of the row's mass (row sum
// minus span mass when row sums are stored, else 1 minus span mass, floored at
// zero). The returned span is [0, N).
std::vector<AttentionSnapshot> to_snapshots(const TraceRecord& record);
ImageSpan record_span(const TraceRecord& record);

// Throws DimError when the record does not match the header's dimensions.
void check_record_dims(const TraceHeader& header, const TraceRecord& record);

}  // namespace dleaf
