#include "dleaf/trace.hpp"

#include <algorithm>

#include "dleaf/error.hpp"

namespace dleaf {

std::string to_string(Label label) {
  switch (label) {
    case Label::real: return "real";
    case Label::hallucinated: return "hallucinated";
    case Label::unlabeled: return "unlabeled";
  }
  return "unlabeled";
}

Label parse_label(const std::string& s) {
  if (s == "real") return Label::real;
  if (s == "hallucinated") return Label::hallucinated;
  if (s == "unlabeled") return Label::unlabeled;
  throw LabelError("unknown label '" + s + "'");
}

TraceHeader make_header(const ModelConfig& config, ImageSpan span, std::string source) {
  TraceHeader h;
  h.num_layers = config.num_layers;
  h.num_heads = config.num_heads;
  h.num_image_tokens = span.size();
  h.vocab_size = config.vocab_size;
  h.source = std::move(source);
  h.image_span = span;
  return h;
}

TraceRecord make_record(const StepResult& result, ImageSpan span, std::size_t step,
                        std::size_t token_id) {
  TraceRecord rec;
  rec.step = step;
  rec.token_id = token_id;
  const std::size_t layers = result.snapshots.size();
  const std::size_t heads = layers ? result.snapshots.front().num_heads() : 0;
  rec.row_sums = Matrix(layers, heads);
  for (const auto& snap : result.snapshots) {
    if (span.end > snap.num_keys()) throw SpanError("make_record: span exceeds snapshot keys");
    Matrix slice(heads, span.size());
    for (std::size_t h = 0; h < heads; ++h) {
      double total = 0.0;
      for (std::size_t k = 0; k < snap.num_keys(); ++k) total += snap.rows(h, k);
      (*rec.row_sums)(snap.layer, h) = total;
      for (std::size_t n = 0; n < span.size(); ++n) slice(h, n) = snap.rows(h, span.begin + n);
    }
    rec.attention.push_back(std::move(slice));
  }
  return rec;
}

ImageSpan record_span(const TraceRecord& record) {
  const std::size_t n = record.attention.empty() ? 0 : record.attention.front().cols();
  return {0, n};
}

std::vector<AttentionSnapshot> to_snapshots(const TraceRecord& record) {
  std::vector<AttentionSnapshot> out;
  out.reserve(record.attention.size());
  for (std::size_t l = 0; l < record.attention.size(); ++l) {
    const Matrix& slice = record.attention[l];
    AttentionSnapshot snap{l, Matrix(slice.rows(), slice.cols() + 1)};
    for (std::size_t h = 0; h < slice.rows(); ++h) {
      double span_mass = 0.0;
      for (std::size_t n = 0; n < slice.cols(); ++n) {
        snap.rows(h, n) = slice(h, n);
        span_mass += slice(h, n);
      }
      const double row_total = record.row_sums ? (*record.row_sums)(l, h) : 1.0;
      snap.rows(h, slice.cols()) = std::max(0.0, row_total - span_mass);
    }
    out.push_back(std::move(snap));
  }
  return out;
}

void check_record_dims(const TraceHeader& header, const TraceRecord& record) {
  if (record.attention.size() != header.num_layers) {
    throw DimError("record for step " + std::to_string(record.step) + " has " +
                   std::to_string(record.attention.size()) + " layers, header declares " +
                   std::to_string(header.num_layers));
  }
  for (const auto& m : record.attention) {
    if (m.rows() != header.num_heads || m.cols() != header.num_image_tokens) {
      throw DimError("record for step " + std::to_string(record.step) +
                     " has an attention block of " + std::to_string(m.rows()) + "x" +
                     std::to_string(m.cols()) + ", header declares " +
                     std::to_string(header.num_heads) + "x" +
                     std::to_string(header.num_image_tokens));
    }
  }
  if (record.row_sums &&
      (record.row_sums->rows() != header.num_layers || record.row_sums->cols() != header.num_heads)) {
    throw DimError("record for step " + std::to_string(record.step) + " has mis-sized row_sums");
  }
  if (record.token_id >= header.vocab_size) {
    throw DimError("record for step " + std::to_string(record.step) + " has token id " +
                   std::to_string(record.token_id) + " outside the vocabulary");
  }
}

}  // namespace dleaf
