#pragma once

// Object-hallucination scoring: CHAIR over captions and POPE over yes/no
// probes, plus the NDJSON readers for their input files.
//
//   annotations: {"caption_id":"a","mentions":["dog","cat"],"gold_objects":["dog"]}
//   synonyms:    {"puppy":"dog", "kitten":"cat"}
//   pope items:  {"image_id":"x","turn":0,"object":"dog","gold":"yes","pred":"no"}

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace dleaf {

using SynonymMap = std::map<std::string, std::string>;

struct CaptionAnnotation {
  std::string caption_id;
  std::vector<std::string> mentions;
  std::vector<std::string> gold_objects;
};

struct ChairResult {
  double chair_s = 0.0;
  double chair_i = 0.0;
  std::size_t captions = 0;
  std::size_t hallucinated_captions = 0;
  std::size_t mentioned_objects = 0;
  std::size_t hallucinated_objects = 0;
  bool zero_mentions = false;  // C_I reported as 0 because nothing was mentioned
};

// Surface form mapped through the synonym table; unknown forms are their own
// canonical object.
std::string canonical_object(const std::string& surface, const SynonymMap& synonyms);

// Corpus-level: C_I = hallucinated / mentioned objects, C_S = captions with a
// hallucination / captions. Mentions are deduplicated per caption by
// canonical object. EmptyInputError for an empty corpus.
ChairResult chair_scores(std::span<const CaptionAnnotation> corpus, const SynonymMap& synonyms);

enum class Answer { yes, no };
Answer parse_answer(const std::string& s);

struct PopeItem {
  std::string image_id;
  std::size_t turn = 0;
  std::string object;
  Answer gold = Answer::no;
  Answer pred = Answer::no;
};

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::size_t total() const noexcept { return tp + fp + fn + tn; }
};

struct PopeResult {
  Confusion confusion;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

PopeResult pope_from_confusion(const Confusion& c);
// All turns pooled, "yes" positive. EmptyInputError for no items.
PopeResult pope_score(std::span<const PopeItem> items);

// (before - after) / before.
double relative_reduction(double before, double after);

std::vector<CaptionAnnotation> read_annotations(const std::filesystem::path& path);
SynonymMap read_synonyms(const std::filesystem::path& path);
std::vector<PopeItem> read_pope_items(const std::filesystem::path& path);

}  // namespace dleaf
