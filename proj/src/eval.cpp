#include "dleaf/eval.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "dleaf/error.hpp"
#include "json.hpp"

namespace dleaf {

using nlohmann::json;

std::string canonical_object(const std::string& surface, const SynonymMap& synonyms) {
  auto it = synonyms.find(surface);
  return it == synonyms.end() ? surface : it->second;
}

ChairResult chair_scores(std::span<const CaptionAnnotation> corpus, const SynonymMap& synonyms) {
  if (corpus.empty()) throw EmptyInputError("chair: empty corpus");
  ChairResult r;
  r.captions = corpus.size();
  for (const auto& caption : corpus) {
    std::set<std::string> gold;
    for (const auto& g : caption.gold_objects) gold.insert(canonical_object(g, synonyms));
    std::set<std::string> mentioned;
    for (const auto& m : caption.mentions) mentioned.insert(canonical_object(m, synonyms));
    std::size_t bad = 0;
    for (const auto& obj : mentioned) bad += gold.count(obj) ? 0 : 1;
    r.mentioned_objects += mentioned.size();
    r.hallucinated_objects += bad;
    if (bad > 0) ++r.hallucinated_captions;
  }
  r.chair_s = static_cast<double>(r.hallucinated_captions) / static_cast<double>(r.captions);
  if (r.mentioned_objects == 0) {
    r.zero_mentions = true;
    r.chair_i = 0.0;
  } else {
    r.chair_i = static_cast<double>(r.hallucinated_objects) / static_cast<double>(r.mentioned_objects);
  }
  return r;
}

Answer parse_answer(const std::string& s) {
  if (s == "yes") return Answer::yes;
  if (s == "no") return Answer::no;
  throw ParseError("answer must be 'yes' or 'no', got '" + s + "'");
}

PopeResult pope_from_confusion(const Confusion& c) {
  PopeResult r;
  r.confusion = c;
  const auto ratio = [](std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  r.accuracy = ratio(c.tp + c.tn, c.total());
  r.precision = ratio(c.tp, c.tp + c.fp);
  r.recall = ratio(c.tp, c.tp + c.fn);
  r.f1 = r.precision + r.recall == 0.0 ? 0.0 : 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

PopeResult pope_score(std::span<const PopeItem> items) {
  if (items.empty()) throw EmptyInputError("pope: no items");
  Confusion c;
  for (const auto& it : items) {
    const bool gold = it.gold == Answer::yes, pred = it.pred == Answer::yes;
    if (gold && pred) ++c.tp;
    else if (!gold && pred) ++c.fp;
    else if (gold && !pred) ++c.fn;
    else ++c.tn;
  }
  return pope_from_confusion(c);
}

double relative_reduction(double before, double after) {
  if (before == 0.0) throw DegenerateSampleError("relative reduction from zero");
  return (before - after) / before;
}

namespace {

template <class Fn>
void for_each_json_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      fn(json::parse(text));
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": line " + std::to_string(line) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ": line " + std::to_string(line) + ": " + e.what());
    }
  }
}

}  // namespace

std::vector<CaptionAnnotation> read_annotations(const std::filesystem::path& path) {
  std::vector<CaptionAnnotation> out;
  for_each_json_line(path, [&](const json& j) {
    CaptionAnnotation a;
    a.caption_id = j.at("caption_id").get<std::string>();
    a.mentions = j.at("mentions").get<std::vector<std::string>>();
    a.gold_objects = j.at("gold_objects").get<std::vector<std::string>>();
    out.push_back(std::move(a));
  });
  return out;
}

SynonymMap read_synonyms(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in).get<SynonymMap>();
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::vector<PopeItem> read_pope_items(const std::filesystem::path& path) {
  std::vector<PopeItem> out;
  for_each_json_line(path, [&](const json& j) {
    PopeItem it;
    it.image_id = j.at("image_id").is_string() ? j.at("image_id").get<std::string>()
                                               : j.at("image_id").dump();
    it.turn = j.at("turn").get<std::size_t>();
    it.object = j.at("object").get<std::string>();
    it.gold = parse_answer(j.at("gold").get<std::string>());
    it.pred = parse_answer(j.at("pred").get<std::string>());
    out.push_back(std::move(it));
  });
  return out;
}

}  // namespace dleaf
