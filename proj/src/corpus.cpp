#include "mcqr/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "json.hpp"
#include "mcqr/rng.hpp"

namespace mcqr {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

const char* phenomenon_name(Phenomenon p) {
  return p == Phenomenon::Coreference ? "coreference" : "ellipsis";
}

Phenomenon parse_phenomenon(const std::string& name) {
  if (name == "coreference") return Phenomenon::Coreference;
  if (name == "ellipsis") return Phenomenon::Ellipsis;
  throw DataError("unknown phenomenon '" + name + "'");
}

bool Turn::has(Phenomenon p) const {
  return std::find(phenomena.begin(), phenomena.end(), p) != phenomena.end();
}

std::vector<std::string> validate(const VisualConversation& conv) {
  std::vector<std::string> problems;
  if (conv.conversation_id.empty()) problems.push_back("empty conversation_id");
  if (conv.turns.empty()) problems.push_back("conversation has no turns");
  for (std::size_t i = 0; i < conv.turns.size(); ++i) {
    const Turn& t = conv.turns[i];
    const std::string where = "turn " + std::to_string(i) + ": ";
    if (normalize(t.query).empty()) problems.push_back(where + "empty query");
    if (normalize(t.rewrite).empty()) problems.push_back(where + "empty rewrite");
    const bool same = normalize(t.rewrite) == normalize(t.query);
    if (t.phenomena.empty() && !same)
      problems.push_back(where + "negative sample (no phenomena) but rewrite differs from query");
    if (!t.phenomena.empty() && same)
      problems.push_back(where + "phenomena labeled but rewrite equals query");
    std::set<Phenomenon> uniq(t.phenomena.begin(), t.phenomena.end());
    if (uniq.size() != t.phenomena.size()) problems.push_back(where + "duplicate phenomenon label");
    for (const auto& b : t.boxes) {
      const bool finite = std::isfinite(b.x) && std::isfinite(b.y) && std::isfinite(b.w) &&
                          std::isfinite(b.h);
      if (b.entity.empty()) problems.push_back(where + "box with empty entity");
      if (!finite || b.x < 0 || b.y < 0 || b.w <= 0 || b.h <= 0 || b.x + b.w > 1.0 ||
          b.y + b.h > 1.0)
        problems.push_back(where + "box for '" + b.entity + "' outside the unit square");
    }
  }
  return problems;
}

// ---------------------------------------------------------------------------
// Corpus JSON-lines

namespace {

VisualConversation conversation_from_json(const json& j) {
  VisualConversation conv;
  conv.conversation_id = j.at("conversation_id").get<std::string>();
  conv.image_id = j.at("image_id").get<std::string>();
  std::size_t expected = 0;
  for (const auto& jt : j.at("turns")) {
    const auto index = jt.at("turn").get<long long>();
    if (index != static_cast<long long>(expected))
      throw DataError("turn indices must be contiguous from 0; expected " +
                      std::to_string(expected) + ", got " + std::to_string(index));
    ++expected;
    Turn t;
    t.query = jt.at("query").get<std::string>();
    t.answer = jt.at("answer").get<std::string>();
    t.rewrite = jt.at("rewrite").get<std::string>();
    for (const auto& p : jt.at("phenomena")) t.phenomena.push_back(parse_phenomenon(p));
    for (const auto& jb : jt.at("boxes")) {
      t.boxes.push_back({jb.at("entity").get<std::string>(), jb.at("x").get<double>(),
                         jb.at("y").get<double>(), jb.at("w").get<double>(),
                         jb.at("h").get<double>()});
    }
    conv.turns.push_back(std::move(t));
  }
  return conv;
}

ordered_json conversation_to_json(const VisualConversation& conv) {
  ordered_json j;
  j["conversation_id"] = conv.conversation_id;
  j["image_id"] = conv.image_id;
  j["turns"] = ordered_json::array();
  for (std::size_t i = 0; i < conv.turns.size(); ++i) {
    const Turn& t = conv.turns[i];
    ordered_json jt;
    jt["turn"] = i;
    jt["query"] = t.query;
    jt["answer"] = t.answer;
    jt["rewrite"] = t.rewrite;
    jt["phenomena"] = ordered_json::array();
    for (auto p : t.phenomena) jt["phenomena"].push_back(phenomenon_name(p));
    jt["boxes"] = ordered_json::array();
    for (const auto& b : t.boxes) {
      ordered_json jb;
      jb["entity"] = b.entity;
      jb["x"] = b.x;
      jb["y"] = b.y;
      jb["w"] = b.w;
      jb["h"] = b.h;
      jt["boxes"].push_back(jb);
    }
    j["turns"].push_back(jt);
  }
  return j;
}

bool blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(),
                     [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; });
}

std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return in;
}

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  return out;
}

}  // namespace

CorpusLoad read_corpus(std::istream& in) {
  CorpusLoad result;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("line " + std::to_string(lineno) + ": malformed JSON: " + e.what());
    }
    VisualConversation conv;
    try {
      conv = conversation_from_json(j);
    } catch (const std::exception& e) {
      result.report.issues.push_back({lineno, e.what()});
      continue;
    }
    auto problems = validate(conv);
    if (!problems.empty()) {
      for (auto& p : problems) result.report.issues.push_back({lineno, std::move(p)});
      continue;
    }
    result.conversations.push_back(std::move(conv));
  }
  return result;
}

CorpusLoad load_corpus(const std::string& path) {
  auto in = open_input(path);
  return read_corpus(in);
}

void write_corpus(std::ostream& out, const std::vector<VisualConversation>& corpus) {
  for (const auto& conv : corpus) out << conversation_to_json(conv).dump() << '\n';
}

void write_corpus(const std::string& path, const std::vector<VisualConversation>& corpus) {
  auto out = open_output(path);
  write_corpus(out, corpus);
}

// ---------------------------------------------------------------------------
// ROI features

RoiFeatureSet empty_roi_set(std::size_t n, std::size_t dim) {
  return {"", dim, Tensor({n, dim}, 0.0), Tensor({n, 4}, 0.0)};
}

RoiLoad read_roi_features(std::istream& in, std::size_t n, std::size_t expected_dim) {
  require(n > 0 && expected_dim > 0, "ROI count and feature width must be positive");
  RoiLoad result;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (blank(line)) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("line " + std::to_string(lineno) + ": malformed JSON: " + e.what());
    }
    RoiFeatureSet set;
    try {
      set.image_id = j.at("image_id").get<std::string>();
      set.dim = j.at("dim").get<std::size_t>();
      if (set.dim != expected_dim)
        throw DataError("image '" + set.image_id + "': feature dim " + std::to_string(set.dim) +
                        " but " + std::to_string(expected_dim) + " expected");
      const auto& rows = j.at("features");
      const auto& boxes = j.at("boxes");
      if (rows.size() != boxes.size())
        throw DataError("image '" + set.image_id + "': " + std::to_string(rows.size()) +
                        " feature rows but " + std::to_string(boxes.size()) + " boxes");
      set.features = Tensor({n, expected_dim}, 0.0);
      set.boxes = Tensor({n, 4}, 0.0);
      const std::size_t keep = std::min(n, rows.size());
      for (std::size_t r = 0; r < keep; ++r) {
        if (rows[r].size() != expected_dim)
          throw DataError("image '" + set.image_id + "': row " + std::to_string(r) + " has " +
                          std::to_string(rows[r].size()) + " values, expected dim " +
                          std::to_string(expected_dim));
        if (boxes[r].size() != 4)
          throw DataError("image '" + set.image_id + "': box " + std::to_string(r) +
                          " must have 4 coordinates");
        for (std::size_t c = 0; c < expected_dim; ++c) {
          const double v = rows[r][c].get<double>();
          if (!std::isfinite(v))
            throw DataError("image '" + set.image_id + "': non-finite feature value");
          set.features.at(r, c) = v;
        }
        for (std::size_t c = 0; c < 4; ++c) {
          const double v = boxes[r][c].get<double>();
          if (!std::isfinite(v) || v < 0.0 || v > 1.0)
            throw DataError("image '" + set.image_id + "': box coordinate outside [0,1]");
          set.boxes.at(r, c) = v;
        }
      }
      if (rows.size() < n)
        result.log.push_back(set.image_id + ": padded " + std::to_string(rows.size()) + " -> " +
                             std::to_string(n) + " ROIs");
      else if (rows.size() > n)
        result.log.push_back(set.image_id + ": truncated " + std::to_string(rows.size()) +
                             " -> " + std::to_string(n) + " ROIs");
    } catch (const DataError&) {
      throw;
    } catch (const std::exception& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    }
    result.features[set.image_id] = std::move(set);
  }
  return result;
}

RoiLoad load_roi_features(const std::string& path, std::size_t n, std::size_t expected_dim) {
  auto in = open_input(path);
  return read_roi_features(in, n, expected_dim);
}

void write_roi_features(std::ostream& out, const std::map<std::string, RoiFeatureSet>& feats) {
  for (const auto& [id, set] : feats) {
    ordered_json j;
    j["image_id"] = id;
    j["dim"] = set.dim;
    j["features"] = ordered_json::array();
    j["boxes"] = ordered_json::array();
    for (std::size_t r = 0; r < set.features.rows(); ++r) {
      auto row = set.features.row(r);
      j["features"].push_back(std::vector<double>(row.begin(), row.end()));
      auto box = set.boxes.row(r);
      j["boxes"].push_back(std::vector<double>(box.begin(), box.end()));
    }
    out << j.dump() << '\n';
  }
}

void write_roi_features(const std::string& path, const std::map<std::string, RoiFeatureSet>& feats) {
  auto out = open_output(path);
  write_roi_features(out, feats);
}

// ---------------------------------------------------------------------------

Vocabulary build_vocab(const std::vector<VisualConversation>& corpus, std::size_t min_count) {
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& conv : corpus)
    for (const auto& t : conv.turns)
      for (const auto* s : {&t.query, &t.answer, &t.rewrite})
        for (auto& tok : tokenize(*s)) ++counts[tok];
  return Vocabulary::from_counts(counts, min_count);
}

std::vector<RewriteExample> make_examples(const std::vector<VisualConversation>& corpus) {
  std::vector<RewriteExample> out;
  for (const auto& conv : corpus) {
    std::vector<std::pair<std::string, std::string>> history;
    for (std::size_t i = 0; i < conv.turns.size(); ++i) {
      const Turn& t = conv.turns[i];
      out.push_back({conv.conversation_id, conv.image_id, i, history, t.query, t.rewrite,
                     t.phenomena, t.boxes});
      history.emplace_back(t.query, t.answer);
    }
  }
  return out;
}

DatasetSplit split_dataset(const std::vector<VisualConversation>& corpus, std::uint64_t seed) {
  const std::size_t n = corpus.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  const auto n_train = static_cast<std::size_t>(std::llround(0.6 * static_cast<double>(n)));
  const auto n_valid =
      std::min(n - n_train, static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n))));
  std::vector<std::size_t> tr(order.begin(), order.begin() + n_train);
  std::vector<std::size_t> va(order.begin() + n_train, order.begin() + n_train + n_valid);
  std::vector<std::size_t> te(order.begin() + n_train + n_valid, order.end());
  DatasetSplit split;
  for (auto* part : {&tr, &va, &te}) std::sort(part->begin(), part->end());
  for (auto i : tr) split.train.push_back(corpus[i]);
  for (auto i : va) split.valid.push_back(corpus[i]);
  for (auto i : te) split.test.push_back(corpus[i]);
  return split;
}

const std::vector<std::string>& turn_bucket_labels() {
  static const std::vector<std::string> labels = {"0-1", "2-3", "4-5", "6-7", "8+"};
  return labels;
}

std::string turn_bucket(std::size_t history_turns) {
  return turn_bucket_labels()[std::min<std::size_t>(history_turns / 2, 4)];
}

std::map<std::string, std::vector<std::size_t>> bucket_by_turns(
    const std::vector<RewriteExample>& examples) {
  std::map<std::string, std::vector<std::size_t>> buckets;
  for (const auto& label : turn_bucket_labels()) buckets[label];
  for (std::size_t i = 0; i < examples.size(); ++i)
    buckets[turn_bucket(examples[i].history_turns())].push_back(i);
  return buckets;
}

}  // namespace mcqr
