#include "mcqr/stats.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "mcqr/csv.hpp"

namespace mcqr {

const std::vector<std::string>& stats_bucket_labels() {
  static const std::vector<std::string> labels = {"0-2", "3-4", "5-6", "7-8", "9+"};
  return labels;
}

namespace {
const std::string& stats_bucket(std::size_t history_turns) {
  const auto& labels = stats_bucket_labels();
  if (history_turns <= 2) return labels[0];
  return labels[std::min<std::size_t>((history_turns - 1) / 2, 4)];
}
}  // namespace

DatasetStats dataset_stats(const std::vector<VisualConversation>& corpus) {
  DatasetStats s;
  for (const auto& label : stats_bucket_labels()) s.history_buckets[label] = 0;
  s.conversations = corpus.size();
  std::size_t coref = 0, ellipsis = 0, neither = 0, entities = 0, boxes = 0;
  std::size_t rewrite_words = 0, context_words = 0;
  for (const auto& conv : corpus) {
    std::set<std::string> distinct;
    std::size_t context = 0;
    for (std::size_t i = 0; i < conv.turns.size(); ++i) {
      const Turn& t = conv.turns[i];
      ++s.queries;
      if (t.has(Phenomenon::Coreference)) ++coref;
      if (t.has(Phenomenon::Ellipsis)) ++ellipsis;
      if (t.phenomena.empty()) ++neither;
      for (const auto& b : t.boxes) distinct.insert(b.entity);
      boxes += t.boxes.size();
      rewrite_words += word_count(t.rewrite);
      context_words += context;
      ++s.history_buckets[stats_bucket(i)];
      context += word_count(t.query) + word_count(t.answer);
    }
    entities += distinct.size();
  }
  if (s.queries > 0) {
    const double q = static_cast<double>(s.queries);
    s.pct_coreference = 100.0 * static_cast<double>(coref) / q;
    s.pct_ellipsis = 100.0 * static_cast<double>(ellipsis) / q;
    s.pct_neither = 100.0 * static_cast<double>(neither) / q;
    s.avg_rewrite_length = static_cast<double>(rewrite_words) / q;
    s.avg_context_length = static_cast<double>(context_words) / q;
  }
  if (s.conversations > 0) {
    const double c = static_cast<double>(s.conversations);
    s.avg_turns_per_conversation = static_cast<double>(s.queries) / c;
    s.avg_entities_per_conversation = static_cast<double>(entities) / c;
    s.avg_boxes_per_conversation = static_cast<double>(boxes) / c;
  }
  return s;
}

double cohen_kappa(const std::vector<RatingPair>& ratings) {
  require(!ratings.empty(), "cohen_kappa: need at least one rated item");
  std::map<std::string, double> marg_a, marg_b;
  std::size_t agree = 0;
  for (const auto& [a, b] : ratings) {
    marg_a[a] += 1.0;
    marg_b[b] += 1.0;
    if (a == b) ++agree;
  }
  const double n = static_cast<double>(ratings.size());
  const double p_o = static_cast<double>(agree) / n;
  double p_e = 0.0;
  for (const auto& [label, count] : marg_a) {
    auto it = marg_b.find(label);
    if (it != marg_b.end()) p_e += (count / n) * (it->second / n);
  }
  if (p_e == 1.0) {
    if (p_o == 1.0) return 1.0;
    throw DomainError("cohen_kappa: chance agreement is 1 but raters disagree");
  }
  return (p_o - p_e) / (1.0 - p_e);
}

std::vector<RatingPair> load_ratings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<RatingPair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto fields = csv::split(line);
    if (lineno == 1 && !fields.empty() && fields[0] == "item_id") continue;
    if (fields.size() != 3)
      throw DataError("line " + std::to_string(lineno) + ": expected item_id,rater_a,rater_b");
    out.emplace_back(fields[1], fields[2]);
  }
  return out;
}

}  // namespace mcqr
