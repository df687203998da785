#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcqr/tensor.hpp"
#include "mcqr/text.hpp"

namespace mcqr {

/// Unreadable input (bad JSON, missing file, inconsistent feature width).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Phenomenon { Coreference, Ellipsis };

const char* phenomenon_name(Phenomenon p);
Phenomenon parse_phenomenon(const std::string& name);  // throws DataError

struct EntityBox {
  std::string entity;
  double x = 0, y = 0, w = 0, h = 0;  // normalized top-left corner and size

  bool operator==(const EntityBox&) const = default;
};

struct Turn {
  std::string query;
  std::string answer;
  std::string rewrite;
  std::vector<Phenomenon> phenomena;
  std::vector<EntityBox> boxes;

  bool has(Phenomenon p) const;
  bool is_negative() const { return phenomena.empty(); }
  bool operator==(const Turn&) const = default;
};

struct VisualConversation {
  std::string conversation_id;
  std::string image_id;
  std::vector<Turn> turns;

  bool operator==(const VisualConversation&) const = default;
};

/// Region features of one image, always exactly n rows once loaded.
struct RoiFeatureSet {
  std::string image_id;
  std::size_t dim = 0;
  Tensor features;  // n × dim
  Tensor boxes;     // n × 4, normalized x, y, w, h
};

struct ValidationIssue {
  std::size_t line = 0;  // 1-based
  std::string message;
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;
  bool ok() const { return issues.empty(); }
};

/// Checks every Turn/EntityBox invariant; returns human-readable problems.
std::vector<std::string> validate(const VisualConversation& conv);

struct CorpusLoad {
  std::vector<VisualConversation> conversations;
  ValidationReport report;
};

/// One JSON object per line. Unparseable JSON throws DataError naming the
/// line; records that parse but break an invariant are skipped and reported.
CorpusLoad load_corpus(const std::string& path);
CorpusLoad read_corpus(std::istream& in);
void write_corpus(std::ostream& out, const std::vector<VisualConversation>& corpus);
void write_corpus(const std::string& path, const std::vector<VisualConversation>& corpus);

struct RoiLoad {
  std::map<std::string, RoiFeatureSet> features;
  std::vector<std::string> log;  // padding / truncation notes
};

/// Pads with zero rows (and zero boxes) or truncates to the first n rows.
RoiLoad load_roi_features(const std::string& path, std::size_t n, std::size_t expected_dim);
RoiLoad read_roi_features(std::istream& in, std::size_t n, std::size_t expected_dim);
void write_roi_features(std::ostream& out, const std::map<std::string, RoiFeatureSet>& feats);
void write_roi_features(const std::string& path, const std::map<std::string, RoiFeatureSet>& feats);

/// A zero feature set, used when an image is absent or ablated.
RoiFeatureSet empty_roi_set(std::size_t n, std::size_t dim);

/// Token counts over queries, answers and rewrites, then Vocabulary::from_counts.
Vocabulary build_vocab(const std::vector<VisualConversation>& corpus, std::size_t min_count);

/// One rewrite target together with everything the model conditions on.
struct RewriteExample {
  std::string conversation_id;
  std::string image_id;
  std::size_t turn_index = 0;  // equals the number of history turns
  std::vector<std::pair<std::string, std::string>> history;  // (query, answer)
  std::string query;
  std::string rewrite;
  std::vector<Phenomenon> phenomena;
  std::vector<EntityBox> boxes;

  std::size_t history_turns() const { return history.size(); }
};

std::vector<RewriteExample> make_examples(const std::vector<VisualConversation>& corpus);

struct DatasetSplit {
  std::vector<VisualConversation> train, valid, test;
};

/// 60/20/20 at conversation granularity after a seeded shuffle. Each part
/// keeps the input order of its members.
DatasetSplit split_dataset(const std::vector<VisualConversation>& corpus, std::uint64_t seed);

/// History-length buckets used by the per-bucket evaluation: 0-1, 2-3, 4-5,
/// 6-7, 8+.
const std::vector<std::string>& turn_bucket_labels();
std::string turn_bucket(std::size_t history_turns);
std::map<std::string, std::vector<std::size_t>> bucket_by_turns(
    const std::vector<RewriteExample>& examples);

}  // namespace mcqr
