#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mcqr/corpus.hpp"

namespace mcqr {

/// Corpus statistics. Percentages are over queries; lengths count word
/// tokens.
struct DatasetStats {
  std::size_t conversations = 0;
  std::size_t queries = 0;
  double pct_coreference = 0;
  double pct_ellipsis = 0;
  double pct_neither = 0;
  double avg_turns_per_conversation = 0;
  double avg_entities_per_conversation = 0;  // distinct box entity strings
  double avg_boxes_per_conversation = 0;
  double avg_rewrite_length = 0;
  double avg_context_length = 0;  // all prior queries and answers
  /// Rewrite counts by history-turn count: 0-2, 3-4, 5-6, 7-8, 9+.
  std::map<std::string, std::size_t> history_buckets;
};

const std::vector<std::string>& stats_bucket_labels();
DatasetStats dataset_stats(const std::vector<VisualConversation>& corpus);

/// Raised when agreement is undefined (expected agreement is 1 but observed
/// agreement is not).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

using RatingPair = std::pair<std::string, std::string>;

/// (p_o - p_e) / (1 - p_e) with p_e from the product of marginals.
double cohen_kappa(const std::vector<RatingPair>& ratings);

/// CSV with header `item_id,rater_a,rater_b`.
std::vector<RatingPair> load_ratings(const std::string& path);

}  // namespace mcqr
