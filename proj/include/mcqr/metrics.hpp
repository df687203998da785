#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mcqr/corpus.hpp"

namespace mcqr {

using Sentences = std::vector<std::string>;

/// Corpus BLEU-max_n in [0, 100]: clipped n-gram precisions pooled over the
/// corpus, geometric mean, brevity penalty. Any zero precision gives 0.
double bleu(const Sentences& candidates, const Sentences& references, int max_n);

enum class RougeVariant { Bigram, Lcs };

/// Mean per-pair F1 in [0, 100]. A pair with no bigrams (or no tokens) on
/// either side scores 0.
double rouge(const Sentences& candidates, const Sentences& references, RougeVariant variant);

/// Porter-free suffix stem: strips one of ing/ed/es/s/ly when at least three
/// characters remain.
std::string lite_stem(const std::string& token);

struct MeteorAlignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (candidate pos, reference pos)
  std::size_t exact = 0;
  std::size_t chunks = 0;
};

/// Alignment with the most exact matches, then the most stem matches, then
/// the fewest chunks. Exhaustive up to `max_states` search nodes, greedy after.
MeteorAlignment meteor_align(const std::vector<std::string>& candidate,
                             const std::vector<std::string>& reference,
                             std::size_t max_states = 200000);

/// Mean per-pair F_mean · (1 − 0.5·(chunks/matches)³) in [0, 100]; no
/// synonym stage.
double meteor_lite(const Sentences& candidates, const Sentences& references);

struct ExactMatch {
  std::optional<double> positive;  // % correct among rewrites that differ from the query
  std::optional<double> negative;  // % correct among rewrites equal to the query
  std::size_t positive_count = 0;
  std::size_t negative_count = 0;
};

ExactMatch exact_match(const Sentences& candidates, const Sentences& references,
                       const Sentences& queries);

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t utterances = 0;  // utterances that contributed
};

/// Restored-token P/R/F1 in [0, 1]. Restored tokens of a sentence are its
/// token multiset minus the query's.
Prf span_prf(const Sentences& candidates, const Sentences& references, const Sentences& queries);
/// Same, restricted to examples labelled with `filter`.
Prf span_prf(const Sentences& candidates, const Sentences& references, const Sentences& queries,
             const std::vector<std::vector<Phenomenon>>& labels, Phenomenon filter);

struct EvalReport {
  std::size_t examples = 0;
  double bleu2 = 0, bleu4 = 0, rouge2 = 0, rougeL = 0, meteor = 0;
  std::optional<double> em_pos, em_neg;
  std::size_t em_pos_count = 0, em_neg_count = 0;
  Prf coref, ellipsis;  // scaled to [0, 100]
  std::map<std::string, EvalReport> per_bucket;
};

struct EvalInput {
  Sentences candidates, references, queries;
  std::vector<std::vector<Phenomenon>> labels;
  std::vector<std::size_t> history_turns;
};

/// Full metric bundle; with `by_bucket` also one sub-report per non-empty
/// history-length bucket.
EvalReport evaluate_predictions(const EvalInput& input, bool by_bucket);

nlohmann::ordered_json to_json(const EvalReport& report);
/// One row per scope (`all`, then each bucket).
std::string to_csv(const EvalReport& report);

}  // namespace mcqr
