#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mcqr/model.hpp"

namespace mcqr {

struct Hypothesis {
  std::vector<std::size_t> tokens;  // without [SOS]; ends with [EOS] when finished
  double log_prob = 0.0;
  bool finished = false;
};

/// Next-token probabilities given the generated prefix (without [SOS]).
using StepScorer = std::function<std::vector<double>(const std::vector<std::size_t>& prefix)>;

struct SearchResult {
  Hypothesis best;
  bool truncated = false;      // nothing finished within max_len
  std::size_t expansions = 0;  // candidate continuations scored
  std::size_t steps = 0;
  std::size_t max_step_expansions = 0;
};

inline constexpr std::size_t kDefaultBeam = 5;
inline constexpr std::size_t kDefaultMaxLen = 32;

/// Strict order used for ranking and tie-breaking: higher log-prob, then
/// shorter, then lexicographically smaller ids.
bool better(const Hypothesis& a, const Hypothesis& b);

/// Each step expands every live hypothesis over the whole vocabulary and
/// keeps the best `beam` candidates; those ending in `eos` move to the
/// finished set. Stops when nothing is alive, at max_len, or once the best
/// finished hypothesis can no longer be overtaken.
SearchResult beam_search(const StepScorer& scorer, std::size_t beam, std::size_t max_len,
                         std::size_t eos);

/// Stepwise argmax (lowest id on ties).
SearchResult greedy_search(const StepScorer& scorer, std::size_t max_len, std::size_t eos);

/// Scores prefixes with a model: the input is encoded once and each call
/// re-runs the decoder on a truncated tape.
class ModelScorer {
 public:
  ModelScorer(const RewriterModel& model, const PreparedExample& example);
  std::vector<double> operator()(const std::vector<std::size_t>& prefix);
  std::size_t ext_vocab() const { return enc_.ext_vocab; }

 private:
  std::shared_ptr<Tape> tape_;
  std::shared_ptr<ForwardPass> pass_;
  EncodedBatch enc_;
  std::size_t mark_ = 0;
};

StepScorer make_scorer(const RewriterModel& model, const PreparedExample& example);

struct RewriteResult {
  std::string text;
  std::vector<std::size_t> tokens;  // without [SOS] / [EOS]
  double log_prob = 0.0;
  bool truncated = false;
  /// Forced-decoding α for every output step (including [EOS] when present);
  /// empty for models without the pointer.
  std::vector<std::vector<double>> alpha;
};

RewriteResult rewrite(const RewriterModel& model, const PreparedExample& example,
                      std::size_t beam = kDefaultBeam, std::size_t max_len = kDefaultMaxLen);

/// Σ_t log P(y_t | y_<t) of a given continuation under teacher forcing.
double sequence_log_prob(const RewriterModel& model, const PreparedExample& example,
                         const std::vector<std::size_t>& tokens);

}  // namespace mcqr
