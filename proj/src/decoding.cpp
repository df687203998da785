#include "mcqr/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mcqr {

bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return a.tokens < b.tokens;
}

namespace {

struct Candidate {
  std::size_t parent;
  std::size_t token;
  double log_prob;
};

}  // namespace

SearchResult beam_search(const StepScorer& scorer, std::size_t beam, std::size_t max_len,
                         std::size_t eos) {
  require(beam >= 1, "beam_search: beam size must be >= 1");
  require(max_len >= 1, "beam_search: max_len must be >= 1");
  SearchResult result;
  std::vector<Hypothesis> alive{Hypothesis{}};
  std::vector<Hypothesis> finished;

  for (std::size_t step = 0; step < max_len && !alive.empty(); ++step) {
    std::vector<Candidate> cands;
    std::size_t scored = 0;
    for (std::size_t h = 0; h < alive.size(); ++h) {
      const std::vector<double> probs = scorer(alive[h].tokens);
      scored += probs.size();
      for (std::size_t w = 0; w < probs.size(); ++w)
        if (probs[w] > 0.0) cands.push_back({h, w, alive[h].log_prob + std::log(probs[w])});
    }
    result.expansions += scored;
    result.max_step_expansions = std::max(result.max_step_expansions, scored);
    result.steps = step + 1;

    // Every candidate of a step has the same length, so ties fall through to
    // the parent's tokens and then the appended id.
    auto order = [&](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (a.parent != b.parent) return alive[a.parent].tokens < alive[b.parent].tokens;
      return a.token < b.token;
    };
    const std::size_t keep = std::min(beam, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<long>(keep), cands.end(), order);

    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Hypothesis h{alive[cands[i].parent].tokens, cands[i].log_prob, false};
      h.tokens.push_back(cands[i].token);
      if (cands[i].token == eos) {
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    alive = std::move(next);

    if (!finished.empty() && !alive.empty()) {
      const double best_done =
          std::max_element(finished.begin(), finished.end(),
                           [](const Hypothesis& a, const Hypothesis& b) { return better(b, a); })
              ->log_prob;
      // Log-probs never increase, so no live hypothesis can overtake.
      if (best_done >= alive.front().log_prob) break;
    }
  }

  const auto pick_best = [](const std::vector<Hypothesis>& v) {
    return *std::min_element(v.begin(), v.end(), better);
  };
  if (!finished.empty()) {
    result.best = pick_best(finished);
  } else {
    require(!alive.empty(), "beam_search: every continuation had zero probability");
    result.best = pick_best(alive);
    result.truncated = true;
  }
  return result;
}

SearchResult greedy_search(const StepScorer& scorer, std::size_t max_len, std::size_t eos) {
  require(max_len >= 1, "greedy_search: max_len must be >= 1");
  SearchResult result;
  Hypothesis h;
  while (h.tokens.size() < max_len) {
    const std::vector<double> probs = scorer(h.tokens);
    require(!probs.empty(), "greedy_search: empty distribution");
    result.expansions += probs.size();
    result.max_step_expansions = std::max(result.max_step_expansions, probs.size());
    ++result.steps;
    std::size_t arg = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t w = 0; w < probs.size(); ++w) {
      if (probs[w] <= 0.0) continue;
      const double lp = std::log(probs[w]);
      if (lp > best) {
        best = lp;
        arg = w;
      }
    }
    require(std::isfinite(best), "greedy_search: every continuation had zero probability");
    h.log_prob += best;
    h.tokens.push_back(arg);
    if (arg == eos) {
      h.finished = true;
      break;
    }
  }
  result.truncated = !h.finished;
  result.best = std::move(h);
  return result;
}

ModelScorer::ModelScorer(const RewriterModel& model, const PreparedExample& example)
    : tape_(std::make_shared<Tape>()), pass_(std::make_shared<ForwardPass>(model, *tape_)) {
  pass_->bind_all();
  enc_ = pass_->encode(example);
  mark_ = tape_->size();
}

std::vector<double> ModelScorer::operator()(const std::vector<std::size_t>& prefix) {
  tape_->truncate(mark_);
  std::vector<std::size_t> prev{Vocabulary::kSos};
  prev.insert(prev.end(), prefix.begin(), prefix.end());
  const DecoderOutput dec = pass_->decode_step(prev, enc_);
  return row_values(pass_->output_distribution(dec, enc_), 0);
}

StepScorer make_scorer(const RewriterModel& model, const PreparedExample& example) {
  ModelScorer scorer(model, example);
  return [scorer](const std::vector<std::size_t>& prefix) mutable { return scorer(prefix); };
}

RewriteResult rewrite(const RewriterModel& model, const PreparedExample& example, std::size_t beam,
                      std::size_t max_len) {
  const SearchResult found = beam_search(make_scorer(model, example), beam, max_len, Vocabulary::kEos);
  RewriteResult out;
  out.log_prob = found.best.log_prob;
  out.truncated = found.truncated;
  out.tokens = found.best.tokens;
  if (!out.tokens.empty() && out.tokens.back() == Vocabulary::kEos) out.tokens.pop_back();
  out.text = resolve_text(model.vocab(), example.text, out.tokens);

  if (model.config().use_pointer && !found.best.tokens.empty()) {
    Tape tape;
    ForwardPass pass(model, tape);
    const EncodedBatch enc = pass.encode(example);
    std::vector<std::size_t> prev{Vocabulary::kSos};
    prev.insert(prev.end(), found.best.tokens.begin(), found.best.tokens.end() - 1);
    const PointerOutput ptr = pass.pointer_mix(pass.decode(prev, enc), enc);
    for (std::size_t t = 0; t < ptr.alpha.rows(); ++t) out.alpha.push_back(row_values(ptr.alpha, t));
  }
  return out;
}

double sequence_log_prob(const RewriterModel& model, const PreparedExample& example,
                         const std::vector<std::size_t>& tokens) {
  require(!tokens.empty(), "sequence_log_prob: empty sequence");
  Tape tape;
  ForwardPass pass(model, tape);
  const EncodedBatch enc = pass.encode(example);
  std::vector<std::size_t> prev{Vocabulary::kSos};
  prev.insert(prev.end(), tokens.begin(), tokens.end() - 1);
  const DTensor dist = pass.output_distribution(pass.decode(prev, enc), enc);
  double lp = 0.0;
  for (std::size_t t = 0; t < tokens.size(); ++t) lp += std::log(dist.value().at(t, tokens[t]));
  return lp;
}

}  // namespace mcqr
