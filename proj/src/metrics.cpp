#include "mcqr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>

#include "mcqr/csv.hpp"
#include "mcqr/text.hpp"

namespace mcqr {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

using Tokens = std::vector<std::string>;
using Counts = std::map<Tokens, std::size_t>;

void require_pairs(const Sentences& c, const Sentences& r, const char* what) {
  require(!c.empty(), std::string(what) + ": empty corpus");
  require(c.size() == r.size(), std::string(what) + ": candidate and reference counts differ");
}

Counts ngrams(const Tokens& t, std::size_t n) {
  Counts out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + i, t.begin() + i + n)];
  return out;
}

std::size_t overlap(const Counts& a, const Counts& b) {
  std::size_t k = 0;
  for (const auto& [g, n] : a) {
    const auto it = b.find(g);
    if (it != b.end()) k += std::min(n, it->second);
  }
  return k;
}

std::size_t total(const Counts& c) {
  std::size_t k = 0;
  for (const auto& [g, n] : c) k += n;
  return k;
}

double f1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

std::size_t lcs(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::map<std::string, std::size_t> bag(const Tokens& t) {
  std::map<std::string, std::size_t> out;
  for (const auto& w : t) ++out[w];
  return out;
}

// a − b as multisets.
std::map<std::string, std::size_t> minus(const std::map<std::string, std::size_t>& a,
                                         const std::map<std::string, std::size_t>& b) {
  std::map<std::string, std::size_t> out;
  for (const auto& [w, n] : a) {
    const auto it = b.find(w);
    const std::size_t m = it == b.end() ? 0 : it->second;
    if (n > m) out[w] = n - m;
  }
  return out;
}

std::size_t bag_size(const std::map<std::string, std::size_t>& b) {
  std::size_t k = 0;
  for (const auto& [w, n] : b) k += n;
  return k;
}

std::size_t bag_overlap(const std::map<std::string, std::size_t>& a,
                        const std::map<std::string, std::size_t>& b) {
  std::size_t k = 0;
  for (const auto& [w, n] : a) {
    const auto it = b.find(w);
    if (it != b.end()) k += std::min(n, it->second);
  }
  return k;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::size_t count_chunks(std::vector<std::pair<std::size_t, std::size_t>> pairs) {
  if (pairs.empty()) return 0;
  std::sort(pairs.begin(), pairs.end());
  std::size_t chunks = 1;
  for (std::size_t k = 1; k < pairs.size(); ++k)
    if (pairs[k].first != pairs[k - 1].first + 1 || pairs[k].second != pairs[k - 1].second + 1)
      ++chunks;
  return chunks;
}

}  // namespace

double bleu(const Sentences& candidates, const Sentences& references, int max_n) {
  require_pairs(candidates, references, "bleu");
  require(max_n >= 1, "bleu: max_n must be >= 1");
  std::vector<std::size_t> matched(static_cast<std::size_t>(max_n), 0), possible(matched);
  std::size_t c_len = 0, r_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Tokens c = tokenize(candidates[i]), r = tokenize(references[i]);
    c_len += c.size();
    r_len += r.size();
    for (std::size_t n = 1; n <= static_cast<std::size_t>(max_n); ++n) {
      const Counts cg = ngrams(c, n);
      matched[n - 1] += overlap(cg, ngrams(r, n));
      possible[n - 1] += total(cg);
    }
  }
  double log_sum = 0.0;
  for (std::size_t n = 0; n < matched.size(); ++n) {
    if (matched[n] == 0 || possible[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched[n]) / static_cast<double>(possible[n]));
  }
  const double bp =
      c_len > r_len ? 1.0 : std::exp(1.0 - static_cast<double>(r_len) / static_cast<double>(c_len));
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(max_n));
}

double rouge(const Sentences& candidates, const Sentences& references, RougeVariant variant) {
  require_pairs(candidates, references, "rouge");
  double sum = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Tokens c = tokenize(candidates[i]), r = tokenize(references[i]);
    double hit = 0.0, nc = 0.0, nr = 0.0;
    if (variant == RougeVariant::Bigram) {
      const Counts cg = ngrams(c, 2), rg = ngrams(r, 2);
      hit = static_cast<double>(overlap(cg, rg));
      nc = static_cast<double>(total(cg));
      nr = static_cast<double>(total(rg));
    } else {
      hit = static_cast<double>(lcs(c, r));
      nc = static_cast<double>(c.size());
      nr = static_cast<double>(r.size());
    }
    if (nc > 0.0 && nr > 0.0) sum += f1(hit / nc, hit / nr);
  }
  return 100.0 * sum / static_cast<double>(candidates.size());
}

std::string lite_stem(const std::string& token) {
  for (const char* suffix : {"ing", "ed", "es", "s", "ly"}) {
    const std::string s(suffix);
    if (ends_with(token, s) && token.size() - s.size() >= 3) return token.substr(0, token.size() - s.size());
  }
  return token;
}

MeteorAlignment meteor_align(const std::vector<std::string>& cand,
                             const std::vector<std::string>& ref, std::size_t max_states) {
  const std::size_t nc = cand.size(), nr = ref.size();
  std::vector<std::string> cs(nc), rs(nr);
  for (std::size_t i = 0; i < nc; ++i) cs[i] = lite_stem(cand[i]);
  for (std::size_t j = 0; j < nr; ++j) rs[j] = lite_stem(ref[j]);

  // options[i]: reference positions candidate i may align to, exact ones first.
  std::vector<std::vector<std::size_t>> options(nc);
  for (std::size_t i = 0; i < nc; ++i) {
    for (std::size_t j = 0; j < nr; ++j)
      if (cand[i] == ref[j]) options[i].push_back(j);
    for (std::size_t j = 0; j < nr; ++j)
      if (cand[i] != ref[j] && cs[i] == rs[j]) options[i].push_back(j);
  }

  struct Score {
    std::size_t exact = 0, matches = 0, chunks = 0;
    bool operator>(const Score& o) const {
      if (exact != o.exact) return exact > o.exact;
      if (matches != o.matches) return matches > o.matches;
      return chunks < o.chunks;
    }
  };

  MeteorAlignment best;
  Score best_score;
  bool have_best = false;
  std::vector<std::pair<std::size_t, std::size_t>> cur;
  std::vector<bool> used(nr, false);
  std::size_t states = 0;
  bool exhausted = false;

  auto evaluate = [&] {
    Score s;
    for (const auto& [i, j] : cur) {
      ++s.matches;
      if (cand[i] == ref[j]) ++s.exact;
    }
    s.chunks = count_chunks(cur);
    if (!have_best || s > best_score) {
      best_score = s;
      best.pairs = cur;
      best.exact = s.exact;
      best.chunks = s.chunks;
      have_best = true;
    }
  };

  std::function<void(std::size_t, std::size_t, std::size_t)> search =
      [&](std::size_t i, std::size_t exact, std::size_t matches) {
        if (++states > max_states) {
          exhausted = true;
          return;
        }
        if (i == nc) {
          evaluate();
          return;
        }
        // Bound: even matching every remaining candidate cannot beat the best.
        if (have_best) {
          const std::size_t rest = nc - i;
          if (exact + rest < best_score.exact) return;
          if (exact + rest == best_score.exact && matches + rest < best_score.matches) return;
        }
        for (std::size_t j : options[i]) {
          if (used[j]) continue;
          used[j] = true;
          cur.emplace_back(i, j);
          search(i + 1, exact + (cand[i] == ref[j] ? 1 : 0), matches + 1);
          cur.pop_back();
          used[j] = false;
          if (exhausted) return;
        }
        search(i + 1, exact, matches);
      };
  search(0, 0, 0);

  if (exhausted) {
    // Greedy: exact matches left to right, then stem matches, nearest first.
    best = MeteorAlignment{};
    std::vector<bool> cu(nc, false), ru(nr, false);
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t i = 0; i < nc; ++i) {
        if (cu[i]) continue;
        for (std::size_t j = 0; j < nr; ++j) {
          if (ru[j]) continue;
          const bool ok = pass == 0 ? cand[i] == ref[j] : cs[i] == rs[j];
          if (!ok) continue;
          cu[i] = ru[j] = true;
          best.pairs.emplace_back(i, j);
          if (cand[i] == ref[j]) ++best.exact;
          break;
        }
      }
    best.chunks = count_chunks(best.pairs);
  }
  std::sort(best.pairs.begin(), best.pairs.end());
  return best;
}

double meteor_lite(const Sentences& candidates, const Sentences& references) {
  require_pairs(candidates, references, "meteor_lite");
  double sum = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Tokens c = tokenize(candidates[i]), r = tokenize(references[i]);
    const MeteorAlignment a = meteor_align(c, r);
    const double m = static_cast<double>(a.pairs.size());
    if (m == 0.0) continue;
    const double p = m / static_cast<double>(c.size());
    const double rec = m / static_cast<double>(r.size());
    const double fmean = 10.0 * p * rec / (rec + 9.0 * p);
    const double penalty = 0.5 * std::pow(static_cast<double>(a.chunks) / m, 3.0);
    sum += fmean * (1.0 - penalty);
  }
  return 100.0 * sum / static_cast<double>(candidates.size());
}

ExactMatch exact_match(const Sentences& candidates, const Sentences& references,
                       const Sentences& queries) {
  require(candidates.size() == references.size() && references.size() == queries.size(),
          "exact_match: lists must be aligned");
  ExactMatch em;
  std::size_t pos_hit = 0, neg_hit = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const std::string ref = normalize(references[i]);
    const bool hit = normalize(candidates[i]) == ref;
    if (ref == normalize(queries[i])) {
      ++em.negative_count;
      neg_hit += hit;
    } else {
      ++em.positive_count;
      pos_hit += hit;
    }
  }
  if (em.positive_count > 0)
    em.positive = 100.0 * static_cast<double>(pos_hit) / static_cast<double>(em.positive_count);
  if (em.negative_count > 0)
    em.negative = 100.0 * static_cast<double>(neg_hit) / static_cast<double>(em.negative_count);
  return em;
}

Prf span_prf(const Sentences& candidates, const Sentences& references, const Sentences& queries) {
  require(candidates.size() == references.size() && references.size() == queries.size(),
          "span_prf: lists must be aligned");
  Prf out;
  double psum = 0.0, rsum = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto q = bag(tokenize(queries[i]));
    const auto gold = minus(bag(tokenize(references[i])), q);
    const auto pred = minus(bag(tokenize(candidates[i])), q);
    const std::size_t ng = bag_size(gold), np = bag_size(pred);
    if (ng == 0 && np == 0) continue;
    const double hit = static_cast<double>(bag_overlap(pred, gold));
    psum += np > 0 ? hit / static_cast<double>(np) : 0.0;
    rsum += ng > 0 ? hit / static_cast<double>(ng) : 0.0;
    ++out.utterances;
  }
  if (out.utterances > 0) {
    out.precision = psum / static_cast<double>(out.utterances);
    out.recall = rsum / static_cast<double>(out.utterances);
    out.f1 = f1(out.precision, out.recall);
  }
  return out;
}

Prf span_prf(const Sentences& candidates, const Sentences& references, const Sentences& queries,
             const std::vector<std::vector<Phenomenon>>& labels, Phenomenon filter) {
  require(labels.size() == candidates.size(), "span_prf: labels must be aligned");
  Sentences c, r, q;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (std::find(labels[i].begin(), labels[i].end(), filter) == labels[i].end()) continue;
    c.push_back(candidates[i]);
    r.push_back(references[i]);
    q.push_back(queries[i]);
  }
  return span_prf(c, r, q);
}

namespace {

Prf scaled(Prf p) {
  p.precision *= 100.0;
  p.recall *= 100.0;
  p.f1 *= 100.0;
  return p;
}

EvalReport evaluate_flat(const EvalInput& in) {
  EvalReport rep;
  rep.examples = in.candidates.size();
  rep.bleu2 = bleu(in.candidates, in.references, 2);
  rep.bleu4 = bleu(in.candidates, in.references, 4);
  rep.rouge2 = rouge(in.candidates, in.references, RougeVariant::Bigram);
  rep.rougeL = rouge(in.candidates, in.references, RougeVariant::Lcs);
  rep.meteor = meteor_lite(in.candidates, in.references);
  const ExactMatch em = exact_match(in.candidates, in.references, in.queries);
  rep.em_pos = em.positive;
  rep.em_neg = em.negative;
  rep.em_pos_count = em.positive_count;
  rep.em_neg_count = em.negative_count;
  rep.coref = scaled(span_prf(in.candidates, in.references, in.queries, in.labels,
                              Phenomenon::Coreference));
  rep.ellipsis =
      scaled(span_prf(in.candidates, in.references, in.queries, in.labels, Phenomenon::Ellipsis));
  return rep;
}

ordered_json optional_json(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

ordered_json prf_json(const Prf& p) {
  ordered_json j;
  j["precision"] = p.precision;
  j["recall"] = p.recall;
  j["f1"] = p.f1;
  j["utterances"] = p.utterances;
  return j;
}

ordered_json flat_json(const EvalReport& r) {
  ordered_json j;
  j["examples"] = r.examples;
  j["bleu2"] = r.bleu2;
  j["bleu4"] = r.bleu4;
  j["rouge2"] = r.rouge2;
  j["rougeL"] = r.rougeL;
  j["meteor-lite"] = r.meteor;
  j["em_pos"] = optional_json(r.em_pos);
  j["em_neg"] = optional_json(r.em_neg);
  j["em_pos_count"] = r.em_pos_count;
  j["em_neg_count"] = r.em_neg_count;
  j["coreference"] = prf_json(r.coref);
  j["ellipsis"] = prf_json(r.ellipsis);
  return j;
}

std::string num(double v) { return json(v).dump(); }
std::string num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

std::string csv_row(const std::string& scope, const EvalReport& r) {
  return csv::join({scope, std::to_string(r.examples), num(r.bleu2), num(r.bleu4), num(r.rouge2),
                    num(r.rougeL), num(r.meteor), num(r.em_pos), num(r.em_neg),
                    num(r.coref.precision), num(r.coref.recall), num(r.coref.f1),
                    num(r.ellipsis.precision), num(r.ellipsis.recall), num(r.ellipsis.f1)});
}

}  // namespace

EvalReport evaluate_predictions(const EvalInput& in, bool by_bucket) {
  const std::size_t n = in.candidates.size();
  require(in.references.size() == n && in.queries.size() == n && in.labels.size() == n &&
              in.history_turns.size() == n,
          "evaluate_predictions: inputs must be aligned");
  EvalReport rep = evaluate_flat(in);
  if (!by_bucket) return rep;
  for (const auto& label : turn_bucket_labels()) {
    EvalInput sub;
    for (std::size_t i = 0; i < n; ++i) {
      if (turn_bucket(in.history_turns[i]) != label) continue;
      sub.candidates.push_back(in.candidates[i]);
      sub.references.push_back(in.references[i]);
      sub.queries.push_back(in.queries[i]);
      sub.labels.push_back(in.labels[i]);
      sub.history_turns.push_back(in.history_turns[i]);
    }
    if (!sub.candidates.empty()) rep.per_bucket[label] = evaluate_flat(sub);
  }
  return rep;
}

ordered_json to_json(const EvalReport& r) {
  ordered_json j = flat_json(r);
  if (!r.per_bucket.empty()) {
    ordered_json b = ordered_json::object();
    for (const auto& label : turn_bucket_labels()) {
      const auto it = r.per_bucket.find(label);
      if (it != r.per_bucket.end()) b[label] = flat_json(it->second);
    }
    j["per_bucket"] = std::move(b);
  }
  return j;
}

std::string to_csv(const EvalReport& r) {
  std::ostringstream out;
  out << "scope,examples,bleu2,bleu4,rouge2,rougeL,meteor_lite,em_pos,em_neg,coref_p,coref_r,"
         "coref_f1,ellipsis_p,ellipsis_r,ellipsis_f1\n";
  out << csv_row("all", r) << '\n';
  for (const auto& label : turn_bucket_labels()) {
    const auto it = r.per_bucket.find(label);
    if (it != r.per_bucket.end()) out << csv_row(label, it->second) << '\n';
  }
  return out.str();
}

}  // namespace mcqr
