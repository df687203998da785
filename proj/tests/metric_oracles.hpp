#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "mcqr/text.hpp"

// Reference implementations written straight from the formulas. They share
// only the tokenizer with the library.
namespace oracle {

using Sentences = std::vector<std::string>;
using mcqr::tokenize;
using Toks = std::vector<std::string>;

inline std::map<Toks, int> ngrams(const Toks& t, std::size_t n) {
  std::map<Toks, int> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Toks(t.begin() + i, t.begin() + i + n)];
  return out;
}

inline double bleu(const Sentences& c, const Sentences& r, int max_n) {
  double log_sum = 0.0;
  double clen = 0, rlen = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    clen += tokenize(c[i]).size();
    rlen += tokenize(r[i]).size();
  }
  for (int n = 1; n <= max_n; ++n) {
    double hit = 0, total = 0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      const auto cg = ngrams(tokenize(c[i]), n), rg = ngrams(tokenize(r[i]), n);
      for (const auto& [g, k] : cg) {
        total += k;
        const auto it = rg.find(g);
        if (it != rg.end()) hit += std::min(k, it->second);
      }
    }
    if (hit == 0) return 0.0;
    log_sum += std::log(hit / total) / max_n;
  }
  const double bp = clen > rlen ? 1.0 : std::exp(1.0 - rlen / clen);
  return 100.0 * bp * std::exp(log_sum);
}

inline double f1(double p, double r) { return p + r == 0 ? 0.0 : 2 * p * r / (p + r); }

inline double rouge2(const Sentences& c, const Sentences& r) {
  double sum = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto cg = ngrams(tokenize(c[i]), 2), rg = ngrams(tokenize(r[i]), 2);
    double nc = 0, nr = 0, hit = 0;
    for (const auto& [g, k] : cg) nc += k;
    for (const auto& [g, k] : rg) nr += k;
    for (const auto& [g, k] : cg)
      if (rg.count(g)) hit += std::min(k, rg.at(g));
    if (nc > 0 && nr > 0) sum += f1(hit / nc, hit / nr);
  }
  return 100.0 * sum / static_cast<double>(c.size());
}

// LCS by memoised recursion (the library uses a table).
std::size_t lcs(const Toks& a, const Toks& b, std::size_t i, std::size_t j,
                std::map<std::pair<std::size_t, std::size_t>, std::size_t>& memo) {
  if (i == a.size() || j == b.size()) return 0;
  const auto key = std::make_pair(i, j);
  if (auto it = memo.find(key); it != memo.end()) return it->second;
  const std::size_t v = a[i] == b[j] ? 1 + lcs(a, b, i + 1, j + 1, memo)
                                     : std::max(lcs(a, b, i + 1, j, memo), lcs(a, b, i, j + 1, memo));
  return memo[key] = v;
}

inline double rougeL(const Sentences& c, const Sentences& r) {
  double sum = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const Toks a = tokenize(c[i]), b = tokenize(r[i]);
    if (a.empty() || b.empty()) continue;
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
    const double l = static_cast<double>(lcs(a, b, 0, 0, memo));
    sum += f1(l / a.size(), l / b.size());
  }
  return 100.0 * sum / static_cast<double>(c.size());
}

inline std::string stem(std::string w) {
  for (const std::string suf : {"ing", "ed", "es", "s", "ly"})
    if (w.size() >= suf.size() + 3 && w.compare(w.size() - suf.size(), suf.size(), suf) == 0)
      return w.substr(0, w.size() - suf.size());
  return w;
}

struct Best {
  int exact = -1, stemmed = -1, chunks = 0;
};

inline int count_chunks(std::vector<std::pair<std::size_t, std::size_t>> pairs) {
  std::sort(pairs.begin(), pairs.end());
  int chunks = 0;
  for (std::size_t k = 0; k < pairs.size(); ++k)
    if (k == 0 || pairs[k].first != pairs[k - 1].first + 1 || pairs[k].second != pairs[k - 1].second + 1)
      ++chunks;
  return chunks;
}

// Every partial matching of candidate positions to reference positions.
void search(const Toks& c, const Toks& r, std::size_t i, std::vector<bool>& used,
            std::vector<std::pair<std::size_t, std::size_t>>& pairs, int exact, int stemmed, Best& best) {
  if (i == c.size()) {
    const int ch = count_chunks(pairs);
    if (exact > best.exact || (exact == best.exact && stemmed > best.stemmed) ||
        (exact == best.exact && stemmed == best.stemmed && ch < best.chunks))
      best = {exact, stemmed, ch};
    return;
  }
  search(c, r, i + 1, used, pairs, exact, stemmed, best);
  for (std::size_t j = 0; j < r.size(); ++j) {
    if (used[j]) continue;
    const bool ex = c[i] == r[j], st = !ex && stem(c[i]) == stem(r[j]);
    if (!ex && !st) continue;
    used[j] = true;
    pairs.push_back({i, j});
    search(c, r, i + 1, used, pairs, exact + ex, stemmed + st, best);
    pairs.pop_back();
    used[j] = false;
  }
}

inline double meteor(const Sentences& c, const Sentences& r) {
  double sum = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const Toks a = tokenize(c[i]), b = tokenize(r[i]);
    Best best;
    std::vector<bool> used(b.size(), false);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    search(a, b, 0, used, pairs, 0, 0, best);
    const double m = best.exact + best.stemmed;
    if (m == 0) continue;
    const double p = m / a.size(), rec = m / b.size();
    const double fmean = 10 * p * rec / (rec + 9 * p);
    sum += fmean * (1 - 0.5 * std::pow(best.chunks / m, 3));
  }
  return 100.0 * sum / static_cast<double>(c.size());
}

inline std::pair<double, double> em(const Sentences& c, const Sentences& r, const Sentences& q) {
  double ph = 0, pn = 0, nh = 0, nn = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const bool neg = tokenize(r[i]) == tokenize(q[i]);
    const bool hit = tokenize(c[i]) == tokenize(r[i]);
    (neg ? nn : pn) += 1;
    (neg ? nh : ph) += hit;
  }
  return {pn ? 100 * ph / pn : NAN, nn ? 100 * nh / nn : NAN};
}

Toks restored(const std::string& s, const std::string& q) {
  Toks a = tokenize(s), b = tokenize(q);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  Toks out;
  std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

inline std::tuple<double, double, double> prf(const Sentences& c, const Sentences& r, const Sentences& q) {
  double ps = 0, rs = 0, n = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const Toks pred = restored(c[i], q[i]), gold = restored(r[i], q[i]);
    if (pred.empty() && gold.empty()) continue;
    Toks both;
    std::set_intersection(pred.begin(), pred.end(), gold.begin(), gold.end(), std::back_inserter(both));
    ps += pred.empty() ? 0 : static_cast<double>(both.size()) / pred.size();
    rs += gold.empty() ? 0 : static_cast<double>(both.size()) / gold.size();
    n += 1;
  }
  if (n == 0) return {0, 0, 0};
  return {ps / n, rs / n, f1(ps / n, rs / n)};
}

}  // namespace oracle
