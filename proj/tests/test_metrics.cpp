#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "mcqr/metrics.hpp"
#include "mcqr/rng.hpp"
#include "metric_oracles.hpp"

using namespace mcqr;


namespace {

// Words with shared stems so stem matching is exercised.
const std::vector<std::string> kWords = {"the", "dog", "dogs", "sit", "sits", "sitting", "is",
                                         "a",   "cat", "red", "quick", "quickly", "he", "ball"};

std::string random_sentence(Rng& rng, std::size_t min_len, std::size_t max_len) {
  const std::size_t n = min_len + rng.below(max_len - min_len + 1);
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + kWords[rng.below(kWords.size())];
  return s;
}

struct RandomCorpus {
  Sentences c, r, q;
};

// Candidates and references share a query-derived core so overlap is common.
RandomCorpus random_corpus(std::uint64_t seed, std::size_t n = 50) {
  Rng rng(seed);
  RandomCorpus out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string q = random_sentence(rng, 1, 4);
    out.q.push_back(q);
    out.r.push_back(rng.bernoulli(0.3) ? q : q + " " + random_sentence(rng, 1, 3));
    out.c.push_back(rng.bernoulli(0.3) ? out.r.back() : random_sentence(rng, 1, 4) + " " + q);
  }
  return out;
}

}  // namespace

// worked examples

TEST(Bleu, IdentityAndDisjoint) {
  EXPECT_DOUBLE_EQ(bleu({"is the dog sitting"}, {"is the dog sitting"}, 4), 100.0);
  EXPECT_EQ(bleu({"red ball"}, {"the dog"}, 2), 0.0);
  EXPECT_THROW(bleu({}, {}, 2), ContractViolation);
  EXPECT_THROW(bleu({"a"}, {"a", "b"}, 2), ContractViolation);
}

TEST(Bleu, ShortCandidateMatchesCountingOracle) {
  const Sentences c{"the cat sat"}, r{"the cat sat down"};
  // p1 = p2 = 1, brevity penalty exp(1 - 4/3).
  EXPECT_NEAR(bleu(c, r, 2), 100.0 * std::exp(1.0 - 4.0 / 3.0), 1e-12);
  EXPECT_NEAR(bleu(c, r, 2), oracle::bleu(c, r, 2), 1e-12);
  EXPECT_EQ(bleu(c, r, 4), 0.0);  // no 4-gram in the candidate
}

TEST(Rouge, WorkedExamples) {
  EXPECT_DOUBLE_EQ(rouge({"a b c"}, {"a b c"}, RougeVariant::Bigram), 100.0);
  EXPECT_DOUBLE_EQ(rouge({"a b c"}, {"a b c"}, RougeVariant::Lcs), 100.0);
  EXPECT_NEAR(rouge({"a b c"}, {"a x c"}, RougeVariant::Lcs), 200.0 / 3.0, 1e-12);
  EXPECT_EQ(rouge({"dog"}, {"the dog"}, RougeVariant::Bigram), 0.0);
  EXPECT_EQ(rouge({"dog"}, {"dog"}, RougeVariant::Bigram), 0.0);  // no bigrams on either side
}

TEST(Meteor, WorkedExamples) {
  // m=3, one chunk.
  EXPECT_NEAR(meteor_lite({"a b c"}, {"a b c"}), 100.0 * (1.0 - 0.5 / 27.0), 1e-12);
  EXPECT_EQ(meteor_lite({"red ball"}, {"the dog"}), 0.0);
  // m=2, P=R=2/3 so F_mean=2/3; chunks=2 gives penalty 0.5.
  EXPECT_NEAR(meteor_lite({"the dog sat"}, {"the cat sat"}), 100.0 / 3.0, 1e-12);
}

TEST(Meteor, StemStageAndAlignmentOrder) {
  EXPECT_EQ(lite_stem("sitting"), "sitt");
  EXPECT_EQ(lite_stem("dogs"), "dog");
  EXPECT_EQ(lite_stem("is"), "is");
  EXPECT_EQ(lite_stem("quickly"), "quick");
  const auto a = meteor_align(tokenize("the dogs sit"), tokenize("the dog sits"));
  EXPECT_EQ(a.exact, 1u);
  EXPECT_EQ(a.pairs.size(), 3u);
  EXPECT_EQ(a.chunks, 1u);
  // Two "the" on the reference side: pick the one keeping a single chunk.
  const auto b = meteor_align(tokenize("the dog"), tokenize("the cat the dog"));
  EXPECT_EQ(b.chunks, 1u);
  EXPECT_EQ(b.pairs, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 2}, {1, 3}}));
}

TEST(ExactMatch, FourPositiveTwoNegativeFixture) {
  const Sentences q{"is he red", "is it big", "what is it", "and her", "is it red", "who is that"};
  const Sentences r{"is the dog red", "is the cat big", "what is the ball", "and the girl",
                    "is it red", "who is that"};
  const Sentences c{"is the dog red", "is the cat big", "what is the ball", "and her",
                    "is it red", "who is he"};
  const ExactMatch em = exact_match(c, r, q);
  EXPECT_EQ(em.positive_count, 4u);
  EXPECT_EQ(em.negative_count, 2u);
  EXPECT_EQ(*em.positive, 75.0);
  EXPECT_EQ(*em.negative, 50.0);
}

TEST(ExactMatch, EmptyClassIsAbsent) {
  const ExactMatch em = exact_match({"is it red"}, {"is it red"}, {"is it red"});
  EXPECT_FALSE(em.positive.has_value());
  EXPECT_EQ(*em.negative, 100.0);
  EXPECT_EQ(*exact_match({"IS  It Red?"}, {"is it red ?"}, {"x"}).positive, 100.0);
}

TEST(SpanPrf, WorkedExample) {
  const Prf p = span_prf({"is the cat sitting"}, {"is the dog sitting"}, {"is he sitting"});
  EXPECT_DOUBLE_EQ(p.precision, 0.5);
  EXPECT_DOUBLE_EQ(p.recall, 0.5);
  EXPECT_DOUBLE_EQ(p.f1, 0.5);
  const Prf same = span_prf({"is the dog sitting"}, {"is the dog sitting"}, {"is he sitting"});
  EXPECT_EQ(same.f1, 1.0);
  const Prf none = span_prf({"is he sitting"}, {"is the dog sitting"}, {"is he sitting"});
  EXPECT_EQ(none.precision, 0.0);
  EXPECT_EQ(none.recall, 0.0);
  EXPECT_EQ(none.utterances, 1u);
  const Prf skipped = span_prf({"is he sitting"}, {"is he sitting"}, {"is he sitting"});
  EXPECT_EQ(skipped.utterances, 0u);
}

TEST(SpanPrf, FilterSelectsLabelledExamples) {
  const Sentences q{"is he sitting", "and the cat"};
  const Sentences r{"is the dog sitting", "is the cat sitting"};
  const Sentences c{"is the dog sitting", "and the cat"};
  const std::vector<std::vector<Phenomenon>> labels{{Phenomenon::Coreference}, {Phenomenon::Ellipsis}};
  EXPECT_EQ(span_prf(c, r, q, labels, Phenomenon::Coreference).f1, 1.0);
  EXPECT_EQ(span_prf(c, r, q, labels, Phenomenon::Ellipsis).f1, 0.0);
}

// oracle agreement on random corpora

TEST(MetricOracles, FiftyRandomPairsAgree) {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const RandomCorpus k = random_corpus(seed);
    EXPECT_NEAR(bleu(k.c, k.r, 2), oracle::bleu(k.c, k.r, 2), 1e-9);
    EXPECT_NEAR(bleu(k.c, k.r, 4), oracle::bleu(k.c, k.r, 4), 1e-9);
    EXPECT_NEAR(rouge(k.c, k.r, RougeVariant::Bigram), oracle::rouge2(k.c, k.r), 1e-9);
    EXPECT_NEAR(rouge(k.c, k.r, RougeVariant::Lcs), oracle::rougeL(k.c, k.r), 1e-9);
    EXPECT_NEAR(meteor_lite(k.c, k.r), oracle::meteor(k.c, k.r), 1e-9);
    const ExactMatch em = exact_match(k.c, k.r, k.q);
    const auto [pos, neg] = oracle::em(k.c, k.r, k.q);
    EXPECT_NEAR(em.positive.value_or(NAN), pos, 1e-9);
    EXPECT_NEAR(em.negative.value_or(NAN), neg, 1e-9);
    const Prf p = span_prf(k.c, k.r, k.q);
    const auto [op, orr, of] = oracle::prf(k.c, k.r, k.q);
    EXPECT_NEAR(p.precision, op, 1e-9);
    EXPECT_NEAR(p.recall, orr, 1e-9);
    EXPECT_NEAR(p.f1, of, 1e-9);
  }
}

TEST(MetricOracles, SingleSentencePairsAgree) {
  Rng rng(99);
  for (int i = 0; i < 200; ++i) {
    const Sentences c{random_sentence(rng, 1, 6)}, r{random_sentence(rng, 1, 6)};
    EXPECT_NEAR(meteor_lite(c, r), oracle::meteor(c, r), 1e-9) << c[0] << " | " << r[0];
    EXPECT_NEAR(rouge(c, r, RougeVariant::Lcs), oracle::rougeL(c, r), 1e-9);
    EXPECT_NEAR(rouge(c, r, RougeVariant::Bigram), oracle::rouge2(c, r), 1e-9);
  }
}

// properties

TEST(MetricProperties, IdenticalCorporaScoreFull) {
  const RandomCorpus k = random_corpus(5);
  Sentences long_refs;
  for (const auto& s : k.r) long_refs.push_back(s + " zz");  // at least two tokens
  EXPECT_NEAR(bleu(long_refs, long_refs, 2), 100.0, 1e-9);
  EXPECT_NEAR(rouge(long_refs, long_refs, RougeVariant::Bigram), 100.0, 1e-9);
  EXPECT_NEAR(rouge(long_refs, long_refs, RougeVariant::Lcs), 100.0, 1e-9);
}

TEST(MetricProperties, PermutationSymmetricAndPure) {
  RandomCorpus k = random_corpus(6);
  const double b = bleu(k.c, k.r, 4), rl = rouge(k.c, k.r, RougeVariant::Lcs), m = meteor_lite(k.c, k.r);
  EXPECT_EQ(bleu(k.c, k.r, 4), b);
  std::reverse(k.c.begin(), k.c.end());
  std::reverse(k.r.begin(), k.r.end());
  EXPECT_NEAR(bleu(k.c, k.r, 4), b, 1e-12);
  EXPECT_NEAR(rouge(k.c, k.r, RougeVariant::Lcs), rl, 1e-9);
  EXPECT_NEAR(meteor_lite(k.c, k.r), m, 1e-9);
}

TEST(MetricProperties, BleuTwoAtLeastBleuFour) {
  for (std::uint64_t seed = 10; seed < 40; ++seed) {
    const RandomCorpus k = random_corpus(seed, 20);
    EXPECT_GE(bleu(k.c, k.r, 2), bleu(k.c, k.r, 4)) << seed;
  }
}

TEST(MetricProperties, SpanPrfIgnoresCase) {
  RandomCorpus k = random_corpus(7);
  const Prf base = span_prf(k.c, k.r, k.q);
  for (auto& s : k.c) std::transform(s.begin(), s.end(), s.begin(), ::toupper);
  const Prf upper = span_prf(k.c, k.r, k.q);
  EXPECT_EQ(base.precision, upper.precision);
  EXPECT_EQ(base.recall, upper.recall);
}

TEST(EvalReport, BundleAndBuckets) {
  EvalInput in;
  in.candidates = {"is the dog red", "is it big", "who is that"};
  in.references = {"is the dog red", "is the cat big", "who is that"};
  in.queries = {"is it red", "is it big", "who is that"};
  in.labels = {{Phenomenon::Coreference}, {Phenomenon::Coreference}, {}};
  in.history_turns = {0, 3, 9};
  const EvalReport rep = evaluate_predictions(in, true);
  EXPECT_EQ(rep.examples, 3u);
  EXPECT_EQ(*rep.em_pos, 50.0);
  EXPECT_EQ(*rep.em_neg, 100.0);
  EXPECT_EQ(rep.coref.precision, 50.0);  // second utterance restores nothing
  EXPECT_NEAR(rep.coref.f1, 2 * rep.coref.precision * rep.coref.recall /
                                (rep.coref.precision + rep.coref.recall), 1e-9);
  ASSERT_EQ(rep.per_bucket.size(), 3u);
  EXPECT_EQ(rep.per_bucket.at("0-1").examples, 1u);
  EXPECT_EQ(rep.per_bucket.at("8+").examples, 1u);
  const auto j = to_json(rep);
  EXPECT_TRUE(j.contains("meteor-lite"));
  EXPECT_TRUE(j.at("per_bucket").contains("2-3"));
  const std::string csv = to_csv(rep);
  EXPECT_EQ(csv.substr(0, csv.find(',')), "scope");
  EXPECT_NE(csv.find("\n8+,"), std::string::npos);
}
