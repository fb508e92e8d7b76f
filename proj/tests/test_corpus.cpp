#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mlongt5/corpus.hpp"
#include "oracles.hpp"

using namespace mlongt5;
namespace fs = std::filesystem;

namespace {

fs::path write_temp(const std::string& name, const std::string& content) {
  const fs::path p = fs::temp_directory_path() / ("mlongt5_corpus_" + name);
  std::ofstream(p) << content;
  return p;
}

std::string error_of(const std::string& content) {
  const auto p = write_temp("err.jsonl", content);
  try {
    ingest_jsonl(p.string());
  } catch (const InputError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Ingest, ReadsDocumentsInOrder) {
  const auto p = write_temp("ok.jsonl",
                            "{\"lang\":\"fr\",\"text\":\"bonjour\"}\n"
                            "{\"lang\":\"de\",\"text\":\"hallo\",\"extra\":1}\n");
  const auto docs = ingest_jsonl(p.string());
  ASSERT_EQ(docs.size(), 2u);
  EXPECT_EQ(docs[0], (Document{"fr", "bonjour"}));
  EXPECT_EQ(docs[1], (Document{"de", "hallo"}));
}

TEST(Ingest, EmptyFile) {
  const auto p = write_temp("empty.jsonl", "");
  EXPECT_TRUE(ingest_jsonl(p.string()).empty());
}

TEST(Ingest, LazyReaderYieldsOneAtATime) {
  const auto p = write_temp("lazy.jsonl", "{\"lang\":\"fr\",\"text\":\"a\"}\nnot json\n");
  JsonlCorpusReader r(p.string());
  auto first = r.next();
  ASSERT_TRUE(first.has_value());
  EXPECT_EQ(first->text, "a");
  EXPECT_THROW(r.next(), InputError);
}

TEST(Ingest, Errors) {
  EXPECT_EQ(error_of("{\"text\":\"x\"}\n"), "line 1: missing field lang");
  EXPECT_EQ(error_of("{\"lang\":\"fr\",\"text\":\"x\"}\n{\"lang\":\"fr\"}\n"), "line 2: missing field text");
  EXPECT_NE(error_of("{\"lang\":\"fr\",\"text\":\"x\"}\n{oops\n").find("line 2"), std::string::npos);
  EXPECT_NE(error_of("{\"lang\":\"f r\",\"text\":\"x\"}\n").find("whitespace"), std::string::npos);
  EXPECT_NE(error_of("{\"lang\":\"fr\",\"text\":\"\"}\n").find("empty"), std::string::npos);
  EXPECT_THROW(ingest_jsonl("/nonexistent/corpus.jsonl"), InputError);
}

TEST(Stats, EmptyCorpus) {
  const auto s = corpus_stats({}, byte_vocab());
  EXPECT_TRUE(s.by_lang.empty());
  EXPECT_EQ(s.lengths.mean, 0.0);
  EXPECT_EQ(s.lengths.p50, 0u);
  EXPECT_EQ(s.lengths.p90, 0u);
}

TEST(Stats, NearestRankSummary) {
  const std::vector<Document> docs{{"fr", "abc"}, {"fr", "abcde"}};
  const auto s = corpus_stats(docs, byte_vocab());
  ASSERT_EQ(s.by_lang.size(), 1u);
  EXPECT_EQ(s.by_lang.at("fr").token_count, 8u);
  EXPECT_EQ(s.by_lang.at("fr").doc_count, 2u);
  EXPECT_DOUBLE_EQ(s.lengths.mean, 4.0);
  EXPECT_EQ(s.lengths.p50, 3u);
  EXPECT_EQ(s.lengths.p90, 5u);
}

TEST(Stats, KeysPerLanguage) {
  const std::vector<Document> docs{{"fr", "a"}, {"de", "b"}, {"de", "cc"}};
  const auto s = corpus_stats(docs, byte_vocab());
  ASSERT_EQ(s.by_lang.size(), 2u);
  EXPECT_EQ(s.by_lang.at("fr").doc_count, 1u);
  EXPECT_EQ(s.by_lang.at("de").doc_count, 2u);
  EXPECT_EQ(s.by_lang.at("de").token_count, 3u);
}

TEST(Stats, TsvFormat) {
  const std::vector<Document> docs{{"fr", "abc"}, {"fr", "abcde"}};
  std::ostringstream os;
  write_stats_tsv(os, corpus_stats(docs, byte_vocab()));
  EXPECT_EQ(os.str(), "lang\tdoc_count\ttoken_count\nfr\t2\t8\n\nmean\tp50\tp90\n4.00\t3\t5\n");
}

TEST(Unimax, SymmetricSplit) {
  const std::vector<LanguageSize> langs{{"a", 100}, {"b", 100}};
  const auto alloc = unimax_allocate(langs, 100, 1.0);
  EXPECT_EQ(alloc[0].budget_tokens, 50u);
  EXPECT_EQ(alloc[1].budget_tokens, 50u);
  EXPECT_DOUBLE_EQ(alloc[0].probability, 0.5);
  EXPECT_DOUBLE_EQ(alloc[1].probability, 0.5);
}

TEST(Unimax, SmallLanguageCapped) {
  const std::vector<LanguageSize> langs{{"small", 10}, {"big", 1000}};
  const auto alloc = unimax_allocate(langs, 200, 2.0);
  EXPECT_EQ(alloc[0].budget_tokens, 20u);
  EXPECT_EQ(alloc[1].budget_tokens, 180u);
  EXPECT_DOUBLE_EQ(alloc[0].probability, 0.1);
  EXPECT_DOUBLE_EQ(alloc[1].probability, 0.9);
  // Both processing orders of the oracle agree.
  const auto fwd = oracle::waterfill({20, 2000}, 200);
  const auto rev = oracle::waterfill({2000, 20}, 200);
  EXPECT_EQ(fwd[0], oracle::Rational(20));
  EXPECT_EQ(fwd[1], oracle::Rational(180));
  EXPECT_EQ(rev[1], oracle::Rational(20));
  EXPECT_EQ(rev[0], oracle::Rational(180));
}

TEST(Unimax, SingleLanguageCap) {
  const std::vector<LanguageSize> langs{{"x", 50}};
  const auto alloc = unimax_allocate(langs, 1000, 2.0);
  EXPECT_EQ(alloc[0].budget_tokens, 100u);
  EXPECT_DOUBLE_EQ(alloc[0].probability, 1.0);
}

TEST(Unimax, LeftoverStaysWithinCaps) {
  // Five languages of cap 3 sharing 14 tokens: 2.8 each.
  const std::vector<LanguageSize> langs{{"a", 3}, {"b", 3}, {"c", 3}, {"d", 3}, {"e", 3}};
  const auto alloc = unimax_allocate(langs, 14, 1.0);
  std::uint64_t total = 0;
  for (const auto& a : alloc) {
    EXPECT_LE(a.budget_tokens, 3u);
    EXPECT_GE(a.budget_tokens, 2u);
    total += a.budget_tokens;
  }
  EXPECT_EQ(total, 14u);
}

TEST(Unimax, Errors) {
  EXPECT_THROW(unimax_allocate({}, 10, 1.0), InputError);
  const std::vector<LanguageSize> langs{{"a", 3}};
  EXPECT_THROW(unimax_allocate(langs, 0, 1.0), InputError);
  EXPECT_THROW(unimax_allocate(langs, 10, 0.0), InputError);
}

TEST(Unimax, MatchesRationalOracleOnRandomInstances) {
  Rng rng(2024);
  for (int trial = 0; trial < 3000; ++trial) {
    const auto k = 1 + rng.below(5);
    std::vector<LanguageSize> langs;
    std::vector<std::int64_t> caps;
    const double epoch_cap = 1.0 + static_cast<double>(rng.below(3));
    for (std::size_t i = 0; i < k; ++i) {
      const auto size = 1 + rng.below(100);
      langs.push_back({"l" + std::to_string(i), size});
      caps.push_back(static_cast<std::int64_t>(size * epoch_cap));
    }
    const auto budget = 1 + rng.below(600);
    const auto alloc = unimax_allocate(langs, budget, epoch_cap);
    const auto exact = oracle::waterfill(caps, static_cast<std::int64_t>(budget));
    std::int64_t sum = 0, cap_sum = 0;
    double psum = 0;
    for (std::size_t i = 0; i < k; ++i) {
      const auto b = static_cast<std::int64_t>(alloc[i].budget_tokens);
      ASSERT_GE(b, exact[i].floor());
      ASSERT_LE(b, exact[i].ceil());
      ASSERT_LE(b, caps[i]);
      sum += b;
      cap_sum += caps[i];
      psum += alloc[i].probability;
    }
    ASSERT_EQ(sum, std::min<std::int64_t>(static_cast<std::int64_t>(budget), cap_sum));
    ASSERT_NEAR(psum, 1.0, 1e-9);
  }
}

TEST(SampleStream, SingleLanguage) {
  const std::vector<Document> docs{{"fr", "a"}, {"fr", "b"}, {"de", "c"}};
  const std::vector<Allocation> alloc{{"fr", 10, 1.0}};
  SampleStream s(docs, alloc, 3);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(s.next().lang, "fr");
}

TEST(SampleStream, Deterministic) {
  std::vector<Document> docs;
  for (int i = 0; i < 30; ++i) docs.push_back({i % 3 == 0 ? "a" : "b", "doc" + std::to_string(i)});
  const std::vector<Allocation> alloc{{"a", 1, 0.3}, {"b", 1, 0.7}};
  SampleStream s1(docs, alloc, 42), s2(docs, alloc, 42), s3(docs, alloc, 43);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const auto& d1 = s1.next();
    ASSERT_EQ(d1, s2.next());
    differs |= !(d1 == s3.next());
  }
  EXPECT_TRUE(differs);
}

TEST(SampleStream, EpochVisitsEveryDocumentOnce) {
  std::vector<Document> docs;
  for (int i = 0; i < 7; ++i) docs.push_back({"a", std::to_string(i)});
  const std::vector<Allocation> alloc{{"a", 1, 1.0}};
  SampleStream s(docs, alloc, 9);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::set<std::string> seen;
    for (int i = 0; i < 7; ++i) seen.insert(s.next().text);
    EXPECT_EQ(seen.size(), 7u);
  }
}

TEST(SampleStream, FollowsProbabilities) {
  const std::vector<Document> docs{{"a", "x"}, {"b", "y"}};
  const std::vector<Allocation> alloc{{"a", 1, 0.1}, {"b", 9, 0.9}};
  SampleStream s(docs, alloc, 1234);
  int a = 0;
  for (int i = 0; i < 10000; ++i) a += s.next().lang == "a";
  const double frac = a / 10000.0;
  EXPECT_GE(frac, 0.08);
  EXPECT_LE(frac, 0.12);
}

TEST(SampleStream, UnknownLanguage) {
  const std::vector<Document> docs{{"a", "x"}};
  const std::vector<Allocation> alloc{{"zz", 1, 1.0}};
  EXPECT_THROW(SampleStream(docs, alloc, 0), InputError);
}
