#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mlongt5/common.hpp"
#include "mlongt5/tokenizer.hpp"

namespace mlongt5 {

/// A language-tagged unit of raw text.
struct Document {
  std::string lang;
  std::string text;

  bool operator==(const Document&) const = default;
};

inline void validate_document(const Document& d) {
  if (d.lang.empty()) throw InputError("empty language code");
  for (unsigned char c : d.lang) {
    if (std::isspace(c)) throw InputError("language code '" + d.lang + "' contains whitespace");
  }
  if (d.text.empty()) throw InputError("empty document text");
  if (!utf8::valid(d.text)) throw InputError("document text is not valid UTF-8");
}

/// Lazily reads `{"lang": ..., "text": ...}` records, one per line.
/// Errors carry the 1-based line number.
class JsonlCorpusReader {
 public:
  explicit JsonlCorpusReader(const std::string& path) : in_(path) {
    if (!in_) throw InputError("cannot open corpus '" + path + "'");
  }

  std::optional<Document> next() {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) throw InputError(prefix() + "empty line");
      return parse(line);
    }
    return std::nullopt;
  }

  std::size_t line_number() const { return line_no_; }

 private:
  std::string prefix() const { return "line " + std::to_string(line_no_) + ": "; }

  Document parse(const std::string& line) const {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw InputError(prefix() + "malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw InputError(prefix() + "record is not a JSON object");
    Document d;
    for (const char* field : {"lang", "text"}) {
      auto it = j.find(field);
      if (it == j.end()) throw InputError(prefix() + "missing field " + field);
      if (!it->is_string()) throw InputError(prefix() + "field " + field + " is not a string");
    }
    d.lang = j["lang"].get<std::string>();
    d.text = j["text"].get<std::string>();
    try {
      validate_document(d);
    } catch (const InputError& e) {
      throw InputError(prefix() + e.what());
    }
    return d;
  }

  std::ifstream in_;
  std::size_t line_no_ = 0;
};

inline std::vector<Document> ingest_jsonl(const std::string& path) {
  JsonlCorpusReader reader(path);
  std::vector<Document> docs;
  while (auto d = reader.next()) docs.push_back(std::move(*d));
  return docs;
}

struct LanguageStats {
  std::string lang;
  std::uint64_t doc_count = 0;
  std::uint64_t token_count = 0;
};

struct LengthSummary {
  double mean = 0.0;
  std::uint64_t p50 = 0;
  std::uint64_t p90 = 0;
};

struct CorpusStats {
  std::map<std::string, LanguageStats> by_lang;
  LengthSummary lengths;
};

/// Nearest-rank percentile over a sorted sample: the value at 1-based
/// rank ceil(p * N). Returns 0 for an empty sample.
inline std::uint64_t nearest_rank(std::span<const std::uint64_t> sorted, double p) {
  if (sorted.empty()) return 0;
  auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(sorted.size())));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

inline CorpusStats corpus_stats(std::span<const Document> docs, const Vocab& tok) {
  CorpusStats out;
  std::vector<std::uint64_t> lengths;
  lengths.reserve(docs.size());
  for (const auto& d : docs) {
    const auto n = static_cast<std::uint64_t>(tok.encode(d.text).size());
    auto& s = out.by_lang[d.lang];
    s.lang = d.lang;
    s.doc_count += 1;
    s.token_count += n;
    lengths.push_back(n);
  }
  if (!lengths.empty()) {
    const double total = std::accumulate(lengths.begin(), lengths.end(), 0.0);
    out.lengths.mean = total / static_cast<double>(lengths.size());
    std::sort(lengths.begin(), lengths.end());
    out.lengths.p50 = nearest_rank(lengths, 0.5);
    out.lengths.p90 = nearest_rank(lengths, 0.9);
  }
  return out;
}

/// Writes the per-language table followed by the length summary table.
inline void write_stats_tsv(std::ostream& os, const CorpusStats& stats) {
  os << "lang\tdoc_count\ttoken_count\n";
  for (const auto& [lang, s] : stats.by_lang) os << lang << '\t' << s.doc_count << '\t' << s.token_count << '\n';
  char mean[64];
  std::snprintf(mean, sizeof mean, "%.2f", stats.lengths.mean);
  os << "\nmean\tp50\tp90\n" << mean << '\t' << stats.lengths.p50 << '\t' << stats.lengths.p90 << '\n';
}

// ---------------------------------------------------------------------------
// UniMax

struct LanguageSize {
  std::string lang;
  std::uint64_t token_count = 0;
};

struct Allocation {
  std::string lang;
  std::uint64_t budget_tokens = 0;
  double probability = 0.0;
};

/// Per-language cap in tokens: floor(epoch_cap * token_count).
inline std::uint64_t unimax_cap(std::uint64_t token_count, double epoch_cap) {
  return static_cast<std::uint64_t>(std::floor(epoch_cap * static_cast<double>(token_count)));
}

/// Ascending-cap waterfill. Languages are visited in increasing cap order;
/// each takes min(cap, remaining / languages_left). Once a language is not
/// capped, every later one receives the same share, so the waterfill
/// finishes with an equal split of what is left. That split is rounded
/// down and the leftover tokens (fewer than the number of sharing
/// languages) go one each to the sharing languages with the largest caps.
/// Output order matches input order.
inline std::vector<Allocation> unimax_allocate(std::span<const LanguageSize> langs, std::uint64_t total_budget,
                                               double epoch_cap) {
  if (langs.empty()) throw InputError("unimax_allocate: empty language list");
  if (total_budget == 0) throw InputError("unimax_allocate: budget must be positive");
  if (!(epoch_cap > 0.0)) throw InputError("unimax_allocate: epoch cap must be positive");
  const std::size_t n = langs.size();
  std::vector<std::uint64_t> caps(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (langs[i].token_count == 0) throw InputError("unimax_allocate: language '" + langs[i].lang + "' has no tokens");
    caps[i] = unimax_cap(langs[i].token_count, epoch_cap);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return caps[a] < caps[b]; });

  std::vector<std::uint64_t> budget(n, 0);
  std::uint64_t remaining = total_budget;
  for (std::size_t pos = 0; pos < n; ++pos) {
    const std::size_t i = order[pos];
    const std::uint64_t left = n - pos;
    // cap_i <= remaining / left, compared without division.
    if (static_cast<unsigned __int128>(caps[i]) * left <= remaining) {
      budget[i] = caps[i];
      remaining -= caps[i];
      continue;
    }
    const std::uint64_t share = remaining / left;
    std::uint64_t leftover = remaining % left;
    for (std::size_t q = pos; q < n; ++q) budget[order[q]] = share;
    // Largest cap first; ties broken by input order.
    std::vector<std::size_t> sharing(order.begin() + static_cast<std::ptrdiff_t>(pos), order.end());
    std::stable_sort(sharing.begin(), sharing.end(), [&](std::size_t a, std::size_t b) {
      if (caps[a] != caps[b]) return caps[a] > caps[b];
      return a < b;
    });
    for (std::size_t q = 0; leftover > 0; ++q, --leftover) budget[sharing[q]] += 1;
    remaining = 0;
    break;
  }

  const std::uint64_t allocated = std::accumulate(budget.begin(), budget.end(), std::uint64_t{0});
  std::vector<Allocation> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].lang = langs[i].lang;
    out[i].budget_tokens = budget[i];
    out[i].probability =
        allocated == 0 ? 0.0 : static_cast<double>(budget[i]) / static_cast<double>(allocated);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling

/// Infinite deterministic document stream. The language of each draw is
/// sampled from the allocation probabilities; within a language the
/// documents are visited in a shuffled order that is regenerated at every
/// epoch from (seed, lang, epoch).
class SampleStream {
 public:
  SampleStream(std::span<const Document> corpus, std::span<const Allocation> alloc, std::uint64_t seed)
      : seed_(seed), rng_(hash_combine(seed, 0x5a4d504c45ULL)) {
    std::map<std::string, std::size_t> lang_index;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      auto [it, inserted] = lang_index.try_emplace(corpus[i].lang, pools_.size());
      if (inserted) pools_.push_back(Pool{corpus[i].lang, {}, {}, 0, 0});
      pools_[it->second].docs.push_back(&corpus[i]);
    }
    double total = 0.0;
    for (const auto& a : alloc) {
      auto it = lang_index.find(a.lang);
      if (it == lang_index.end()) throw InputError("allocation references unknown language '" + a.lang + "'");
      if (a.probability <= 0.0) continue;
      total += a.probability;
      cumulative_.push_back(total);
      choice_.push_back(it->second);
    }
    if (choice_.empty()) throw InputError("allocation has no language with positive probability");
    for (auto& c : cumulative_) c /= total;
  }

  const Document& next() {
    const double u = rng_.uniform();
    std::size_t pick = static_cast<std::size_t>(std::upper_bound(cumulative_.begin(), cumulative_.end(), u) -
                                                cumulative_.begin());
    pick = std::min(pick, choice_.size() - 1);
    Pool& pool = pools_[choice_[pick]];
    if (pool.cursor == pool.order.size()) reshuffle(pool);
    return *pool.docs[pool.order[pool.cursor++]];
  }

 private:
  struct Pool {
    std::string lang;
    std::vector<const Document*> docs;
    std::vector<std::size_t> order;
    std::size_t cursor;
    std::uint64_t epoch;
  };

  void reshuffle(Pool& pool) {
    pool.order.resize(pool.docs.size());
    std::iota(pool.order.begin(), pool.order.end(), 0);
    Rng shuffle_rng(hash_combine(hash64(pool.lang, seed_), pool.epoch));
    for (std::size_t i = pool.order.size(); i > 1; --i) {
      std::swap(pool.order[i - 1], pool.order[shuffle_rng.below(i)]);
    }
    pool.cursor = 0;
    pool.epoch += 1;
  }

  std::uint64_t seed_;
  Rng rng_;
  std::vector<Pool> pools_;
  std::vector<double> cumulative_;
  std::vector<std::size_t> choice_;
};

}  // namespace mlongt5
