#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mlongt5/common.hpp"
#include "mlongt5/tokenizer.hpp"

namespace mlongt5 {

namespace text {

// Simple case mapping for Latin, Greek and Cyrillic; other scripts have no
// case or are left unchanged.
inline long to_lower(long cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 32;
  if (cp < 0xC0) return cp;
  if (cp <= 0xDE && cp != 0xD7) return cp + 0x20;
  if (cp >= 0x100 && cp <= 0x137) return (cp % 2 == 0) ? cp + 1 : cp;
  if (cp >= 0x139 && cp <= 0x148) return (cp % 2 == 1) ? cp + 1 : cp;
  if (cp >= 0x14A && cp <= 0x177) return (cp % 2 == 0) ? cp + 1 : cp;
  if (cp == 0x178) return 0xFF;
  if (cp >= 0x179 && cp <= 0x17E) return (cp % 2 == 1) ? cp + 1 : cp;
  if (cp >= 0x391 && cp <= 0x3A9 && cp != 0x3A2) return cp + 0x20;
  if (cp >= 0x410 && cp <= 0x42F) return cp + 0x20;
  if (cp >= 0x400 && cp <= 0x40F) return cp + 0x50;
  return cp;
}

inline bool is_space(long cp) {
  return (cp >= 0x09 && cp <= 0x0D) || cp == 0x20 || cp == 0x85 || cp == 0xA0 || cp == 0x1680 ||
         (cp >= 0x2000 && cp <= 0x200A) || cp == 0x2028 || cp == 0x2029 || cp == 0x202F || cp == 0x205F ||
         cp == 0x3000;
}

inline bool is_punct(long cp) {
  if (cp < 0x80) {
    return (cp >= 0x21 && cp <= 0x2F) || (cp >= 0x3A && cp <= 0x40) || (cp >= 0x5B && cp <= 0x60) ||
           (cp >= 0x7B && cp <= 0x7E);
  }
  switch (cp) {
    case 0xA1: case 0xA7: case 0xAB: case 0xB6: case 0xB7: case 0xBB: case 0xBF:
    case 0x37E: case 0x387: case 0x55D: case 0x589:
    case 0x60C: case 0x61B: case 0x61F: case 0x6D4:
    case 0x964: case 0x965: case 0xE4F: case 0xE5A: case 0xE5B:
    case 0x30FB:
      return true;
    default:
      break;
  }
  return (cp >= 0x2010 && cp <= 0x2027) || (cp >= 0x2030 && cp <= 0x205E) || (cp >= 0x3001 && cp <= 0x3003) ||
         (cp >= 0x3008 && cp <= 0x3011) || (cp >= 0x3014 && cp <= 0x301F) || (cp >= 0xFF01 && cp <= 0xFF0F) ||
         (cp >= 0xFF1A && cp <= 0xFF20) || (cp >= 0xFF3B && cp <= 0xFF40) || (cp >= 0xFF5B && cp <= 0xFF65);
}

inline std::string lowercase(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (long cp : utf8::code_points(s)) utf8::append(out, to_lower(cp));
  return out;
}

}  // namespace text

/// Languages scored on subword pieces (or characters) instead of
/// whitespace-delimited words.
inline bool segments_without_spaces(std::string_view lang) {
  const auto base = lang.substr(0, lang.find_first_of("-_"));
  return base == "zh" || base == "ja" || base == "th";
}

/// ROUGE tokenization. zh/ja/th use the piece vocabulary when given and
/// fall back to single characters; other languages are lowercased and split
/// on whitespace and punctuation.
inline std::vector<std::string> tokenize_for_rouge(std::string_view s, std::string_view lang,
                                                   const Vocab* pieces = nullptr) {
  std::vector<std::string> out;
  if (segments_without_spaces(lang) && pieces) {
    for (auto& p : pieces->encode_pieces(s)) {
      const auto cps = utf8::code_points(p);
      if (std::all_of(cps.begin(), cps.end(), text::is_space)) continue;
      out.push_back(std::move(p));
    }
    return out;
  }
  const bool per_char = segments_without_spaces(lang);
  std::string cur;
  for (long cp : utf8::code_points(s)) {
    if (text::is_space(cp) || text::is_punct(cp)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
      continue;
    }
    utf8::append(cur, text::to_lower(cp));
    if (per_char) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline double harmonic_f1(double p, double r) { return (p + r) == 0.0 ? 0.0 : 2.0 * p * r / (p + r); }

inline Prf make_prf(std::size_t overlap, std::size_t cand_total, std::size_t ref_total) {
  Prf s;
  s.precision = cand_total == 0 ? 0.0 : static_cast<double>(overlap) / static_cast<double>(cand_total);
  s.recall = ref_total == 0 ? 0.0 : static_cast<double>(overlap) / static_cast<double>(ref_total);
  s.f1 = harmonic_f1(s.precision, s.recall);
  return s;
}

namespace detail {

inline std::map<std::vector<std::string_view>, std::size_t> ngram_counts(std::span<const std::string> toks,
                                                                         std::size_t n) {
  std::map<std::vector<std::string_view>, std::size_t> counts;
  if (toks.size() < n) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    std::vector<std::string_view> key(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                      toks.begin() + static_cast<std::ptrdiff_t>(i + n));
    ++counts[key];
  }
  return counts;
}

}  // namespace detail

/// Clipped n-gram overlap.
inline Prf rouge_n(std::span<const std::string> cand, std::span<const std::string> ref, std::size_t n) {
  if (n == 0) throw Error("rouge_n: n must be at least 1");
  const auto c = detail::ngram_counts(cand, n);
  const auto r = detail::ngram_counts(ref, n);
  std::size_t overlap = 0;
  for (const auto& [gram, count] : c) {
    auto it = r.find(gram);
    if (it != r.end()) overlap += std::min(count, it->second);
  }
  const std::size_t ct = cand.size() >= n ? cand.size() - n + 1 : 0;
  const std::size_t rt = ref.size() >= n ? ref.size() - n + 1 : 0;
  return make_prf(overlap, ct, rt);
}

inline std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline Prf rouge_l(std::span<const std::string> cand, std::span<const std::string> ref) {
  return make_prf(lcs_length(cand, ref), cand.size(), ref.size());
}

struct RougeScore {
  Prf rouge1, rouge2, rougeL;
};

inline RougeScore rouge(std::span<const std::string> cand, std::span<const std::string> ref) {
  return {rouge_n(cand, ref, 1), rouge_n(cand, ref, 2), rouge_l(cand, ref)};
}

/// Mean of per-pair precision, recall and F1 for each variant.
inline RougeScore evaluate_summarization(std::span<const std::string> outputs, std::span<const std::string> references,
                                         std::string_view lang, const Vocab* tok = nullptr) {
  if (outputs.size() != references.size()) {
    throw InputError("evaluate_summarization: " + std::to_string(outputs.size()) + " outputs vs " +
                     std::to_string(references.size()) + " references");
  }
  RougeScore mean;
  if (outputs.empty()) return mean;
  auto accumulate = [](Prf& into, const Prf& x) {
    into.precision += x.precision;
    into.recall += x.recall;
    into.f1 += x.f1;
  };
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const auto c = tokenize_for_rouge(outputs[i], lang, tok);
    const auto r = tokenize_for_rouge(references[i], lang, tok);
    const RougeScore s = rouge(c, r);
    accumulate(mean.rouge1, s.rouge1);
    accumulate(mean.rouge2, s.rouge2);
    accumulate(mean.rougeL, s.rougeL);
  }
  const double n = static_cast<double>(outputs.size());
  for (Prf* p : {&mean.rouge1, &mean.rouge2, &mean.rougeL}) {
    p->precision /= n;
    p->recall /= n;
    p->f1 /= n;
  }
  return mean;
}

inline std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v * 100.0);
  return buf;
}

inline void write_rouge_report(std::ostream& os, const RougeScore& s) {
  os << "metric\tprecision\trecall\tf1\n";
  const std::pair<const char*, const Prf*> rows[] = {{"rouge1", &s.rouge1}, {"rouge2", &s.rouge2}, {"rougeL", &s.rougeL}};
  for (const auto& [name, p] : rows) {
    os << name << '\t' << percent(p->precision) << '\t' << percent(p->recall) << '\t' << percent(p->f1) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Question answering

struct QaScore {
  double em = 0.0;
  double f1 = 0.0;
};

/// Lowercase, split on whitespace, strip punctuation at both ends of each
/// word, drop empty words, join with single spaces.
inline std::string normalize_answer(std::string_view s) {
  std::vector<std::vector<long>> words(1);
  for (long cp : utf8::code_points(s)) {
    if (text::is_space(cp)) {
      if (!words.back().empty()) words.emplace_back();
    } else {
      words.back().push_back(text::to_lower(cp));
    }
  }
  std::string out;
  for (auto& w : words) {
    auto b = w.begin(), e = w.end();
    while (b != e && text::is_punct(*b)) ++b;
    while (e != b && text::is_punct(*(e - 1))) --e;
    if (b == e) continue;
    if (!out.empty()) out.push_back(' ');
    for (auto it = b; it != e; ++it) utf8::append(out, *it);
  }
  return out;
}

inline double token_f1(std::span<const std::string> pred, std::span<const std::string> gold) {
  if (pred.empty() && gold.empty()) return 1.0;
  if (pred.empty() || gold.empty()) return 0.0;
  std::map<std::string_view, long> counts;
  for (const auto& g : gold) ++counts[g];
  std::size_t common = 0;
  for (const auto& p : pred) {
    auto it = counts.find(p);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  return make_prf(common, pred.size(), gold.size()).f1;
}

/// EM against any gold after normalization; F1 is the best token-multiset
/// F1 over the golds. An empty prediction matches an empty gold.
inline QaScore qa_em_f1(std::string_view prediction, std::span<const std::string> golds, std::string_view lang,
                        const Vocab* tok = nullptr) {
  if (golds.empty()) throw InputError("qa_em_f1: no gold answers");
  QaScore s;
  const std::string np = normalize_answer(prediction);
  const auto pt = tokenize_for_rouge(np, lang, tok);
  for (const auto& g : golds) {
    const std::string ng = normalize_answer(g);
    if (ng == np) s.em = 1.0;
    s.f1 = std::max(s.f1, token_f1(pt, tokenize_for_rouge(ng, lang, tok)));
  }
  return s;
}

inline QaScore evaluate_qa(std::span<const std::string> predictions, std::span<const std::vector<std::string>> golds,
                           std::string_view lang, const Vocab* tok = nullptr) {
  if (predictions.size() != golds.size()) throw InputError("evaluate_qa: prediction/gold count mismatch");
  QaScore mean;
  if (predictions.empty()) return mean;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto s = qa_em_f1(predictions[i], golds[i], lang, tok);
    mean.em += s.em;
    mean.f1 += s.f1;
  }
  mean.em /= static_cast<double>(predictions.size());
  mean.f1 /= static_cast<double>(predictions.size());
  return mean;
}

inline void write_qa_report(std::ostream& os, const QaScore& s) {
  os << "metric\tvalue\nem\t" << percent(s.em) << "\nf1\t" << percent(s.f1) << '\n';
}

enum class AnswerKind { span, yes, no, null };

inline AnswerKind parse_answer_kind(std::string_view s) {
  if (s == "span") return AnswerKind::span;
  if (s == "yes") return AnswerKind::yes;
  if (s == "no") return AnswerKind::no;
  if (s == "null") return AnswerKind::null;
  throw InputError("unknown answer_kind '" + std::string(s) + "'");
}

struct QaRecord {
  std::string id;
  std::string question;
  std::string context;
  AnswerKind answer_kind = AnswerKind::null;
  std::string answer_text;
};

inline constexpr std::string_view kUnanswerable = "unanswerable";
inline constexpr std::string_view kQuestionSeparator = "\n\n";

/// Minimal-answer QA as text generation: the question and passage form the
/// input, the answer text (or yes / no / unanswerable) the target.
inline std::pair<std::string, std::string> tydiqa_to_seq2seq(const QaRecord& r) {
  std::string input = r.question;
  input += kQuestionSeparator;
  input += r.context;
  switch (r.answer_kind) {
    case AnswerKind::span:
      if (r.answer_text.empty()) throw InputError("QA record '" + r.id + "': span answer with empty text");
      if (r.context.find(r.answer_text) == std::string::npos) {
        throw InputError("QA record '" + r.id + "': span answer not found in context");
      }
      return {std::move(input), r.answer_text};
    case AnswerKind::yes: return {std::move(input), "yes"};
    case AnswerKind::no: return {std::move(input), "no"};
    case AnswerKind::null: break;
  }
  return {std::move(input), std::string(kUnanswerable)};
}

inline std::vector<QaRecord> read_qa_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open QA records '" + path + "'");
  std::vector<QaRecord> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    const std::string where = "line " + std::to_string(no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw InputError(where + "malformed JSON (" + e.what() + ")");
    }
    QaRecord r;
    for (const char* f : {"id", "question", "context", "answer_kind", "answer_text"}) {
      if (!j.contains(f) || !j[f].is_string()) throw InputError(where + "missing field " + f);
    }
    r.id = j["id"].get<std::string>();
    r.question = j["question"].get<std::string>();
    r.context = j["context"].get<std::string>();
    r.answer_kind = parse_answer_kind(j["answer_kind"].get<std::string>());
    r.answer_text = j["answer_text"].get<std::string>();
    out.push_back(std::move(r));
  }
  return out;
}

/// Deterministic hash partition: a record goes to train iff the seeded
/// hash of its key, scaled to [0, 1), is below `ratio`. Membership depends
/// only on the key, so the split is stable under reordering.
template <class Record, class KeyFn>
std::pair<std::vector<Record>, std::vector<Record>> split_train_dev(std::span<const Record> records, double ratio,
                                                                    std::uint64_t seed, KeyFn&& key) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw InputError("split ratio must lie in (0, 1)");
  std::pair<std::vector<Record>, std::vector<Record>> out;
  for (const auto& r : records) {
    const double u = static_cast<double>(hash64(key(r), seed) >> 11) * 0x1.0p-53;
    (u < ratio ? out.first : out.second).push_back(r);
  }
  return out;
}

inline std::pair<std::vector<QaRecord>, std::vector<QaRecord>> split_train_dev(std::span<const QaRecord> records,
                                                                               double ratio = 0.9,
                                                                               std::uint64_t seed = 0) {
  return split_train_dev(records, ratio, seed, [](const QaRecord& r) -> const std::string& { return r.id; });
}

}  // namespace mlongt5
