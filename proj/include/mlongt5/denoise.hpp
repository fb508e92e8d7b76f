#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mlongt5/common.hpp"
#include "mlongt5/corpus.hpp"
#include "mlongt5/tokenizer.hpp"

namespace mlongt5 {

/// One member of the denoiser mixture. For S, `corruption_rate` is the
/// fraction of the sequence moved to the target and `mean_span` is unused.
struct DenoiserSpec {
  DenoiserKind kind = DenoiserKind::R;
  int mean_span = 3;
  double corruption_rate = 0.15;
  double weight = 1.0;

  bool operator==(const DenoiserSpec&) const = default;
};

struct LengthBudget {
  int max_input = 4096;
  int max_target = 910;
};

struct PretrainExample {
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
  DenoiserKind denoiser = DenoiserKind::R;

  bool operator==(const PretrainExample&) const = default;
};

inline constexpr double kDefaultCorruptionRate = 0.15;
inline constexpr double kPrefixTargetFraction = 0.25;

/// The mixture used for pretraining: two regular and two extreme span
/// corruptors, all at rate 0.15, plus the prefix-LM denoiser.
inline std::vector<DenoiserSpec> default_mixture() {
  return {
      {DenoiserKind::R, 3, kDefaultCorruptionRate, 1.0},
      {DenoiserKind::R, 8, kDefaultCorruptionRate, 1.0},
      {DenoiserKind::X, 32, kDefaultCorruptionRate, 1.0},
      {DenoiserKind::X, 64, kDefaultCorruptionRate, 1.0},
      {DenoiserKind::S, 0, kPrefixTargetFraction, 1.0},
  };
}

struct Feasibility {
  bool ok = true;
  std::string reason;
  double expected_target = 0.0;

  explicit operator bool() const { return ok; }
};

/// Expected target length of a span corruptor at full input length:
/// corrupted tokens plus one sentinel per span plus eos.
inline double expected_target_length(const DenoiserSpec& spec, int max_input) {
  const double corrupted = spec.corruption_rate * max_input;
  const double spans = std::ceil(corrupted / std::max(spec.mean_span, 1));
  return corrupted + spans + 1.0;
}

inline Feasibility check_feasibility(const DenoiserSpec& spec, const LengthBudget& budget) {
  Feasibility f;
  if (!(spec.corruption_rate > 0.0 && spec.corruption_rate <= 1.0)) {
    f.ok = false;
    f.reason = "corruption rate must lie in (0, 1]";
    return f;
  }
  if (spec.kind == DenoiserKind::S) {
    // The prefix-LM target is capped at max_target - 1 tokens plus eos. The
    // spec is refused once the cap would drop more than half of the
    // intended target.
    const double intended = spec.corruption_rate * budget.max_input;
    f.expected_target = std::min<double>(intended, budget.max_target - 1) + 1.0;
    if (budget.max_target < 2 || budget.max_input < 2) {
      f.ok = false;
      f.reason = "prefix-LM needs max_input >= 2 and max_target >= 2 (target token plus eos), got max_input " +
                 std::to_string(budget.max_input) + ", max_target " + std::to_string(budget.max_target);
    } else if (intended > 2.0 * budget.max_target) {
      char buf[256];
      std::snprintf(buf, sizeof buf,
                    "prefix-LM target of %.0f tokens (fraction %.2f of %d inputs) is more than twice the target "
                    "budget of %d",
                    intended, spec.corruption_rate, budget.max_input, budget.max_target);
      f.ok = false;
      f.reason = buf;
    }
    return f;
  }
  if (spec.mean_span < 1) {
    f.ok = false;
    f.reason = "mean span must be positive";
    return f;
  }
  f.expected_target = expected_target_length(spec, budget.max_input);
  if (f.expected_target > budget.max_target) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "expected target length %.1f (%.0f corrupted tokens at rate %.2f of %d inputs, plus sentinels "
                  "and eos) exceeds the target budget of %d",
                  f.expected_target, spec.corruption_rate * budget.max_input, spec.corruption_rate,
                  budget.max_input, budget.max_target);
    f.ok = false;
    f.reason = buf;
  }
  return f;
}

namespace detail {

/// Uniform random composition of `total` into `parts` non-negative
/// integers (stars and bars).
inline std::vector<int> random_composition(int total, int parts, Rng& rng) {
  std::vector<int> out(static_cast<std::size_t>(parts), 0);
  if (parts == 1) {
    out[0] = total;
    return out;
  }
  // Choose parts-1 bar positions among total+parts-1 slots (Floyd).
  const int slots = total + parts - 1;
  const int bars = parts - 1;
  std::vector<int> chosen;
  chosen.reserve(static_cast<std::size_t>(bars));
  for (int j = slots - bars; j < slots; ++j) {
    const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(j) + 1));
    if (std::find(chosen.begin(), chosen.end(), t) == chosen.end()) {
      chosen.push_back(t);
    } else {
      chosen.push_back(j);
    }
  }
  std::sort(chosen.begin(), chosen.end());
  int prev = -1;
  for (int p = 0; p < bars; ++p) {
    out[static_cast<std::size_t>(p)] = chosen[static_cast<std::size_t>(p)] - prev - 1;
    prev = chosen[static_cast<std::size_t>(p)];
  }
  out[static_cast<std::size_t>(bars)] = slots - prev - 1;
  return out;
}

}  // namespace detail

/// Span count for a corruption: the expected count len*rate/mean_span is
/// rounded stochastically (floor plus a Bernoulli draw on the fraction) so
/// that the realized mean span length is unbiased.
inline int span_count(std::size_t len, int corrupted, int mean_span, double rate, Rng& rng) {
  const double expected = static_cast<double>(len) * rate / mean_span;
  double whole = std::floor(expected);
  if (rng.uniform() < expected - whole) whole += 1.0;
  int spans = std::max(1, static_cast<int>(whole));
  spans = std::min(spans, corrupted);
  // Non-adjacent spans need at least spans-1 separating tokens.
  spans = std::min(spans, static_cast<int>(len) - corrupted + 1);
  return std::max(spans, 1);
}

struct Corruption {
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
};

/// Span corruption with sentinels. The corrupted count is
/// max(1, round(len * rate)), split into non-adjacent spans of positive
/// length at seeded-random positions. Span k is replaced by sentinel k in
/// the input; the target lists (sentinel k, span k tokens) and ends in eos.
inline Corruption span_corrupt(std::span<const TokenId> tokens, int mean_span, double rate, Rng& rng,
                               const Vocab& v) {
  if (tokens.empty()) throw Error("span_corrupt: empty token sequence");
  if (mean_span < 1) throw Error("span_corrupt: mean span must be positive");
  if (!(rate > 0.0 && rate <= 1.0)) throw Error("span_corrupt: rate must lie in (0, 1]");
  const std::size_t len = tokens.size();
  const int corrupted =
      static_cast<int>(std::clamp<long long>(round_half_even(static_cast<double>(len) * rate), 1, static_cast<long long>(len)));
  const int spans = span_count(len, corrupted, mean_span, rate, rng);
  if (spans > Vocab::kSentinelCount) {
    throw Error("span_corrupt: " + std::to_string(spans) + " spans exceed the supply of " +
                std::to_string(Vocab::kSentinelCount) + " sentinels");
  }
  const int kept = static_cast<int>(len) - corrupted;

  // Span lengths: composition of `corrupted` into `spans` positive parts.
  std::vector<int> span_len = detail::random_composition(corrupted - spans, spans, rng);
  for (auto& s : span_len) s += 1;
  // Gaps: spans+1 slots; interior gaps at least one token.
  std::vector<int> gap = detail::random_composition(kept - (spans - 1), spans + 1, rng);
  for (int k = 1; k < spans; ++k) gap[static_cast<std::size_t>(k)] += 1;

  Corruption out;
  out.inputs.reserve(static_cast<std::size_t>(kept + spans));
  out.targets.reserve(static_cast<std::size_t>(corrupted + spans + 1));
  std::size_t pos = 0;
  for (int k = 0; k < spans; ++k) {
    for (int g = 0; g < gap[static_cast<std::size_t>(k)]; ++g) out.inputs.push_back(tokens[pos++]);
    const TokenId sentinel = v.sentinel(k);
    out.inputs.push_back(sentinel);
    out.targets.push_back(sentinel);
    for (int s = 0; s < span_len[static_cast<std::size_t>(k)]; ++s) out.targets.push_back(tokens[pos++]);
  }
  for (int g = 0; g < gap[static_cast<std::size_t>(spans)]; ++g) out.inputs.push_back(tokens[pos++]);
  out.targets.push_back(Vocab::kEos);
  return out;
}

/// Prefix-LM split. Target length is round(fraction * len) clamped to
/// [1, len-1] and to max_target-1 so that target plus eos fits.
inline Corruption prefix_lm_split(std::span<const TokenId> tokens, double target_fraction, int max_target) {
  const std::size_t len = tokens.size();
  if (len < 2) throw Error("prefix_lm_split: need at least 2 tokens, got " + std::to_string(len));
  if (max_target < 2) throw Error("prefix_lm_split: max_target must be at least 2");
  long long tlen = round_half_even(target_fraction * static_cast<double>(len));
  tlen = std::clamp<long long>(tlen, 1, static_cast<long long>(len) - 1);
  tlen = std::min<long long>(tlen, max_target - 1);
  const auto split = static_cast<std::ptrdiff_t>(len) - static_cast<std::ptrdiff_t>(tlen);
  Corruption out;
  out.inputs.assign(tokens.begin(), tokens.begin() + split);
  out.targets.assign(tokens.begin() + split, tokens.end());
  out.targets.push_back(Vocab::kEos);
  return out;
}

inline std::size_t choose_spec(std::span<const DenoiserSpec> mixture, Rng& rng) {
  double total = 0.0;
  for (const auto& s : mixture) total += s.weight;
  const double u = rng.uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < mixture.size(); ++i) {
    acc += mixture[i].weight;
    if (u < acc) return i;
  }
  return mixture.size() - 1;
}

/// Throws if any mixture member cannot fit the budget.
inline void require_feasible(std::span<const DenoiserSpec> mixture, const LengthBudget& budget) {
  if (mixture.empty()) throw InputError("denoiser mixture is empty");
  for (const auto& s : mixture) {
    if (!(s.weight > 0.0)) throw InputError("denoiser weights must be positive");
    auto f = check_feasibility(s, budget);
    if (!f) {
      throw InputError(std::string("infeasible denoiser ") + kind_letter(s.kind) + "(span " +
                       std::to_string(s.mean_span) + ", rate " + std::to_string(s.corruption_rate) +
                       "): " + f.reason);
    }
  }
}

/// Builds one pretraining example from a document. The encoded text is
/// truncated to the input budget (one slot is kept for the mode token when
/// `mode_prompts` is set). Span corruptors whose span count would exceed
/// the sentinel supply run with a proportionally longer mean span.
inline PretrainExample make_pretrain_example(const Document& doc, std::span<const DenoiserSpec> mixture,
                                             const Vocab& tok, const LengthBudget& budget, Rng& rng,
                                             bool mode_prompts = true) {
  require_feasible(mixture, budget);
  const DenoiserSpec& spec = mixture[choose_spec(mixture, rng)];
  std::vector<TokenId> tokens = tok.encode(doc.text);
  if (tokens.empty()) throw InputError("document encodes to no tokens");
  const std::size_t room = static_cast<std::size_t>(budget.max_input - (mode_prompts ? 1 : 0));
  if (tokens.size() > room) tokens.resize(room);

  Corruption c;
  if (spec.kind == DenoiserKind::S) {
    c = prefix_lm_split(tokens, spec.corruption_rate, budget.max_target);
  } else {
    const double expected_spans = static_cast<double>(tokens.size()) * spec.corruption_rate / spec.mean_span;
    int mean_span = spec.mean_span;
    if (std::floor(expected_spans) + 1.0 > Vocab::kSentinelCount) {
      mean_span = static_cast<int>(
          std::ceil(static_cast<double>(tokens.size()) * spec.corruption_rate / (Vocab::kSentinelCount - 1)));
    }
    c = span_corrupt(tokens, mean_span, spec.corruption_rate, rng, tok);
  }

  PretrainExample ex;
  ex.denoiser = spec.kind;
  if (mode_prompts) ex.inputs.push_back(tok.mode_id(spec.kind));
  ex.inputs.insert(ex.inputs.end(), c.inputs.begin(), c.inputs.end());
  ex.targets = std::move(c.targets);
  if (static_cast<int>(ex.inputs.size()) > budget.max_input || static_cast<int>(ex.targets.size()) > budget.max_target) {
    throw Error("pretraining example exceeds length budget (" + std::to_string(ex.inputs.size()) + "/" +
                std::to_string(ex.targets.size()) + ")");
  }
  return ex;
}

/// Inverse of span_corrupt: replaces each input sentinel by its target
/// span. A trailing eos in the target is ignored; a leading mode token must
/// be stripped by the caller.
inline std::vector<TokenId> splice_reconstruct(std::span<const TokenId> inputs, std::span<const TokenId> targets,
                                               const Vocab& v) {
  std::size_t end = targets.size();
  if (end > 0 && targets[end - 1] == Vocab::kEos) --end;
  if (end > 0 && !v.is_sentinel(targets[0])) throw Error("splice_reconstruct: target does not start with a sentinel");
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // [begin, end) within targets, by order
  std::vector<TokenId> order;
  for (std::size_t i = 0; i < end;) {
    const TokenId s = targets[i++];
    if (s == Vocab::kEos) throw Error("splice_reconstruct: eos inside target");
    std::size_t j = i;
    while (j < end && !v.is_sentinel(targets[j])) ++j;
    order.push_back(s);
    spans.emplace_back(i, j);
    i = j;
  }
  std::vector<TokenId> out;
  std::size_t next = 0;
  for (TokenId t : inputs) {
    if (!v.is_sentinel(t)) {
      out.push_back(t);
      continue;
    }
    if (next >= order.size() || order[next] != t) {
      throw Error("splice_reconstruct: input sentinel <extra_id_" + std::to_string(v.sentinel_index(t)) +
                  "> has no matching target span");
    }
    out.insert(out.end(), targets.begin() + static_cast<std::ptrdiff_t>(spans[next].first),
               targets.begin() + static_cast<std::ptrdiff_t>(spans[next].second));
    ++next;
  }
  if (next != order.size()) throw Error("splice_reconstruct: target has spans with no input sentinel");
  return out;
}

}  // namespace mlongt5
