#pragma once

// Independent reference computations used only by tests. Nothing here may
// call into the implementation paths it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

namespace oracle {

/// Exact rational with 64-bit parts, always normalized.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Rational() = default;
  Rational(std::int64_t n, std::int64_t d = 1) : num(n), den(d) { normalize(); }

  void normalize() {
    if (den < 0) num = -num, den = -den;
    const std::int64_t g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) num /= g, den /= g;
  }
  friend Rational operator+(Rational a, Rational b) { return {a.num * b.den + b.num * a.den, a.den * b.den}; }
  friend Rational operator-(Rational a, Rational b) { return {a.num * b.den - b.num * a.den, a.den * b.den}; }
  friend Rational operator/(Rational a, std::int64_t k) { return {a.num, a.den * k}; }
  friend bool operator<(Rational a, Rational b) { return a.num * b.den < b.num * a.den; }
  friend bool operator==(Rational a, Rational b) { return a.num == b.num && a.den == b.den; }
  std::int64_t floor() const { return num >= 0 ? num / den : -((-num + den - 1) / den); }
  std::int64_t ceil() const { return -Rational(-num, den).floor(); }
  bool integral() const { return den == 1; }
};

/// Literal ascending-cap waterfill in exact arithmetic. Returns the
/// rational budget of each language in input order.
inline std::vector<Rational> waterfill(const std::vector<std::int64_t>& caps, std::int64_t budget) {
  std::vector<std::size_t> order(caps.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return caps[a] < caps[b]; });
  std::vector<Rational> out(caps.size());
  Rational remaining(budget);
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const auto left = static_cast<std::int64_t>(order.size() - pos);
    const Rational share = remaining / left;
    const Rational cap(caps[order[pos]]);
    const Rational give = cap < share ? cap : share;
    out[order[pos]] = give;
    remaining = remaining - give;
  }
  return out;
}

/// Longest common subsequence by enumerating every subsequence of `a`
/// (2^|a| subsets) and testing whether it is a subsequence of `b`.
inline std::size_t brute_force_lcs(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::size_t best = 0;
  const std::size_t n = a.size();
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    const auto len = static_cast<std::size_t>(__builtin_popcount(mask));
    if (len <= best) continue;
    std::size_t j = 0;
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) {
      if (!(mask & (1u << i))) continue;
      while (j < b.size() && b[j] != a[i]) ++j;
      if (j == b.size()) ok = false;
      else ++j;
    }
    if (ok) best = len;
  }
  return best;
}

/// Relative-position bucket for (32 buckets, max distance 128,
/// unidirectional) using exact integer comparisons: in the log region the
/// bucket is 16 + the largest k <= 15 with 16 * 8^(k/15) <= n, i.e.
/// n^15 >= 16^15 * 8^k.
inline int relpos_bucket_32_128_unidirectional(long distance) {
  const long n = std::max(distance, 0L);
  if (n < 16) return static_cast<int>(n);
  if (n >= 128) return 31;
  unsigned __int128 n15 = 1;
  for (int i = 0; i < 15; ++i) n15 *= static_cast<unsigned __int128>(n);
  int k = 0;
  for (int cand = 1; cand <= 15; ++cand) {
    unsigned __int128 rhs = 1;
    for (int i = 0; i < 15; ++i) rhs *= 16;
    for (int i = 0; i < cand; ++i) rhs *= 8;
    if (n15 >= rhs) k = cand;
  }
  return 16 + k;
}

/// Token-level F1 by explicit matching of equal strings (multiset overlap).
inline double multiset_f1(std::vector<std::string> pred, std::vector<std::string> gold) {
  if (pred.empty() && gold.empty()) return 1.0;
  if (pred.empty() || gold.empty()) return 0.0;
  std::size_t common = 0;
  std::vector<bool> used(gold.size(), false);
  for (const auto& p : pred) {
    for (std::size_t j = 0; j < gold.size(); ++j) {
      if (!used[j] && gold[j] == p) {
        used[j] = true;
        ++common;
        break;
      }
    }
  }
  if (common == 0) return 0.0;
  const double prec = static_cast<double>(common) / pred.size();
  const double rec = static_cast<double>(common) / gold.size();
  return 2 * prec * rec / (prec + rec);
}

}  // namespace oracle
