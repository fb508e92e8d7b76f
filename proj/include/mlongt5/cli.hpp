#pragma once

// Pipeline commands behind the mlongt5 binary. Each command resolves its
// settings from a RunConfig, writes only under its output directory and
// records a manifest.json of everything needed to rerun it.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlongt5/corpus.hpp"
#include "mlongt5/denoise.hpp"
#include "mlongt5/metrics.hpp"
#include "mlongt5/model.hpp"
#include "mlongt5/tokenizer.hpp"
#include "mlongt5/trainer.hpp"

#ifndef MLONGT5_VERSION
#define MLONGT5_VERSION "0.1.0-unknown"
#endif

namespace mlongt5::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kVersion = MLONGT5_VERSION;
inline constexpr const char* kFromPreset = "preset";

/// Flat namespaced settings: defaults, then config file, then --set
/// overrides, then dedicated flags. Unknown keys are rejected.
class RunConfig {
 public:
  RunConfig() : values_(defaults()) {}

  static std::map<std::string, std::string> defaults() {
    return {
        {"run.seed", "0"},
        {"corpus.vocab", ""},
        {"unimax.budget", "1000000"},
        {"unimax.epoch_cap", "1"},
        {"denoise.rate", "0.15"},
        {"denoise.prefix_fraction", "0.25"},
        {"denoise.max_input", "4096"},
        {"denoise.max_target", "910"},
        {"denoise.mode_prompts", "true"},
        {"model.preset", "tiny"},
        {"model.d_model", kFromPreset},
        {"model.n_enc_layers", kFromPreset},
        {"model.n_dec_layers", kFromPreset},
        {"model.n_heads", kFromPreset},
        {"model.head_dim", kFromPreset},
        {"model.d_ff", kFromPreset},
        {"model.local_radius", kFromPreset},
        {"model.block_size", kFromPreset},
        {"model.relpos_buckets", kFromPreset},
        {"model.relpos_max_distance", kFromPreset},
        {"model.dropout", kFromPreset},
        {"train.steps", "100"},
        {"train.batch_size", "8"},
        {"train.learning_rate", "0.01"},
        {"train.warmup_steps", "0"},
        {"train.checkpoint_every", "0"},
        {"finetune.preset", "summarization"},
        {"finetune.task", "pairs"},
        {"finetune.split_ratio", "0.9"},
        {"generate.max_len", "64"},
        {"generate.max_input", "4096"},
        {"eval.task", "summarization"},
        {"eval.lang", "en"},
    };
  }

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw InputError("unknown setting '" + key + "'");
    it->second = value;
  }

  /// Parses "key=value".
  void apply(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
      throw InputError("expected key=value, got '" + std::string(assignment) + "'");
    }
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  /// key=value lines with '#' comments, or a manifest.json from an earlier
  /// run (its "settings" object).
  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config '" + path + "'");
    if (path.ends_with(".json")) {
      json j;
      try {
        j = json::parse(in);
      } catch (const json::exception& e) {
        throw InputError("config '" + path + "': malformed JSON (" + e.what() + ")");
      }
      if (!j.contains("settings") || !j["settings"].is_object()) {
        throw InputError("config '" + path + "': no settings object");
      }
      for (const auto& [k, v] : j["settings"].items()) {
        if (!v.is_string()) throw InputError("config '" + path + "': setting '" + k + "' is not a string");
        set(k, v.get<std::string>());
      }
      return;
    }
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
      ++no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      if (trim(line).empty()) continue;
      try {
        apply(line);
      } catch (const InputError& e) {
        throw InputError(path + ":" + std::to_string(no) + ": " + e.what());
      }
    }
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw Error("internal: unknown setting '" + key + "'");
    return it->second;
  }

  long long integer(const std::string& key) const {
    const auto& v = str(key);
    try {
      std::size_t used = 0;
      const long long x = std::stoll(v, &used);
      if (used == v.size()) return x;
    } catch (const std::exception&) {
    }
    throw InputError("setting '" + key + "' expects an integer, got '" + v + "'");
  }

  double real(const std::string& key) const {
    const auto& v = str(key);
    try {
      std::size_t used = 0;
      const double x = std::stod(v, &used);
      if (used == v.size()) return x;
    } catch (const std::exception&) {
    }
    throw InputError("setting '" + key + "' expects a number, got '" + v + "'");
  }

  bool boolean(const std::string& key) const {
    const auto& v = str(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw InputError("setting '" + key + "' expects true or false, got '" + v + "'");
  }

  std::uint64_t seed() const {
    const long long s = integer("run.seed");
    if (s < 0) throw InputError("run.seed must be non-negative");
    return static_cast<std::uint64_t>(s);
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
  }

  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Settings to module configs

inline Vocab load_vocab(const RunConfig& rc) {
  const auto& path = rc.str("corpus.vocab");
  return path.empty() ? byte_vocab() : load_piece_vocab(path);
}

inline ModelConfig model_config(const RunConfig& rc, const Vocab& vocab) {
  ModelConfig c = model_preset(rc.str("model.preset"));
  c.vocab_size = vocab.size();
  for (const auto& [key, value] : rc.values()) {
    if (!key.starts_with("model.") || key == "model.preset" || value == kFromPreset) continue;
    set_model_config_field(c, key.substr(6), value);
  }
  c.validate();
  return c;
}

inline LengthBudget length_budget(const RunConfig& rc) {
  return {static_cast<int>(rc.integer("denoise.max_input")), static_cast<int>(rc.integer("denoise.max_target"))};
}

/// The default mixture with the span corruptors' rate taken from
/// denoise.rate and the prefix-LM fraction from denoise.prefix_fraction.
inline std::vector<DenoiserSpec> mixture(const RunConfig& rc) {
  auto m = default_mixture();
  for (auto& s : m) s.corruption_rate = s.kind == DenoiserKind::S ? rc.real("denoise.prefix_fraction") : rc.real("denoise.rate");
  return m;
}

inline TrainConfig train_config(const RunConfig& rc) {
  TrainConfig tc;
  tc.steps = static_cast<int>(rc.integer("train.steps"));
  tc.batch_size = static_cast<int>(rc.integer("train.batch_size"));
  tc.learning_rate = rc.real("train.learning_rate");
  tc.warmup_steps = static_cast<int>(rc.integer("train.warmup_steps"));
  tc.checkpoint_every = static_cast<int>(rc.integer("train.checkpoint_every"));
  tc.seed = rc.seed();
  tc.validate();
  return tc;
}

// ---------------------------------------------------------------------------
// Files

inline fs::path prepare_out(const std::string& out) {
  if (out.empty()) throw InputError("--out is required for this command");
  fs::path p(out);
  fs::create_directories(p);
  return p;
}

inline std::ofstream open_out(const fs::path& p, std::ios::openmode mode = std::ios::out) {
  std::ofstream os(p, mode);
  if (!os) throw Error("cannot write '" + p.string() + "'");
  return os;
}

inline void write_manifest(const fs::path& out, const std::string& command, const RunConfig& rc,
                           const json& inputs, json extra = json::object()) {
  json m = std::move(extra);
  m["command"] = command;
  m["version"] = kVersion;
  m["inputs"] = inputs;
  m["settings"] = rc.values();
  auto os = open_out(out / "manifest.json");
  os << m.dump(2) << '\n';
}

/// Calls `fn(json, where)` for each line of a JSONL file.
template <class Fn>
void for_each_jsonl(const std::string& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    const std::string where = path + ": line " + std::to_string(no) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw InputError(where + "malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw InputError(where + "expected a JSON object");
    fn(j, where);
  }
}

inline std::string string_field(const json& j, const char* name, const std::string& where) {
  if (!j.contains(name) || !j[name].is_string()) throw InputError(where + "missing field " + name);
  return j[name].get<std::string>();
}

inline std::vector<TokenId> ids_field(const json& j, const char* name, const std::string& where) {
  if (!j.contains(name) || !j[name].is_array()) throw InputError(where + "missing field " + name);
  std::vector<TokenId> ids;
  for (const auto& x : j[name]) {
    if (!x.is_number_integer()) throw InputError(where + "field " + name + " must hold integers");
    ids.push_back(x.get<TokenId>());
  }
  return ids;
}

struct TextRecord {
  std::string id;
  std::string text;
};

/// {"id", "text"} lines; "input" is accepted in place of "text" so that
/// finetuning dev files can be fed to generate directly.
inline std::vector<TextRecord> read_text_records(const std::string& path, const char* field = "text") {
  std::vector<TextRecord> out;
  for_each_jsonl(path, [&](const json& j, const std::string& where) {
    const char* f = j.contains(field) ? field : (j.contains("input") ? "input" : field);
    out.push_back({string_field(j, "id", where), string_field(j, f, where)});
  });
  return out;
}

// ---------------------------------------------------------------------------
// Commands

inline void cmd_stats(const RunConfig& rc, const std::string& corpus, std::ostream& os) {
  const Vocab vocab = load_vocab(rc);
  const auto docs = ingest_jsonl(corpus);
  write_stats_tsv(os, corpus_stats(docs, vocab));
}

/// UniMax allocation, seeded document stream and mixture-of-denoisers
/// examples. Sampling stops once the emitted examples have consumed the
/// allocated token total.
inline std::size_t cmd_pretrain_data(const RunConfig& rc, const std::string& corpus, const std::string& out_dir) {
  const auto mix = mixture(rc);
  const auto budget = length_budget(rc);
  require_feasible(mix, budget);
  const fs::path out = prepare_out(out_dir);
  const Vocab vocab = load_vocab(rc);
  const auto docs = ingest_jsonl(corpus);
  if (docs.empty()) throw InputError("corpus '" + corpus + "' has no documents");
  const auto stats = corpus_stats(docs, vocab);
  std::vector<LanguageSize> sizes;
  for (const auto& [lang, s] : stats.by_lang) {
    if (s.token_count > 0) sizes.push_back({lang, s.token_count});
  }
  const long long total_budget = rc.integer("unimax.budget");
  if (total_budget <= 0) throw InputError("unimax.budget must be positive");
  const auto alloc = unimax_allocate(sizes, static_cast<std::uint64_t>(total_budget), rc.real("unimax.epoch_cap"));
  std::uint64_t allocated = 0;
  for (const auto& a : alloc) allocated += a.budget_tokens;

  const std::uint64_t seed = rc.seed();
  const bool prompts = rc.boolean("denoise.mode_prompts");
  SampleStream stream(docs, alloc, seed);
  Rng rng(hash_combine(seed, 0x4d6f44ULL));
  const auto room = static_cast<std::uint64_t>(budget.max_input - (prompts ? 1 : 0));
  auto os = open_out(out / "examples.jsonl");
  std::uint64_t consumed = 0;
  std::size_t count = 0;
  std::map<std::string, std::size_t> per_kind;
  while (consumed < allocated) {
    const Document& doc = stream.next();
    const auto ex = make_pretrain_example(doc, mix, vocab, budget, rng, prompts);
    consumed += std::min<std::uint64_t>(vocab.encode(doc.text).size(), room);
    json line = {{"denoiser", std::string(1, kind_letter(ex.denoiser))}, {"inputs", ex.inputs}, {"targets", ex.targets}};
    os << line.dump() << '\n';
    ++count;
    ++per_kind[std::string(1, kind_letter(ex.denoiser))];
  }

  json extra;
  extra["examples"] = count;
  extra["examples_per_denoiser"] = per_kind;
  extra["allocated_tokens"] = allocated;
  for (const auto& a : alloc) {
    extra["allocation"].push_back({{"lang", a.lang}, {"budget_tokens", a.budget_tokens}, {"probability", a.probability}});
  }
  for (const auto& s : mix) {
    extra["mixture"].push_back({{"kind", std::string(1, kind_letter(s.kind))},
                                {"mean_span", s.mean_span},
                                {"corruption_rate", s.corruption_rate},
                                {"weight", s.weight},
                                {"expected_target", check_feasibility(s, budget).expected_target}});
  }
  write_manifest(out, "pretrain-data", rc, {{"corpus", corpus}}, extra);
  return count;
}

inline std::vector<SequencePair> read_examples(const std::string& path) {
  std::vector<SequencePair> data;
  for_each_jsonl(path, [&](const json& j, const std::string& where) {
    data.push_back({ids_field(j, "inputs", where), ids_field(j, "targets", where)});
  });
  if (data.empty()) throw InputError("'" + path + "' holds no examples");
  return data;
}

inline Params<float> initial_params(const RunConfig& rc, const Vocab& vocab, const std::string& init) {
  if (!init.empty()) {
    auto p = load_checkpoint<float>(init);
    if (p.config.vocab_size != vocab.size()) {
      throw InputError("checkpoint vocabulary size " + std::to_string(p.config.vocab_size) +
                       " does not match the active vocabulary (" + std::to_string(vocab.size()) + ")");
    }
    return p;
  }
  return init_params<float>(model_config(rc, vocab), rc.seed());
}

inline void write_training_outputs(const fs::path& out, const TrainResult<float>& r) {
  save_checkpoint((out / "model.ckpt").string(), r.params);
  auto os = open_out(out / "trace.tsv");
  write_trace_tsv(os, r.trace);
}

inline CheckpointHook<float> periodic_checkpoints(const fs::path& out) {
  return [out](long step, const Params<float>& p) {
    save_checkpoint((out / ("checkpoint-" + std::to_string(step) + ".ckpt")).string(), p);
  };
}

inline json model_json(const ModelConfig& c) { return model_config_fields(c); }

inline TrainResult<float> cmd_train(const RunConfig& rc, const std::string& data_path, const std::string& init,
                                    const std::string& out_dir) {
  const fs::path out = prepare_out(out_dir);
  const Vocab vocab = load_vocab(rc);
  const auto data = read_examples(data_path);
  for (const auto& ex : data) {
    for (const auto* seq : {&ex.inputs, &ex.targets}) {
      for (TokenId t : *seq) {
        if (t < 0 || t >= vocab.size()) throw InputError("example token id " + std::to_string(t) + " out of range");
      }
    }
  }
  auto result = train(initial_params(rc, vocab, init), data, train_config(rc), periodic_checkpoints(out));
  write_training_outputs(out, result);
  write_manifest(out, "train", rc, {{"data", data_path}, {"init", init}},
                 {{"model", model_json(result.params.config)},
                  {"examples", data.size()},
                  {"final_loss", result.trace.back().loss}});
  return result;
}

inline TrainResult<float> cmd_finetune(const RunConfig& rc, const std::string& pairs_path, const std::string& init,
                                       const std::string& out_dir) {
  const fs::path out = prepare_out(out_dir);
  const Vocab vocab = load_vocab(rc);
  const auto lengths = finetune_preset(rc.str("finetune.preset"));
  const auto& task = rc.str("finetune.task");
  std::vector<TextPair> pairs;
  json extra;
  if (task == "pairs") {
    for_each_jsonl(pairs_path, [&](const json& j, const std::string& where) {
      pairs.push_back({string_field(j, "input", where), string_field(j, "target", where)});
    });
  } else if (task == "qa") {
    const auto records = read_qa_jsonl(pairs_path);
    const auto [train_set, dev_set] = split_train_dev(records, rc.real("finetune.split_ratio"), rc.seed());
    for (const auto& r : train_set) {
      auto [in, tg] = tydiqa_to_seq2seq(r);
      pairs.push_back({std::move(in), std::move(tg)});
    }
    auto dev = open_out(out / "dev.jsonl");
    for (const auto& r : dev_set) {
      auto [in, tg] = tydiqa_to_seq2seq(r);
      dev << json{{"id", r.id}, {"input", in}, {"text", tg}}.dump() << '\n';
    }
    extra["train_records"] = train_set.size();
    extra["dev_records"] = dev_set.size();
  } else {
    throw InputError("finetune.task must be 'pairs' or 'qa', got '" + task + "'");
  }
  if (pairs.empty()) throw InputError("no finetuning pairs in '" + pairs_path + "'");
  auto result = finetune(initial_params(rc, vocab, init), pairs, lengths, train_config(rc), vocab,
                         periodic_checkpoints(out));
  write_training_outputs(out, result);
  extra["model"] = model_json(result.params.config);
  extra["lengths"] = {{"input_len", lengths.input_len}, {"target_len", lengths.target_len}};
  extra["pairs"] = pairs.size();
  write_manifest(out, "finetune", rc, {{"pairs", pairs_path}, {"init", init}}, extra);
  return result;
}

/// Greedy decoding of every input record; predictions.jsonl mirrors the
/// input ids.
inline void cmd_generate(const RunConfig& rc, const std::string& checkpoint, const std::string& inputs_path,
                         const std::string& out_dir) {
  const fs::path out = prepare_out(out_dir);
  const Vocab vocab = load_vocab(rc);
  const auto params = load_checkpoint<float>(checkpoint);
  if (params.config.vocab_size != vocab.size()) throw InputError("checkpoint vocabulary does not match corpus.vocab");
  const auto records = read_text_records(inputs_path);
  const long long max_len = rc.integer("generate.max_len");
  const long long max_input = rc.integer("generate.max_input");
  if (max_len < 0 || max_input <= 0) throw InputError("generate.max_len must be >= 0 and generate.max_input > 0");
  auto os = open_out(out / "predictions.jsonl");
  for (const auto& r : records) {
    auto ids = vocab.encode(r.text);
    if (ids.empty()) throw InputError("input '" + r.id + "' encodes to no tokens");
    if (ids.size() > static_cast<std::size_t>(max_input)) ids.resize(static_cast<std::size_t>(max_input));
    auto gen = generate(params, std::span<const TokenId>(ids), static_cast<std::size_t>(max_len));
    if (!gen.empty() && gen.back() == Vocab::kEos) gen.pop_back();
    os << json{{"id", r.id}, {"text", vocab.decode(gen)}}.dump() << '\n';
  }
  write_manifest(out, "generate", rc, {{"checkpoint", checkpoint}, {"inputs", inputs_path}},
                 {{"records", records.size()}});
}

struct EvalResult {
  std::optional<RougeScore> rouge;
  std::optional<QaScore> qa;
};

/// Scores predictions against references matched by id. For QA, a
/// reference may carry an "answers" array of golds instead of "text".
inline EvalResult cmd_eval(const RunConfig& rc, const std::string& predictions, const std::string& references,
                           const std::string& out_dir, std::ostream& report) {
  const fs::path out = prepare_out(out_dir);
  const auto& task = rc.str("eval.task");
  const auto& lang = rc.str("eval.lang");
  std::optional<Vocab> pieces;
  if (!rc.str("corpus.vocab").empty()) pieces = load_vocab(rc);
  const Vocab* tok = pieces ? &*pieces : nullptr;

  std::map<std::string, std::string> pred;
  for (const auto& r : read_text_records(predictions)) {
    if (!pred.emplace(r.id, r.text).second) throw InputError("duplicate prediction id '" + r.id + "'");
  }
  std::vector<std::string> outs, refs;
  std::vector<std::vector<std::string>> golds;
  for_each_jsonl(references, [&](const json& j, const std::string& where) {
    const auto id = string_field(j, "id", where);
    auto it = pred.find(id);
    if (it == pred.end()) throw InputError(where + "no prediction for id '" + id + "'");
    outs.push_back(it->second);
    if (task == "qa" && j.contains("answers")) {
      std::vector<std::string> g;
      for (const auto& a : j["answers"]) {
        if (!a.is_string()) throw InputError(where + "answers must be strings");
        g.push_back(a.get<std::string>());
      }
      if (g.empty()) throw InputError(where + "answers is empty");
      golds.push_back(std::move(g));
    } else {
      const auto text = string_field(j, "text", where);
      refs.push_back(text);
      golds.push_back({text});
    }
    pred.erase(it);
  });
  if (!pred.empty()) throw InputError("prediction id '" + pred.begin()->first + "' has no reference");

  EvalResult result;
  if (task == "summarization") {
    result.rouge = evaluate_summarization(outs, refs, lang, tok);
    auto os = open_out(out / "rouge.tsv");
    write_rouge_report(os, *result.rouge);
    write_rouge_report(report, *result.rouge);
  } else if (task == "qa") {
    result.qa = evaluate_qa(outs, golds, lang, tok);
    auto os = open_out(out / "qa.tsv");
    write_qa_report(os, *result.qa);
    write_qa_report(report, *result.qa);
  } else {
    throw InputError("eval.task must be 'summarization' or 'qa', got '" + task + "'");
  }
  write_manifest(out, "eval", rc, {{"predictions", predictions}, {"references", references}},
                 {{"pairs", outs.size()}});
  return result;
}

}  // namespace mlongt5::cli
