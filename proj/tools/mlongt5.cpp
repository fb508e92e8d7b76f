// mlongt5: corpus statistics, pretraining data, training, finetuning,
// generation and evaluation from the command line.

#include <CLI11.hpp>

#include <iostream>

#include "mlongt5/cli.hpp"

using namespace mlongt5;

namespace {

struct Globals {
  std::string config;
  std::string out;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> vocab;
};

cli::RunConfig resolve(const Globals& g) {
  cli::RunConfig rc;
  if (!g.config.empty()) rc.load_file(g.config);
  for (const auto& s : g.sets) rc.apply(s);
  if (g.seed) rc.set("run.seed", std::to_string(*g.seed));
  if (g.vocab) rc.set("corpus.vocab", *g.vocab);
  return rc;
}

template <class T>
std::string number_text(const T& v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mlongt5: long-input multilingual seq2seq pipeline"};
  app.set_version_flag("--version", std::string(cli::kVersion));
  app.require_subcommand(1);

  Globals g;
  app.add_option("--config", g.config, "key=value file or an earlier manifest.json");
  app.add_option("--out", g.out, "Output directory; nothing is written elsewhere");
  app.add_option("--set", g.sets, "Override one setting, key=value (repeatable)");
  app.add_option("--seed", g.seed, "Shorthand for --set run.seed=N");
  app.add_option("--vocab", g.vocab, "Piece vocabulary file; default is the byte vocabulary");
  app.fallthrough();

  std::string corpus, data, init, pairs, checkpoint, inputs, predictions, references;
  std::optional<std::uint64_t> budget;
  std::optional<double> epoch_cap, rate;
  std::optional<long> steps;

  auto* stats = app.add_subcommand("stats", "Per-language document and token counts as TSV");
  stats->add_option("corpus", corpus, "JSONL corpus")->required();

  auto* pre = app.add_subcommand("pretrain-data", "Sample and corrupt pretraining examples");
  pre->add_option("corpus", corpus, "JSONL corpus")->required();
  pre->add_option("--budget", budget, "Total token budget for the language allocation");
  pre->add_option("--epoch-cap", epoch_cap, "Maximum epochs over any one language");
  pre->add_option("--rate", rate, "Corruption rate of the span corruptors");

  auto* tr = app.add_subcommand("train", "Pretrain on examples.jsonl");
  tr->add_option("data", data, "examples.jsonl from pretrain-data")->required();
  tr->add_option("--init", init, "Checkpoint to start from");
  tr->add_option("--steps", steps, "Training steps");

  auto* ft = app.add_subcommand("finetune", "Finetune on text pairs or QA records");
  ft->add_option("pairs", pairs, "JSONL of {input, target}, or QA records with finetune.task=qa")->required();
  ft->add_option("--init", init, "Checkpoint to start from");
  ft->add_option("--steps", steps, "Training steps");

  auto* gen = app.add_subcommand("generate", "Greedy decoding of {id, text} records");
  gen->add_option("checkpoint", checkpoint, "Model checkpoint")->required();
  gen->add_option("inputs", inputs, "JSONL of {id, text}")->required();

  auto* ev = app.add_subcommand("eval", "Score predictions against references");
  ev->add_option("predictions", predictions, "JSONL of {id, text}")->required();
  ev->add_option("references", references, "JSONL of {id, text} or {id, answers}")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    auto rc = resolve(g);
    if (budget) rc.set("unimax.budget", std::to_string(*budget));
    if (epoch_cap) rc.set("unimax.epoch_cap", number_text(*epoch_cap));
    if (rate) rc.set("denoise.rate", number_text(*rate));
    if (steps) rc.set("train.steps", std::to_string(*steps));

    if (*stats) {
      cli::cmd_stats(rc, corpus, std::cout);
    } else if (*pre) {
      const auto n = cli::cmd_pretrain_data(rc, corpus, g.out);
      std::cerr << "wrote " << n << " examples\n";
    } else if (*tr) {
      const auto r = cli::cmd_train(rc, data, init, g.out);
      std::cerr << "final loss " << r.trace.back().loss << '\n';
    } else if (*ft) {
      const auto r = cli::cmd_finetune(rc, pairs, init, g.out);
      std::cerr << "final loss " << r.trace.back().loss << '\n';
    } else if (*gen) {
      cli::cmd_generate(rc, checkpoint, inputs, g.out);
    } else if (*ev) {
      cli::cmd_eval(rc, predictions, references, g.out, std::cout);
    }
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
