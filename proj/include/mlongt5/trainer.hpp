#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mlongt5/common.hpp"
#include "mlongt5/model.hpp"
#include "mlongt5/tokenizer.hpp"

namespace mlongt5 {

struct SequencePair {
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;

  bool operator==(const SequencePair&) const = default;
};

struct TrainConfig {
  /// Batch size and step count of the full-scale pretraining run, kept for
  /// reference; desk-scale runs use the defaults below.
  static constexpr int kPretrainBatchSize = 256;
  static constexpr long kPretrainSteps = 1'000'000;

  int steps = 100;
  int batch_size = 8;
  double learning_rate = 0.01;
  int warmup_steps = 0;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 disables
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;

  void validate() const {
    if (steps <= 0) throw InputError("train config: steps must be positive");
    if (batch_size <= 0) throw InputError("train config: batch_size must be positive");
    if (!(learning_rate > 0.0)) throw InputError("train config: learning_rate must be positive");
    if (warmup_steps < 0 || warmup_steps > steps) throw InputError("train config: warmup must lie in [0, steps]");
    if (checkpoint_every < 0) throw InputError("train config: checkpoint_every must be non-negative");
  }
};

/// Inverse square root schedule, flat during warmup. Steps are 1-based.
inline double learning_rate_at(const TrainConfig& tc, long step) {
  const long pivot = std::max<long>({step, static_cast<long>(tc.warmup_steps), 1L});
  return tc.learning_rate / std::sqrt(static_cast<double>(pivot));
}

struct TraceRow {
  long step = 0;
  double loss = 0.0;
  double lr = 0.0;

  bool operator==(const TraceRow&) const = default;
};

inline void write_trace_tsv(std::ostream& os, std::span<const TraceRow> trace) {
  os << "step\tloss\tlr\n";
  char buf[96];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%ld\t%.9g\t%.9g\n", r.step, r.loss, r.lr);
    os << buf;
  }
}

/// Rows padded with pad ids to the longest sequence in the batch.
struct Batch {
  std::vector<std::vector<TokenId>> inputs;
  std::vector<std::vector<TokenId>> targets;
  std::vector<std::size_t> input_lengths;
  std::vector<std::size_t> target_lengths;
};

/// Examples [first, first + size) of `data`, cycling past the end.
inline Batch assemble_batch(std::span<const SequencePair> data, std::size_t first, std::size_t size) {
  if (data.empty()) throw InputError("training data is empty");
  Batch b;
  std::size_t max_in = 0, max_tg = 0;
  for (std::size_t i = 0; i < size; ++i) {
    const auto& ex = data[(first + i) % data.size()];
    max_in = std::max(max_in, ex.inputs.size());
    max_tg = std::max(max_tg, ex.targets.size());
  }
  for (std::size_t i = 0; i < size; ++i) {
    const auto& ex = data[(first + i) % data.size()];
    b.inputs.push_back(ex.inputs);
    b.inputs.back().resize(max_in, Vocab::kPad);
    b.targets.push_back(ex.targets);
    b.targets.back().resize(max_tg, Vocab::kPad);
    b.input_lengths.push_back(ex.inputs.size());
    b.target_lengths.push_back(ex.targets.size());
  }
  return b;
}

/// Adam with bias correction.
template <class T>
class AdamOptimizer {
 public:
  AdamOptimizer(const ParamStore<T>& like, const TrainConfig& tc)
      : m_(like.size(), T(0)), v_(like.size(), T(0)), beta1_(tc.beta1), beta2_(tc.beta2), eps_(tc.adam_epsilon) {}

  void step(std::span<T> params, std::span<const T> grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grads[i];
      m_[i] = static_cast<T>(beta1_ * m_[i] + (1.0 - beta1_) * g);
      v_[i] = static_cast<T>(beta2_ * v_[i] + (1.0 - beta2_) * g * g);
      const double mhat = m_[i] / c1;
      const double vhat = v_[i] / c2;
      params[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
    }
  }

 private:
  std::vector<T> m_, v_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

class TrainingError : public Error {
 public:
  TrainingError(long step, const std::string& what) : Error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

template <class T>
struct TrainResult {
  Params<T> params;
  std::vector<TraceRow> trace;
};

template <class T>
using CheckpointHook = std::function<void(long step, const Params<T>&)>;

/// Mean token loss of one padded batch and its gradient. Examples are
/// reduced in index order so the result is reproducible bit for bit.
template <class T>
T batch_loss_and_gradient(const Params<T>& p, const Batch& b, ParamStore<T>& G, Rng* dropout_rng) {
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < b.targets.size(); ++i) {
    tokens += count_non_pad(std::span(b.targets[i]).first(b.target_lengths[i]));
  }
  if (tokens == 0) throw Error("batch has no target tokens");
  T nll = 0;
  for (std::size_t i = 0; i < b.inputs.size(); ++i) {
    // Padding never reaches the network: each row runs at its true length.
    const auto in = std::span(b.inputs[i]).first(b.input_lengths[i]);
    const auto tg = std::span(b.targets[i]).first(b.target_lengths[i]);
    nll += accumulate_example_gradient(p, in, tg, static_cast<T>(tokens), G, dropout_rng);
  }
  return nll / static_cast<T>(tokens);
}

/// Deterministic training loop: one batch per step, cycling through `data`
/// in order, Adam under the inverse square root schedule.
template <class T>
TrainResult<T> train(Params<T> params, std::span<const SequencePair> data, const TrainConfig& tc,
                     const CheckpointHook<T>& on_checkpoint = {}) {
  tc.validate();
  if (data.empty()) throw InputError("training data is empty");
  AdamOptimizer<T> opt(params.store, tc);
  Rng dropout_rng(hash_combine(tc.seed, 0x64726f70ULL));
  Rng* drop = params.config.dropout > 0.0 ? &dropout_rng : nullptr;
  TrainResult<T> result;
  std::size_t cursor = 0;
  for (long step = 1; step <= tc.steps; ++step) {
    const Batch batch = assemble_batch(data, cursor, static_cast<std::size_t>(tc.batch_size));
    cursor = (cursor + static_cast<std::size_t>(tc.batch_size)) % data.size();
    ParamStore<T> grads = zero_grads(params);
    const T loss_value = batch_loss_and_gradient(params, batch, grads, drop);
    if (!std::isfinite(static_cast<double>(loss_value))) {
      throw TrainingError(step, "non-finite loss at step " + std::to_string(step));
    }
    const double lr = learning_rate_at(tc, step);
    opt.step(params.store.values(), grads.values(), lr);
    result.trace.push_back({step, static_cast<double>(loss_value), lr});
    if (on_checkpoint && tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0) on_checkpoint(step, params);
  }
  result.params = std::move(params);
  return result;
}

// ---------------------------------------------------------------------------
// Finetuning

struct FinetuneLengths {
  int input_len = 4096;
  int target_len = 512;
};

/// Per-task sequence lengths. QA targets reuse the pretraining target budget.
inline FinetuneLengths finetune_preset(const std::string& name) {
  if (name == "summarization") return {4096, 512};
  if (name == "qa-4k") return {4096, 910};
  if (name == "qa-8k") return {8192, 910};
  if (name == "qa-16k") return {16384, 910};
  throw InputError("unknown finetuning preset '" + name + "'");
}

struct TextPair {
  std::string input;
  std::string target;
};

/// Encodes and truncates a text pair; the target keeps room for eos.
inline SequencePair encode_pair(const TextPair& pair, const FinetuneLengths& lengths, const Vocab& tok) {
  if (lengths.input_len <= 0 || lengths.target_len <= 0) throw InputError("finetune lengths must be positive");
  SequencePair sp;
  sp.inputs = tok.encode(pair.input);
  if (sp.inputs.empty()) throw InputError("finetuning input encodes to no tokens");
  if (sp.inputs.size() > static_cast<std::size_t>(lengths.input_len)) sp.inputs.resize(static_cast<std::size_t>(lengths.input_len));
  sp.targets = tok.encode(pair.target);
  if (sp.targets.size() > static_cast<std::size_t>(lengths.target_len - 1)) {
    sp.targets.resize(static_cast<std::size_t>(lengths.target_len - 1));
  }
  sp.targets.push_back(Vocab::kEos);
  return sp;
}

template <class T>
TrainResult<T> finetune(Params<T> params, std::span<const TextPair> pairs, const FinetuneLengths& lengths,
                        const TrainConfig& tc, const Vocab& tok, const CheckpointHook<T>& on_checkpoint = {}) {
  std::vector<SequencePair> data;
  data.reserve(pairs.size());
  for (const auto& p : pairs) data.push_back(encode_pair(p, lengths, tok));
  return train(std::move(params), data, tc, on_checkpoint);
}

}  // namespace mlongt5
