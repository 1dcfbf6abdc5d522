#pragma once

#include "parattn/data.hpp"
#include "parattn/model.hpp"
#include "parattn/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

namespace parattn {

/// Mean over non-pad rows of KL(t ‖ softmax(logits)), where t puts 1 - ε on the
/// gold id and ε / (vocab - 1) on every other id. Throws ContractError when every
/// target is padding or ε is outside [0, 1).
Tensor kl_div_loss(const Tensor& logits, std::span<const int> targets, double smoothing,
                   int pad_id = kPad);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-9;

  bool operator==(const AdamOptions&) const = default;
};

struct AdamState {
  AdamOptions options;
  long long step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

AdamState make_adam_state(std::span<const Parameter* const> params, const AdamOptions& options);

/// One bias-corrected Adam update of every parameter from its accumulated grad.
/// The step counter is incremented before the update.
void adam_step(std::span<Parameter* const> params, AdamState& state);

void zero_grads(std::span<Parameter* const> params);

/// Greedy decoding from BOS: append the argmax (lowest id on ties) of the last
/// logits row until EOS or `max_len` tokens. The EOS itself is not returned.
std::vector<int> greedy_decode(const TransformerModel& model, std::span<const int> src, int max_len);

/// Greedy decoding of many sources at once, in lockstep. `max_len` <= 0 picks
/// min(model max_len, 2 · longest source + 10) per batch.
std::vector<std::vector<int>> greedy_decode_batch(const TransformerModel& model,
                                                  std::span<const std::vector<int>> sources,
                                                  int max_len = 0, int batch_size = 64);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_bleu = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  double total_seconds = 0.0;

  /// Header `epoch,train_loss,val_loss,val_bleu,seconds`.
  void write_csv(const std::filesystem::path& path) const;
};

/// Optimizer position and history; everything a checkpoint needs to resume.
struct TrainState {
  AdamState adam;
  int epochs_done = 0;
  TrainReport report;
};

struct TrainingData {
  Vocabulary src_vocab;
  Vocabulary tgt_vocab;
  std::vector<EncodedPair> train;
  std::vector<EncodedPair> valid;
};

struct TrainOptions {
  int epochs = 10;
  int batch_size = 16;
  AdamOptions adam;
  double smoothing = 0.1;
  /// Seeds the per-epoch batch order.
  std::uint64_t seed = 1;
  bool bleu_smoothing = false;
  /// When set, `epoch_{k}.ckpt` is written there after every epoch.
  std::filesystem::path checkpoint_dir;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Teacher-forced mean token loss over a corpus (no gradients).
double evaluate_loss(const TransformerModel& model, std::span<const EncodedPair> corpus,
                     double smoothing, int batch_size = 64);
/// Corpus BLEU of greedy translations against the reference targets.
double evaluate_bleu(const TransformerModel& model, std::span<const EncodedPair> corpus,
                     bool smoothing = false);

/// Runs epochs state.epochs_done + 1 .. options.epochs of shuffled mini-batch Adam
/// on kl_div_loss, validating after each epoch. Throws NumericError naming the
/// epoch and batch when a loss is not finite.
TrainReport train(TransformerModel& model, const TrainingData& data, const TrainOptions& options,
                  TrainState& state);

/// Fresh-start convenience overload.
TrainReport train(TransformerModel& model, const TrainingData& data, const TrainOptions& options);

}  // namespace parattn
