#include "parattn/training.hpp"

#include "parattn/checkpoint.hpp"
#include "parattn/errors.hpp"
#include "parattn/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>

namespace parattn {

Tensor kl_div_loss(const Tensor& logits, std::span<const int> targets, double smoothing, int pad_id) {
  if (!(smoothing >= 0.0 && smoothing < 1.0))
    throw ContractError("label smoothing must lie in [0, 1)");
  const Index rows = logits.rows();
  const Index vocab = logits.cols();
  if (static_cast<Index>(targets.size()) != rows)
    throw DimensionError("kl_div_loss: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " logit rows");
  if (vocab < 2) throw DimensionError("kl_div_loss: vocabulary must have at least 2 entries");

  const double off = smoothing / static_cast<double>(vocab - 1);
  const double on = 1.0 - smoothing;
  // Σ t ln t is the same for every row.
  const double entropy_term =
      (on > 0.0 ? on * std::log(on) : 0.0) +
      (off > 0.0 ? static_cast<double>(vocab - 1) * off * std::log(off) : 0.0);

  Matrix probs(rows, vocab);
  std::vector<Index> valid;
  double total = 0.0;
  for (Index r = 0; r < rows; ++r) {
    const int gold = targets[static_cast<std::size_t>(r)];
    if (gold == pad_id) continue;
    if (gold < 0 || gold >= vocab)
      throw VocabularyError("kl_div_loss: target id " + std::to_string(gold) + " outside vocabulary");
    const auto x = logits.value().row(r);
    const double m = x.maxCoeff();
    const double lse = m + std::log((x.array() - m).exp().sum());
    // Σ_j t_j log p_j with log p_j = x_j - lse.
    const double cross = off * (x.sum() - x(gold) - static_cast<double>(vocab - 1) * lse) +
                         on * (x(gold) - lse);
    total += entropy_term - cross;
    probs.row(r) = (x.array() - lse).exp();
    valid.push_back(r);
  }
  if (valid.empty()) throw ContractError("kl_div_loss: every target position is padding");
  const double n = static_cast<double>(valid.size());
  Matrix out(1, 1);
  out(0, 0) = std::max(total / n, 0.0);

  std::vector<int> gold_ids(targets.begin(), targets.end());
  return logits.tape().record(
      std::move(out), {logits},
      [logits, probs = std::move(probs), valid = std::move(valid), gold_ids = std::move(gold_ids),
       on, off, n](const Matrix& g, const Matrix&) {
        Matrix d = Matrix::Zero(logits.rows(), logits.cols());
        const double s = g(0, 0) / n;
        for (Index r : valid) {
          d.row(r) = (probs.row(r).array() - off) * s;
          d(r, gold_ids[static_cast<std::size_t>(r)]) = (probs(r, gold_ids[static_cast<std::size_t>(r)]) - on) * s;
        }
        logits.tape().accumulate(logits, d);
      });
}

AdamState make_adam_state(std::span<const Parameter* const> params, const AdamOptions& options) {
  AdamState s;
  s.options = options;
  for (const auto* p : params) {
    s.m.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    s.v.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
  return s;
}

void adam_step(std::span<Parameter* const> params, AdamState& state) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw DimensionError("adam_step: optimizer state does not match parameter list");
  const auto& o = state.options;
  ++state.step;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols())
      throw DimensionError("adam_step: moment shape differs from parameter " + p.name);
    if (p.grad.size() == 0) p.zero_grad();
    m = o.beta1 * m + (1.0 - o.beta1) * p.grad;
    v = o.beta2 * v + (1.0 - o.beta2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= o.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + o.eps);
  }
}

void zero_grads(std::span<Parameter* const> params) {
  for (auto* p : params) p->zero_grad();
}

namespace {

int argmax_lowest(const Matrix& logits, Index row) {
  Index best = 0;
  for (Index j = 1; j < logits.cols(); ++j)
    if (logits(row, j) > logits(row, best)) best = j;
  return static_cast<int>(best);
}

}  // namespace

std::vector<std::vector<int>> greedy_decode_batch(const TransformerModel& model,
                                                  std::span<const std::vector<int>> sources,
                                                  int max_len, int batch_size) {
  std::vector<std::vector<int>> results(sources.size());
  const int model_max = model.config().max_len;
  for (std::size_t start = 0; start < sources.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(sources.size(), start + static_cast<std::size_t>(batch_size));
    const auto chunk = sources.subspan(start, end - start);
    const SequenceBatch src = pad_sequences(chunk);
    const int limit = max_len > 0 ? std::min(max_len, model_max)
                                  : std::min(model_max, 2 * src.len + 10);

    Matrix memory;
    {
      Tape tape(false);
      memory = model.encode(tape, src).value();
    }
    const int n = src.batch;
    std::vector<std::vector<int>> out(static_cast<std::size_t>(n));
    std::vector<bool> done(static_cast<std::size_t>(n), false);
    int remaining = n;
    for (int t = 1; t <= limit && remaining > 0; ++t) {
      SequenceBatch in;
      in.batch = n;
      in.len = t;
      in.lengths.assign(static_cast<std::size_t>(n), t);
      in.ids.assign(static_cast<std::size_t>(n) * t, kPad);
      for (int b = 0; b < n; ++b) {
        in.ids[static_cast<std::size_t>(b) * t] = kBos;
        const auto& o = out[static_cast<std::size_t>(b)];
        for (int k = 0; k + 1 < t && k < static_cast<int>(o.size()); ++k)
          in.ids[static_cast<std::size_t>(b) * t + k + 1] = o[static_cast<std::size_t>(k)];
      }
      Tape tape(false);
      Tensor logits = model.decode(tape.constant(memory), src, in);
      for (int b = 0; b < n; ++b) {
        if (done[static_cast<std::size_t>(b)]) continue;
        const int tok = argmax_lowest(logits.value(), static_cast<Index>(b) * t + (t - 1));
        if (tok == kEos) {
          done[static_cast<std::size_t>(b)] = true;
          --remaining;
        } else {
          out[static_cast<std::size_t>(b)].push_back(tok);
        }
      }
    }
    for (int b = 0; b < n; ++b) results[start + static_cast<std::size_t>(b)] = std::move(out[static_cast<std::size_t>(b)]);
  }
  return results;
}

std::vector<int> greedy_decode(const TransformerModel& model, std::span<const int> src, int max_len) {
  if (max_len < 1) return {};
  std::vector<std::vector<int>> one{std::vector<int>(src.begin(), src.end())};
  return greedy_decode_batch(model, one, max_len, 1).front();
}

void TrainReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write report " + path.string());
  os << "epoch,train_loss,val_loss,val_bleu,seconds\n" << std::setprecision(17);
  for (const auto& e : epochs)
    os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_bleu << ','
       << e.seconds << '\n';
}

double evaluate_loss(const TransformerModel& model, std::span<const EncodedPair> corpus,
                     double smoothing, int batch_size) {
  if (corpus.empty()) return 0.0;
  double weighted = 0.0;
  long long tokens = 0;
  for (std::size_t start = 0; start < corpus.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> ids;
    for (std::size_t i = start; i < std::min(corpus.size(), start + static_cast<std::size_t>(batch_size)); ++i)
      ids.push_back(i);
    const TranslationBatch batch = make_batch(corpus, ids);
    Tape tape(false);
    Tensor loss = kl_div_loss(model.forward(tape, batch), batch.tgt_out.ids, smoothing);
    long long n = 0;
    for (int l : batch.tgt_out.lengths) n += l;
    weighted += loss.value()(0, 0) * static_cast<double>(n);
    tokens += n;
  }
  return weighted / static_cast<double>(tokens);
}

double evaluate_bleu(const TransformerModel& model, std::span<const EncodedPair> corpus, bool smoothing) {
  if (corpus.empty()) return 0.0;
  std::vector<std::vector<int>> sources;
  std::vector<std::vector<int>> references;
  for (const auto& p : corpus) {
    sources.push_back(p.source);
    references.push_back(p.target);
  }
  const auto hyps = greedy_decode_batch(model, sources);
  BleuOptions options;
  options.smoothing = smoothing;
  return corpus_bleu<int>(hyps, references, options).score;
}

TrainReport train(TransformerModel& model, const TrainingData& data, const TrainOptions& options,
                  TrainState& state) {
  if (data.train.empty()) throw ContractError("train: empty training corpus");
  if (options.epochs < 1) throw ContractError("train: epochs must be >= 1");
  auto params = model.parameters();
  if (state.adam.m.empty()) {
    std::vector<const Parameter*> cp(params.begin(), params.end());
    state.adam = make_adam_state(cp, options.adam);
  }
  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);

  using Clock = std::chrono::steady_clock;
  const auto run_start = Clock::now();
  for (int epoch = state.epochs_done + 1; epoch <= options.epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    const auto plan = batch_plan(data.train, options.batch_size, options.seed, epoch);
    double weighted = 0.0;
    long long tokens = 0;
    for (std::size_t bi = 0; bi < plan.size(); ++bi) {
      const TranslationBatch batch = make_batch(data.train, plan[bi]);
      zero_grads(params);
      Tape tape;
      Tensor loss = kl_div_loss(model.forward(tape, batch), batch.tgt_out.ids, options.smoothing);
      const double value = loss.value()(0, 0);
      if (!std::isfinite(value))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(bi));
      tape.backward(loss);
      adam_step(params, state.adam);
      long long n = 0;
      for (int l : batch.tgt_out.lengths) n += l;
      weighted += value * static_cast<double>(n);
      tokens += n;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = weighted / static_cast<double>(tokens);
    rec.val_loss = evaluate_loss(model, data.valid, options.smoothing);
    rec.val_bleu = evaluate_bleu(model, data.valid, options.bleu_smoothing);
    state.epochs_done = epoch;
    if (!options.checkpoint_dir.empty()) {
      rec.seconds = std::chrono::duration<double>(Clock::now() - epoch_start).count();
      state.report.epochs.push_back(rec);
      save_checkpoint(options.checkpoint_dir / ("epoch_" + std::to_string(epoch) + ".ckpt"), model,
                      data.src_vocab, data.tgt_vocab, state);
      state.report.epochs.back().seconds =
          std::chrono::duration<double>(Clock::now() - epoch_start).count();
    } else {
      rec.seconds = std::chrono::duration<double>(Clock::now() - epoch_start).count();
      state.report.epochs.push_back(rec);
    }
    if (options.on_epoch) options.on_epoch(state.report.epochs.back());
  }
  state.report.total_seconds += std::chrono::duration<double>(Clock::now() - run_start).count();
  return state.report;
}

TrainReport train(TransformerModel& model, const TrainingData& data, const TrainOptions& options) {
  TrainState state;
  return train(model, data, options, state);
}

}  // namespace parattn
