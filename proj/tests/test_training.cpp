#include <gtest/gtest.h>

#include "oracles.hpp"
#include "parattn/cli.hpp"
#include "parattn/errors.hpp"
#include "parattn/training.hpp"

#include <cmath>
#include <fstream>

using namespace parattn;

namespace {

ModelConfig tiny(EncoderVariant v, int branches = 2) {
  ModelConfig c;
  c.variant = v;
  c.branches = branches;
  c.decoder_depth = 1;
  c.d_model = 8;
  c.d_ff = 16;
  c.heads = 2;
  c.max_len = 16;
  c.src_vocab = 12;
  c.tgt_vocab = 12;
  return c;
}

const EncoderVariant kAll[] = {EncoderVariant::Stacked, EncoderVariant::APA, EncoderVariant::ACPA,
                               EncoderVariant::AAPA};

double kl_value(const Matrix& logits, const std::vector<int>& targets, double eps) {
  Tape tape(false);
  return kl_div_loss(tape.constant(logits), targets, eps).value()(0, 0);
}

std::vector<double> row(const Matrix& m, Index r) { return {m.row(r).begin(), m.row(r).end()}; }

TrainingData toy_data(int n_train, int n_valid) {
  TrainingData d;
  std::vector<Sentence> lines;
  for (int k = 0; k < 8; ++k) lines.push_back({synthetic_token(k)});
  d.src_vocab = d.tgt_vocab = Vocabulary::build(lines);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> tok(4, 11), len(2, 5);
  auto make = [&](int n) {
    std::vector<EncodedPair> out;
    for (int i = 0; i < n; ++i) {
      std::vector<int> s;
      for (int k = len(rng); k > 0; --k) s.push_back(tok(rng));
      out.push_back({s, s});
    }
    return out;
  };
  d.train = make(n_train);
  d.valid = make(n_valid);
  return d;
}

TrainOptions quick(int epochs) {
  TrainOptions o;
  o.epochs = epochs;
  o.batch_size = 4;
  o.seed = 5;
  return o;
}

}  // namespace

TEST(KlLoss, UniformLogitsMatchScalarOracle) {
  const Matrix logits = Matrix::Zero(1, 3);
  const double got = kl_value(logits, {1}, 0.1);
  const double expected = 0.9 * std::log(0.9 * 3) + 2 * 0.05 * std::log(0.05 * 3);
  EXPECT_NEAR(got, expected, 1e-12);
  EXPECT_NEAR(got, oracle::kl_row({0, 0, 0}, 1, 0.1), 1e-12);
}

TEST(KlLoss, ExtremeLogitsStayFinite) {
  Matrix logits(2, 4);
  logits << 40, -40, 40, -40, -40, -40, -40, 40;
  const double got = kl_value(logits, {1, 3}, 0.1);
  ASSERT_TRUE(std::isfinite(got));
  const double expected = 0.5 * (oracle::kl_row(row(logits, 0), 1, 0.1) + oracle::kl_row(row(logits, 1), 3, 0.1));
  EXPECT_LT(std::abs(got - expected), 1e-9);
}

TEST(KlLoss, PaddingRowsAreIgnored) {
  std::mt19937_64 rng(1);
  const Matrix logits = oracle::random_matrix(3, 5, rng, 3.0);
  const double with_pad = kl_value(logits, {2, kPad, 4}, 0.1);
  const double expected = 0.5 * (oracle::kl_row(row(logits, 0), 2, 0.1) + oracle::kl_row(row(logits, 2), 4, 0.1));
  EXPECT_NEAR(with_pad, expected, 1e-12);
  Matrix changed = logits;
  changed.row(1).setConstant(100.0);
  EXPECT_EQ(kl_value(changed, {2, kPad, 4}, 0.1), with_pad);
}

TEST(KlLoss, NonNegativeOnRandomInputs) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> gold(1, 6);
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix logits = oracle::random_matrix(4, 7, rng, 10.0);
    const std::vector<int> t{gold(rng), gold(rng), gold(rng), gold(rng)};
    for (double eps : {0.0, 0.1, 0.5}) EXPECT_GE(kl_value(logits, t, eps), 0.0);
  }
}

TEST(KlLoss, ContractAndShapeErrors) {
  const Matrix logits = Matrix::Zero(2, 4);
  EXPECT_THROW(kl_value(logits, {kPad, kPad}, 0.1), ContractError);
  EXPECT_THROW(kl_value(logits, {1, 2}, 1.0), ContractError);
  EXPECT_THROW(kl_value(logits, {1, 2}, -0.1), ContractError);
  EXPECT_THROW(kl_value(logits, {1}, 0.1), DimensionError);
  EXPECT_THROW(kl_value(logits, {1, 4}, 0.1), VocabularyError);
}

TEST(KlLoss, GradientMatchesCentralDifferences) {
  std::mt19937_64 rng(3);
  Parameter p("logits", oracle::random_matrix(3, 5, rng, 2.0));
  const std::vector<int> t{1, kPad, 3};
  const auto r = oracle::check_gradients({&p}, [&](Tape& tape) { return kl_div_loss(tape.parameter(p), t, 0.1); });
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Adam, UnitGradientFirstStepMovesByLearningRate) {
  Parameter p("p", Matrix::Constant(1, 1, 0.5));
  p.grad = Matrix::Ones(1, 1);
  std::vector<Parameter*> ps{&p};
  AdamState s = make_adam_state(std::vector<const Parameter*>{&p}, AdamOptions{});
  adam_step(ps, s);
  EXPECT_EQ(s.step, 1);
  EXPECT_NEAR(p.value(0, 0), 0.5 - 1e-3, 1e-12);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Parameter p("p", Matrix::Constant(2, 2, 0.25));
  p.zero_grad();
  std::vector<Parameter*> ps{&p};
  AdamState s = make_adam_state(std::vector<const Parameter*>{&p}, AdamOptions{});
  for (int i = 0; i < 3; ++i) adam_step(ps, s);
  EXPECT_EQ(p.value, Matrix::Constant(2, 2, 0.25));
}

TEST(Adam, MatchesScalarOracleOverSteps) {
  Matrix init(1, 3);
  init << 0.1, -0.2, 0.3;
  Parameter p("p", init);
  std::vector<Parameter*> ps{&p};
  const AdamOptions o{0.01, 0.9, 0.98, 1e-9};
  AdamState s = make_adam_state(std::vector<const Parameter*>{&p}, o);
  std::vector<oracle::ScalarAdam> ref(3, oracle::ScalarAdam{o.lr, o.beta1, o.beta2, o.eps});
  std::vector<double> expect{0.1, -0.2, 0.3};
  Matrix g(1, 3);
  g << 1.0, -2.0, 0.5;
  for (int step = 0; step < 5; ++step) {
    p.grad = g * (1.0 + step);
    adam_step(ps, s);
    for (int j = 0; j < 3; ++j) expect[static_cast<std::size_t>(j)] = ref[static_cast<std::size_t>(j)].step(expect[static_cast<std::size_t>(j)], p.grad(0, j));
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(p.value(0, j), expect[static_cast<std::size_t>(j)], 1e-12);
  }
}

TEST(Adam, StateMismatchThrows) {
  Parameter p("p", Matrix::Zero(1, 1));
  std::vector<Parameter*> ps{&p};
  AdamState s;
  EXPECT_THROW(adam_step(ps, s), DimensionError);
}

TEST(Greedy, ForcedEosGivesEmptyOutput) {
  TransformerModel m(tiny(EncoderVariant::AAPA));
  const_cast<Parameter&>(m.output_bias()).value(0, kEos) = 1e6;
  const std::vector<int> src{4, 5, 6};
  EXPECT_TRUE(greedy_decode(m, src, 10).empty());
}

TEST(Greedy, OutputRespectsLengthCap) {
  TransformerModel m(tiny(EncoderVariant::ACPA));
  const_cast<Parameter&>(m.output_bias()).value(0, 7) = 1e6;
  const std::vector<int> src{4, 5, 6};
  EXPECT_EQ(greedy_decode(m, src, 5), std::vector<int>(5, 7));
  EXPECT_TRUE(greedy_decode(m, src, 0).empty());
  const std::vector<std::vector<int>> sources{src, {4}};
  for (const auto& out : greedy_decode_batch(m, sources)) EXPECT_LE(out.size(), 16u);
}

TEST(Greedy, BatchAgreesWithSingleDecoding) {
  TransformerModel m(tiny(EncoderVariant::APA, 3));
  const std::vector<std::vector<int>> sources{{4, 5, 6, 7}, {8}, {9, 10, 11}};
  const auto batched = greedy_decode_batch(m, sources, 8, 2);
  for (std::size_t i = 0; i < sources.size(); ++i) EXPECT_EQ(batched[i], greedy_decode(m, sources[i], 8));
}

TEST(Greedy, MatchesFullRecomputationOracle) {
  TransformerModel m(tiny(EncoderVariant::Stacked, 2));
  const std::vector<int> src{4, 9, 6};
  const auto got = greedy_decode(m, src, 6);
  std::vector<int> prefix{kBos};
  std::vector<int> expect;
  for (int t = 0; t < 6; ++t) {
    const Matrix logits = oracle::model_logits(m, src, prefix);
    Index best = 0;
    for (Index j = 1; j < logits.cols(); ++j)
      if (logits(logits.rows() - 1, j) > logits(logits.rows() - 1, best)) best = j;
    if (best == kEos) break;
    expect.push_back(static_cast<int>(best));
    prefix.push_back(static_cast<int>(best));
  }
  EXPECT_EQ(got, expect);
}

TEST(Training, OneSmallStepLowersBatchLoss) {
  const std::vector<EncodedPair> pairs{{{4, 5, 6}, {4, 5, 6}}, {{7, 8}, {7, 8}}};
  const std::vector<std::size_t> ids{0, 1};
  const TranslationBatch batch = make_batch(pairs, ids);
  for (auto v : kAll) {
    TransformerModel m(tiny(v));
    auto params = m.parameters();
    AdamOptions o;
    o.lr = 1e-4;
    AdamState s = make_adam_state(std::vector<const Parameter*>(params.begin(), params.end()), o);
    zero_grads(params);
    Tape tape;
    Tensor loss = kl_div_loss(m.forward(tape, batch), batch.tgt_out.ids, 0.1);
    const double before = loss.value()(0, 0);
    tape.backward(loss);
    adam_step(params, s);
    Tape after(false);
    EXPECT_LT(kl_div_loss(m.forward(after, batch), batch.tgt_out.ids, 0.1).value()(0, 0), before)
        << to_string(v);
  }
}

TEST(Training, SingleEpochOnTwoSentences) {
  const TrainingData d = toy_data(2, 2);
  TransformerModel m(tiny(EncoderVariant::AAPA));
  const TrainReport r = train(m, d, quick(1));
  ASSERT_EQ(r.epochs.size(), 1u);
  EXPECT_EQ(r.epochs[0].epoch, 1);
  EXPECT_TRUE(std::isfinite(r.epochs[0].train_loss));
  EXPECT_GE(r.epochs[0].val_bleu, 0.0);
  EXPECT_LE(r.epochs[0].val_bleu, 1.0);
}

TEST(Training, SameSeedGivesIdenticalReport) {
  const TrainingData d = toy_data(24, 6);
  TrainReport reports[2];
  for (auto& r : reports) {
    TransformerModel m(tiny(EncoderVariant::ACPA));
    r = train(m, d, quick(3));
  }
  ASSERT_EQ(reports[0].epochs.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(reports[0].epochs[e].train_loss, reports[1].epochs[e].train_loss);
    EXPECT_EQ(reports[0].epochs[e].val_loss, reports[1].epochs[e].val_loss);
    EXPECT_EQ(reports[0].epochs[e].val_bleu, reports[1].epochs[e].val_bleu);
  }
}

TEST(Training, EpochTimesSumToTotal) {
  const TrainingData d = toy_data(24, 6);
  TransformerModel m(tiny(EncoderVariant::APA));
  int calls = 0;
  TrainOptions o = quick(3);
  o.on_epoch = [&](const EpochRecord&) { ++calls; };
  const TrainReport r = train(m, d, o);
  EXPECT_EQ(calls, 3);
  double sum = 0;
  for (const auto& e : r.epochs) sum += e.seconds;
  EXPECT_LE(std::abs(sum - r.total_seconds), 0.01 * r.total_seconds);
}

TEST(Training, NonFiniteLossNamesEpochAndBatch) {
  const TrainingData d = toy_data(8, 2);
  TransformerModel m(tiny(EncoderVariant::Stacked));
  const_cast<Parameter&>(m.output_bias()).value(0, 5) = std::nan("");
  try {
    train(m, d, quick(2));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1, batch 0"), std::string::npos) << e.what();
  }
}

TEST(Training, ReportCsvRoundTripsValues) {
  TrainReport r;
  r.epochs.push_back({1, 0.1234567890123, 0.5, 0.25, 1.5});
  const auto path = std::filesystem::temp_directory_path() / "parattn_report_test.csv";
  r.write_csv(path);
  std::ifstream is(path);
  std::string header, line;
  std::getline(is, header);
  std::getline(is, line);
  EXPECT_EQ(header, "epoch,train_loss,val_loss,val_bleu,seconds");
  EXPECT_EQ(std::stod(line.substr(2, line.find(',', 2) - 2)), 0.1234567890123);
}

TEST(CopyTask, LossFallsAndTrainedModelCopies) {
  RunConfig c;
  c.task = "copy";
  c.variant = "aapa";
  c.branches = 2;
  c.epochs = 10;
  const TrainingData d = build_training_data(c);
  TransformerModel m(c.model_config(d.src_vocab.size(), d.tgt_vocab.size()));
  const TrainReport r = train(m, d, c.train_options());
  ASSERT_EQ(r.epochs.size(), 10u);
  EXPECT_LT(r.epochs[1].val_loss, r.epochs[0].val_loss);
  EXPECT_LT(r.epochs[2].val_loss, r.epochs[1].val_loss);
  const Sentence abc{"a", "b", "c"};
  const auto out = greedy_decode(m, d.src_vocab.encode(abc), 16);
  EXPECT_EQ(d.tgt_vocab.decode(out), abc);
}
