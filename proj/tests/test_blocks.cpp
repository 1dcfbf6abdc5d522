#include <gtest/gtest.h>

#include "oracles.hpp"
#include "parattn/blocks.hpp"
#include "parattn/errors.hpp"

using namespace parattn;

namespace {

double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

AttentionLayout single(int len) { return AttentionLayout{1, len, len, {}}; }

AttentionLayout causal(int len) { return AttentionLayout{1, len, len, {make_causal_mask(len)}}; }

}  // namespace

TEST(PositionalEncoding, KnownEntries) {
  const Matrix pe = positional_encoding(4, 6);
  for (Index c = 0; c < 6; c += 2) {
    EXPECT_EQ(pe(0, c), 0.0);
    EXPECT_EQ(pe(0, c + 1), 1.0);
  }
  EXPECT_DOUBLE_EQ(pe(1, 0), std::sin(1.0));
  EXPECT_LT(max_abs_diff(pe, oracle::positional_encoding(4, 6)), 1e-15);
}

TEST(PositionalEncoding, BoundedAndRejectsOddWidth) {
  const Matrix pe = positional_encoding(512, 64);
  EXPECT_LE(pe.cwiseAbs().maxCoeff(), 1.0);
  EXPECT_THROW(positional_encoding(8, 7), ConfigError);
}

TEST(Embed, SingleTokenIsScaledRowPlusPosition) {
  std::mt19937_64 rng(1);
  const Parameter table("table", oracle::random_matrix(5, 4, rng));
  const Matrix pe = positional_encoding(8, 4);
  Tape tape;
  const std::vector<int> ids{0};
  const Matrix got = embed(tape, ids, 1, table, pe).value();
  EXPECT_LT(max_abs_diff(got, table.value.row(0) * 2.0 + pe.row(0)), 1e-15);
}

TEST(Embed, MatchesIndexLoopOracle) {
  std::mt19937_64 rng(2);
  const Parameter table("table", oracle::random_matrix(9, 6, rng));
  const Matrix pe = positional_encoding(16, 6);
  const std::vector<int> ids{3, 7, 3, 0, 8};
  Tape tape;
  const Matrix got = embed(tape, ids, 5, table, pe).value();
  EXPECT_LT(max_abs_diff(got, oracle::embed(ids, table.value)), 1e-12);
  EXPECT_LT(max_abs_diff(got.row(0) - pe.row(0), got.row(2) - pe.row(2)), 1e-15);
}

TEST(Embed, BatchedItemsRestartPositions) {
  std::mt19937_64 rng(3);
  const Parameter table("table", oracle::random_matrix(9, 4, rng));
  const Matrix pe = positional_encoding(16, 4);
  const std::vector<int> ids{1, 2, 3, 1, 2, 3};
  Tape tape;
  const Matrix got = embed(tape, ids, 3, table, pe).value();
  EXPECT_EQ(got.topRows(3), got.bottomRows(3));
}

TEST(Embed, OutOfRangeIdThrows) {
  std::mt19937_64 rng(4);
  const Parameter table("table", oracle::random_matrix(3, 4, rng));
  Tape tape;
  const std::vector<int> ids{1, 3};
  EXPECT_THROW(embed(tape, ids, 2, table, positional_encoding(4, 4)), VocabularyError);
}

TEST(EncoderLayer, ZeroOutputProjectionsLeaveDoubleNorm) {
  std::mt19937_64 rng(5);
  EncoderLayer layer = make_encoder_layer(8, 16, 2, rng, "enc");
  layer.self_attn.w_o.value.setZero();
  layer.ffn.w2.value.setZero();
  const Matrix x = oracle::random_matrix(5, 8, rng, 2.0);
  Tape tape;
  const Matrix got = encoder_layer_forward(tape.constant(x), layer, single(5)).value();
  EXPECT_LT(max_abs_diff(got, oracle::norm(oracle::norm(x, layer.norm1), layer.norm2)), 1e-12);
}

TEST(EncoderLayer, PreservesShape) {
  std::mt19937_64 rng(6);
  const EncoderLayer layer = make_encoder_layer(32, 64, 4, rng, "enc");
  Tape tape;
  const Tensor out = encoder_layer_forward(tape.constant(oracle::random_matrix(9, 32, rng)), layer, single(9));
  EXPECT_EQ(out.rows(), 9);
  EXPECT_EQ(out.cols(), 32);
}

TEST(EncoderLayer, FixedTinyWeightsMatchStepByStepOracle) {
  EncoderLayer layer;
  layer.self_attn.heads = 1;
  Matrix wq(2, 2), wk(2, 2), wv(2, 2), wo(2, 2), w1(2, 4), b1(1, 4), w2(4, 2), b2(1, 2);
  wq << 0.5, -0.25, 0.75, 1.0;
  wk << -0.5, 0.25, 1.0, 0.5;
  wv << 1.0, 0.5, -0.5, 0.25;
  wo << 0.25, 0.75, -1.0, 0.5;
  w1 << 0.5, -1.0, 0.25, 0.75, -0.5, 0.5, 1.0, -0.25;
  b1 << 0.1, -0.2, 0.05, 0.0;
  w2 << 0.5, -0.5, 0.25, 1.0, -0.75, 0.5, 1.0, 0.25;
  b2 << 0.05, -0.1;
  layer.self_attn.w_q = Parameter("w_q", wq);
  layer.self_attn.w_k = Parameter("w_k", wk);
  layer.self_attn.w_v = Parameter("w_v", wv);
  layer.self_attn.w_o = Parameter("w_o", wo);
  layer.ffn = {Parameter("w1", w1), Parameter("b1", b1), Parameter("w2", w2), Parameter("b2", b2)};
  Matrix g1(1, 2), g2(1, 2), n1(1, 2), n2(1, 2);
  g1 << 1.5, 0.5;
  n1 << 0.1, -0.1;
  g2 << 0.75, 1.25;
  n2 << 0.0, 0.2;
  layer.norm1 = {Parameter("g1", g1), Parameter("n1", n1)};
  layer.norm2 = {Parameter("g2", g2), Parameter("n2", n2)};
  Matrix x(3, 2);
  x << 1.0, -0.5, 0.25, 0.75, -1.0, 2.0;

  // attention, add, norm, FFN, add, norm: each step written out.
  const Matrix q = oracle::matmul(x, wq), k = oracle::matmul(x, wk), v = oracle::matmul(x, wv);
  const Matrix attn = oracle::matmul(oracle::attention(q, k, v, nullptr), wo);
  const Matrix y = oracle::layer_norm(x + attn, g1, n1, kLayerNormEps);
  const Matrix hidden = oracle::relu(oracle::add_row(oracle::matmul(y, w1), b1));
  const Matrix ffn = oracle::add_row(oracle::matmul(hidden, w2), b2);
  const Matrix expected = oracle::layer_norm(y + ffn, g2, n2, kLayerNormEps);

  Tape tape;
  const Matrix got = encoder_layer_forward(tape.constant(x), layer, single(3)).value();
  EXPECT_LT(max_abs_diff(got, expected), 1e-12);
}

TEST(EncoderLayer, SizeFormulaMatchesCount) {
  std::mt19937_64 rng(7);
  const EncoderLayer layer = make_encoder_layer(8, 12, 2, rng, "enc");
  std::vector<const Parameter*> ps;
  layer.collect(ps);
  Index n = 0;
  for (const auto* p : ps) n += p->size();
  EXPECT_EQ(n, encoder_layer_size(8, 12));
}

TEST(DecoderLayer, MatchesOracleAndLengthOneIsUnmasked) {
  std::mt19937_64 rng(8);
  const DecoderLayer layer = make_decoder_layer(8, 16, 2, rng, "dec");
  const Matrix memory = oracle::random_matrix(5, 8, rng);
  const Matrix y = oracle::random_matrix(4, 8, rng);
  const AttentionMask mask = make_causal_mask(4);
  Tape tape;
  const AttentionLayout cross{1, 4, 5, {}};
  const Matrix got =
      decoder_layer_forward(tape.constant(y), tape.constant(memory), layer, causal(4), cross).value();
  EXPECT_LT(max_abs_diff(got, oracle::decoder_layer(y, memory, layer, &mask.allowed, nullptr)), 1e-12);

  const Matrix y1 = y.topRows(1);
  const AttentionLayout cross1{1, 1, 5, {}};
  const Matrix masked = decoder_layer_forward(tape.constant(y1), tape.constant(memory), layer, causal(1), cross1).value();
  const Matrix open = decoder_layer_forward(tape.constant(y1), tape.constant(memory), layer, single(1), cross1).value();
  EXPECT_EQ(masked, open);
}

TEST(DecoderLayer, LaterPositionsDoNotLeakBackwards) {
  std::mt19937_64 rng(9);
  const DecoderLayer layer = make_decoder_layer(8, 16, 2, rng, "dec");
  const Matrix memory = oracle::random_matrix(3, 8, rng);
  Matrix y = oracle::random_matrix(4, 8, rng);
  const AttentionLayout cross{1, 4, 3, {}};
  Tape tape;
  const Matrix before = decoder_layer_forward(tape.constant(y), tape.constant(memory), layer, causal(4), cross).value();
  y.row(2) = oracle::random_matrix(1, 8, rng);
  const Matrix after = decoder_layer_forward(tape.constant(y), tape.constant(memory), layer, causal(4), cross).value();
  EXPECT_EQ(before.topRows(2), after.topRows(2));
  EXPECT_NE(before.row(2), after.row(2));
}

TEST(Layers, GradientsMatchCentralDifferences) {
  std::mt19937_64 rng(10);
  EncoderLayer enc = make_encoder_layer(4, 6, 2, rng, "enc");
  DecoderLayer dec = make_decoder_layer(4, 6, 2, rng, "dec");
  const Matrix x = oracle::random_matrix(3, 4, rng);
  const Matrix y = oracle::random_matrix(2, 4, rng);
  const Matrix w = oracle::random_matrix(2, 4, rng);
  std::vector<const Parameter*> cps;
  enc.collect(cps);
  dec.collect(cps);
  std::vector<Parameter*> params;
  for (const auto* p : cps) params.push_back(const_cast<Parameter*>(p));
  const AttentionLayout cross{1, 2, 3, {}};
  const auto r = oracle::check_gradients(params, [&](Tape& t) {
    Tensor memory = encoder_layer_forward(t.constant(x), enc, single(3));
    return sum(mul(decoder_layer_forward(t.constant(y), memory, dec, causal(2), cross), t.constant(w)));
  });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}
