#include "parattn/blocks.hpp"

#include "parattn/errors.hpp"

#include <cmath>

namespace parattn {

void EncoderLayer::collect(std::vector<const Parameter*>& out) const {
  self_attn.collect(out);
  for (const auto* p : {&ffn.w1, &ffn.b1, &ffn.w2, &ffn.b2, &norm1.gain, &norm1.bias,
                        &norm2.gain, &norm2.bias})
    out.push_back(p);
}

void DecoderLayer::collect(std::vector<const Parameter*>& out) const {
  self_attn.collect(out);
  cross_attn.collect(out);
  for (const auto* p : {&ffn.w1, &ffn.b1, &ffn.w2, &ffn.b2, &norm1.gain, &norm1.bias,
                        &norm2.gain, &norm2.bias, &norm3.gain, &norm3.bias})
    out.push_back(p);
}

LayerNorm make_layer_norm(int d, const std::string& name) {
  return LayerNorm{Parameter(name + ".gain", Matrix::Ones(1, d)),
                   Parameter(name + ".bias", Matrix::Zero(1, d))};
}

FeedForward make_feed_forward(int d_model, int d_ff, std::mt19937_64& rng,
                              const std::string& name) {
  FeedForward f;
  f.w1 = Parameter(name + ".w1", xavier_uniform(d_model, d_ff, rng));
  f.b1 = Parameter(name + ".b1", Matrix::Zero(1, d_ff));
  f.w2 = Parameter(name + ".w2", xavier_uniform(d_ff, d_model, rng));
  f.b2 = Parameter(name + ".b2", Matrix::Zero(1, d_model));
  return f;
}

EncoderLayer make_encoder_layer(int d_model, int d_ff, int heads, std::mt19937_64& rng,
                                const std::string& name) {
  EncoderLayer l;
  l.self_attn = make_multi_head_attention(d_model, heads, rng, name + ".self_attn");
  l.ffn = make_feed_forward(d_model, d_ff, rng, name + ".ffn");
  l.norm1 = make_layer_norm(d_model, name + ".norm1");
  l.norm2 = make_layer_norm(d_model, name + ".norm2");
  return l;
}

DecoderLayer make_decoder_layer(int d_model, int d_ff, int heads, std::mt19937_64& rng,
                                const std::string& name) {
  DecoderLayer l;
  l.self_attn = make_multi_head_attention(d_model, heads, rng, name + ".self_attn");
  l.cross_attn = make_multi_head_attention(d_model, heads, rng, name + ".cross_attn");
  l.ffn = make_feed_forward(d_model, d_ff, rng, name + ".ffn");
  l.norm1 = make_layer_norm(d_model, name + ".norm1");
  l.norm2 = make_layer_norm(d_model, name + ".norm2");
  l.norm3 = make_layer_norm(d_model, name + ".norm3");
  return l;
}

Index encoder_layer_size(int d_model, int d_ff) {
  const Index d = d_model;
  const Index f = d_ff;
  return 4 * d * d + 2 * d * f + f + d + 4 * d;
}

Matrix positional_encoding(int max_len, int d_model) {
  if (d_model <= 0 || d_model % 2 != 0)
    throw ConfigError("positional encoding needs an even d_model, got " + std::to_string(d_model));
  if (max_len < 1) throw ConfigError("positional encoding needs max_len >= 1");
  Matrix pe(max_len, d_model);
  for (int pos = 0; pos < max_len; ++pos) {
    for (int i = 0; i < d_model / 2; ++i) {
      const Scalar angle =
          pos / std::pow(10000.0, static_cast<Scalar>(2 * i) / static_cast<Scalar>(d_model));
      pe(pos, 2 * i) = std::sin(angle);
      pe(pos, 2 * i + 1) = std::cos(angle);
    }
  }
  return pe;
}

Tensor embed(Tape& tape, std::span<const int> ids, int seq_len, const Parameter& table,
             const Matrix& pe) {
  const Index d = table.value.cols();
  if (seq_len < 1 || ids.size() % static_cast<std::size_t>(seq_len) != 0)
    throw DimensionError("embed: " + std::to_string(ids.size()) +
                         " ids do not split into sequences of " + std::to_string(seq_len));
  if (seq_len > pe.rows())
    throw ConfigError("embed: sequence length " + std::to_string(seq_len) +
                      " exceeds max_len " + std::to_string(pe.rows()));
  if (pe.cols() != d) throw DimensionError("embed: positional encoding width mismatch");
  const Index rows = static_cast<Index>(ids.size());
  Matrix positions(rows, d);
  for (Index r = 0; r < rows; ++r) positions.row(r) = pe.row(r % seq_len);
  Tensor gathered = gather_rows(tape.parameter(table), ids);
  return add(scale(gathered, std::sqrt(static_cast<Scalar>(d))), tape.constant(std::move(positions)));
}

Tensor apply_layer_norm(const Tensor& x, const LayerNorm& norm) {
  auto& tape = x.tape();
  return layer_norm(x, tape.parameter(norm.gain), tape.parameter(norm.bias), kLayerNormEps);
}

Tensor feed_forward(const Tensor& x, const FeedForward& ffn) {
  auto& tape = x.tape();
  Tensor h = relu(add_bias(matmul(x, tape.parameter(ffn.w1)), tape.parameter(ffn.b1)));
  return add_bias(matmul(h, tape.parameter(ffn.w2)), tape.parameter(ffn.b2));
}

Tensor encoder_layer_forward(const Tensor& x, const EncoderLayer& layer,
                             const AttentionLayout& self_layout, AttentionTrace* trace) {
  Tensor attn = multi_head_attention(x, x, x, layer.self_attn, self_layout, trace);
  Tensor y = apply_layer_norm(x + attn, layer.norm1);
  return apply_layer_norm(y + feed_forward(y, layer.ffn), layer.norm2);
}

Tensor decoder_layer_forward(const Tensor& y, const Tensor& memory, const DecoderLayer& layer,
                             const AttentionLayout& self_layout,
                             const AttentionLayout& cross_layout, AttentionTrace* self_trace,
                             AttentionTrace* cross_trace) {
  Tensor s = multi_head_attention(y, y, y, layer.self_attn, self_layout, self_trace);
  Tensor a = apply_layer_norm(y + s, layer.norm1);
  Tensor c = multi_head_attention(a, memory, memory, layer.cross_attn, cross_layout, cross_trace);
  Tensor b = apply_layer_norm(a + c, layer.norm2);
  return apply_layer_norm(b + feed_forward(b, layer.ffn), layer.norm3);
}

}  // namespace parattn
