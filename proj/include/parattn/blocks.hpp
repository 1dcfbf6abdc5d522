#pragma once

#include "parattn/attention.hpp"
#include "parattn/tensor.hpp"

#include <random>
#include <span>
#include <string>
#include <vector>

namespace parattn {

inline constexpr Scalar kLayerNormEps = 1e-5;

struct LayerNorm {
  Parameter gain;  // [1, d]
  Parameter bias;  // [1, d]
};

/// affine -> ReLU -> affine, inner width d_ff.
struct FeedForward {
  Parameter w1;  // [d, d_ff]
  Parameter b1;  // [1, d_ff]
  Parameter w2;  // [d_ff, d]
  Parameter b2;  // [1, d]
};

struct EncoderLayer {
  MultiHeadAttention self_attn;
  FeedForward ffn;
  LayerNorm norm1;
  LayerNorm norm2;

  void collect(std::vector<const Parameter*>& out) const;
};

struct DecoderLayer {
  MultiHeadAttention self_attn;
  MultiHeadAttention cross_attn;
  FeedForward ffn;
  LayerNorm norm1;
  LayerNorm norm2;
  LayerNorm norm3;

  void collect(std::vector<const Parameter*>& out) const;
};

LayerNorm make_layer_norm(int d, const std::string& name);
FeedForward make_feed_forward(int d_model, int d_ff, std::mt19937_64& rng, const std::string& name);
EncoderLayer make_encoder_layer(int d_model, int d_ff, int heads, std::mt19937_64& rng,
                                const std::string& name);
DecoderLayer make_decoder_layer(int d_model, int d_ff, int heads, std::mt19937_64& rng,
                                const std::string& name);

/// Number of scalars in one encoder layer: 4d² + 2·d·d_ff + d_ff + d + 4d.
Index encoder_layer_size(int d_model, int d_ff);

/// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same). d must be even.
Matrix positional_encoding(int max_len, int d_model);

/// Rows of `table` gathered for `ids` (batch items of `seq_len` tokens laid end to
/// end), scaled by √d_model, plus the positional encoding of each position.
Tensor embed(Tape& tape, std::span<const int> ids, int seq_len, const Parameter& table,
             const Matrix& pe);

Tensor apply_layer_norm(const Tensor& x, const LayerNorm& norm);
Tensor feed_forward(const Tensor& x, const FeedForward& ffn);

/// y = norm1(x + SelfAttn(x)); out = norm2(y + FFN(y)).
Tensor encoder_layer_forward(const Tensor& x, const EncoderLayer& layer,
                             const AttentionLayout& self_layout, AttentionTrace* trace = nullptr);

/// Post-norm decoder layer: masked self-attention, cross-attention over `memory`,
/// then the feed-forward sublayer.
Tensor decoder_layer_forward(const Tensor& y, const Tensor& memory, const DecoderLayer& layer,
                             const AttentionLayout& self_layout,
                             const AttentionLayout& cross_layout,
                             AttentionTrace* self_trace = nullptr,
                             AttentionTrace* cross_trace = nullptr);

}  // namespace parattn
