#pragma once

#include "parattn/tensor.hpp"

#include <random>
#include <vector>

namespace parattn {

/// Logit assigned to disallowed query/key pairs before the softmax.
inline constexpr Scalar kMaskFill = -1e9;

enum class MaskKind { Padding, Causal, Combined };

/// allowed(i, j) says whether query i may attend to key j.
struct AttentionMask {
  BoolMatrix allowed;
  MaskKind kind = MaskKind::Padding;

  Index q_len() const { return allowed.rows(); }
  Index k_len() const { return allowed.cols(); }
  /// Throws MaskError when some query row has no allowed key.
  void validate() const;
};

/// Lower-triangular mask: position i sees keys 0..i.
AttentionMask make_causal_mask(int len);
/// Every query sees the first `valid_keys` keys; the padded tail is hidden.
AttentionMask make_padding_mask(int q_len, int k_len, int valid_keys);
/// Elementwise AND of two masks of equal shape.
AttentionMask combine_masks(const AttentionMask& a, const AttentionMask& b);

/// Attention probabilities of one sequence, one [q_len, k_len] matrix per head.
struct AttentionWeights {
  std::vector<Matrix> heads;
};

struct AttentionResult {
  Tensor output;
  AttentionWeights weights;
};

/// softmax(q kᵀ / √d_k + fill) v for a single sequence and a single head, composed
/// from the primitive tape ops.
AttentionResult scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                             const AttentionMask* mask = nullptr);

/// Geometry of a batched attention call. Queries are stacked as [batch * q_len, d]
/// and keys/values as [batch * k_len, d]. `masks` is empty (no masking) or holds one
/// [q_len, k_len] mask per batch item.
struct AttentionLayout {
  int batch = 1;
  int q_len = 0;
  int k_len = 0;
  std::vector<AttentionMask> masks;
};

/// Per batch item, the weights of every head.
using AttentionTrace = std::vector<AttentionWeights>;

/// Fused multi-head attention core over projected q, k, v: each (item, head) block
/// runs scaled dot-product attention and the head outputs are concatenated along
/// the feature axis. Gradients use a single fused rule. When `trace` is non-null it
/// receives the weights of every item and head.
Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
              const AttentionLayout& layout, AttentionTrace* trace = nullptr);

/// Projection weights of one multi-head attention sublayer. Each role is stored as
/// one fused [d_model, d_model] matrix; head h uses columns [h·d_k, (h+1)·d_k).
struct MultiHeadAttention {
  int heads = 1;
  Parameter w_q;
  Parameter w_k;
  Parameter w_v;
  Parameter w_o;

  int d_model() const { return static_cast<int>(w_q.value.rows()); }
  void collect(std::vector<const Parameter*>& out) const;
};

/// Xavier-uniform projections. Throws ConfigError unless d_model % heads == 0.
MultiHeadAttention make_multi_head_attention(int d_model, int heads, std::mt19937_64& rng,
                                             const std::string& name);

/// Batched multi-head attention (project, attend, concatenate, project).
Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_k, const Tensor& x_v,
                            const MultiHeadAttention& params, const AttentionLayout& layout,
                            AttentionTrace* trace = nullptr);

/// Single-sequence multi-head attention returning the weights of all heads.
AttentionResult multi_head_attention(const Tensor& x_q, const Tensor& x_k, const Tensor& x_v,
                                     const MultiHeadAttention& params,
                                     const AttentionMask* mask = nullptr);

/// Uniform(-b, b) with b = sqrt(6 / (rows + cols)).
Matrix xavier_uniform(Index rows, Index cols, std::mt19937_64& rng);

}  // namespace parattn
