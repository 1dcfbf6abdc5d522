#include "parattn/attention.hpp"

#include "parattn/errors.hpp"

#include <cmath>
#include <memory>

namespace parattn {

void AttentionMask::validate() const {
  for (Index i = 0; i < allowed.rows(); ++i) {
    if (!allowed.row(i).any())
      throw MaskError("attention mask row " + std::to_string(i) + " allows no key");
  }
}

AttentionMask make_causal_mask(int len) {
  if (len < 1) throw MaskError("causal mask needs len >= 1");
  AttentionMask m;
  m.kind = MaskKind::Causal;
  m.allowed = BoolMatrix::Constant(len, len, false);
  for (int i = 0; i < len; ++i) m.allowed.row(i).head(i + 1).setConstant(true);
  return m;
}

AttentionMask make_padding_mask(int q_len, int k_len, int valid_keys) {
  if (valid_keys < 1 || valid_keys > k_len)
    throw MaskError("padding mask: " + std::to_string(valid_keys) + " valid keys out of " +
                    std::to_string(k_len));
  AttentionMask m;
  m.kind = MaskKind::Padding;
  m.allowed = BoolMatrix::Constant(q_len, k_len, false);
  m.allowed.leftCols(valid_keys).setConstant(true);
  return m;
}

AttentionMask combine_masks(const AttentionMask& a, const AttentionMask& b) {
  if (a.q_len() != b.q_len() || a.k_len() != b.k_len())
    throw DimensionError("combine_masks: mask shapes differ");
  AttentionMask m;
  m.kind = MaskKind::Combined;
  m.allowed = a.allowed.array() && b.allowed.array();
  return m;
}

Matrix xavier_uniform(Index rows, Index cols, std::mt19937_64& rng) {
  const Scalar bound = std::sqrt(6.0 / static_cast<Scalar>(rows + cols));
  std::uniform_real_distribution<Scalar> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

AttentionResult scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                             const AttentionMask* mask) {
  if (q.cols() != k.cols())
    throw DimensionError("attention: query width " + std::to_string(q.cols()) +
                         " != key width " + std::to_string(k.cols()));
  if (k.rows() != v.rows())
    throw DimensionError("attention: " + std::to_string(k.rows()) + " keys but " +
                         std::to_string(v.rows()) + " values");
  const Scalar inv_scale = 1.0 / std::sqrt(static_cast<Scalar>(q.cols()));
  Tensor logits = scale(matmul(q, transpose(k)), inv_scale);
  Tensor weights;
  if (mask != nullptr) {
    if (mask->q_len() != q.rows() || mask->k_len() != k.rows())
      throw DimensionError("attention: mask [" + std::to_string(mask->q_len()) + "," +
                           std::to_string(mask->k_len()) + "] does not match scores " +
                           shape_string(logits.value()));
    mask->validate();
    BoolMatrix hidden = !mask->allowed.array();
    logits = masked_fill(logits, hidden, kMaskFill);
    weights = masked_fill(softmax(logits), hidden, 0.0);
  } else {
    weights = softmax(logits);
  }
  AttentionResult r;
  r.output = matmul(weights, v);
  r.weights.heads.push_back(weights.value());
  return r;
}

namespace {

void check_layout(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                  const AttentionLayout& layout) {
  if (heads < 1) throw ConfigError("attention needs at least one head");
  if (q.rows() != static_cast<Index>(layout.batch) * layout.q_len)
    throw DimensionError("attend: query rows " + std::to_string(q.rows()) + " != batch " +
                         std::to_string(layout.batch) + " x q_len " + std::to_string(layout.q_len));
  if (k.rows() != static_cast<Index>(layout.batch) * layout.k_len || v.rows() != k.rows())
    throw DimensionError("attend: key/value rows do not match batch x k_len");
  if (q.cols() != k.cols())
    throw DimensionError("attend: query width " + std::to_string(q.cols()) + " != key width " +
                         std::to_string(k.cols()));
  if (q.cols() % heads != 0 || v.cols() % heads != 0)
    throw ConfigError("attend: width not divisible by " + std::to_string(heads) + " heads");
  if (!layout.masks.empty()) {
    if (layout.masks.size() != static_cast<std::size_t>(layout.batch))
      throw DimensionError("attend: need one mask per batch item");
    for (const auto& m : layout.masks) {
      if (m.q_len() != layout.q_len || m.k_len() != layout.k_len)
        throw DimensionError("attend: mask shape does not match q_len x k_len");
      m.validate();
    }
  }
}

}  // namespace

Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
              const AttentionLayout& layout, AttentionTrace* trace) {
  check_layout(q, k, v, heads, layout);
  const Index ql = layout.q_len;
  const Index kl = layout.k_len;
  const Index dk = q.cols() / heads;
  const Index dv = v.cols() / heads;
  const Scalar inv_scale = 1.0 / std::sqrt(static_cast<Scalar>(dk));

  // probs[b * heads + h] is the [ql, kl] weight block of item b, head h.
  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(layout.batch) * heads);
  Matrix out(q.rows(), v.cols());
  for (int b = 0; b < layout.batch; ++b) {
    const BoolMatrix* allowed = layout.masks.empty() ? nullptr : &layout.masks[b].allowed;
    for (int h = 0; h < heads; ++h) {
      Matrix s = q.value().block(b * ql, h * dk, ql, dk) *
                 k.value().block(b * kl, h * dk, kl, dk).transpose();
      s *= inv_scale;
      if (allowed != nullptr) s = allowed->select(s, Matrix::Constant(ql, kl, kMaskFill));
      for (Index i = 0; i < ql; ++i) {
        const Scalar m = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - m).exp();
      }
      if (allowed != nullptr) s = allowed->select(s, Matrix::Zero(ql, kl));
      for (Index i = 0; i < ql; ++i) s.row(i) /= s.row(i).sum();
      out.block(b * ql, h * dv, ql, dv) = s * v.value().block(b * kl, h * dv, kl, dv);
      (*probs)[static_cast<std::size_t>(b) * heads + h] = std::move(s);
    }
  }

  if (trace != nullptr) {
    trace->assign(static_cast<std::size_t>(layout.batch), AttentionWeights{});
    for (int b = 0; b < layout.batch; ++b)
      for (int h = 0; h < heads; ++h)
        (*trace)[b].heads.push_back((*probs)[static_cast<std::size_t>(b) * heads + h]);
  }

  const int batch = layout.batch;
  return q.tape().record(
      std::move(out), {q, k, v},
      [q, k, v, heads, batch, ql, kl, dk, dv, inv_scale, probs](const Matrix& g, const Matrix&) {
        Matrix dq = Matrix::Zero(q.rows(), q.cols());
        Matrix dkm = Matrix::Zero(k.rows(), k.cols());
        Matrix dvm = Matrix::Zero(v.rows(), v.cols());
        for (int b = 0; b < batch; ++b) {
          for (int h = 0; h < heads; ++h) {
            const Matrix& p = (*probs)[static_cast<std::size_t>(b) * heads + h];
            const auto d_out = g.block(b * ql, h * dv, ql, dv);
            const auto vb = v.value().block(b * kl, h * dv, kl, dv);
            dvm.block(b * kl, h * dv, kl, dv).noalias() += p.transpose() * d_out;
            Matrix dp = d_out * vb.transpose();
            Matrix inner = dp.cwiseProduct(p).rowwise().sum();
            Matrix ds = p.cwiseProduct(dp - inner.replicate(1, kl));
            ds *= inv_scale;
            dq.block(b * ql, h * dk, ql, dk).noalias() +=
                ds * k.value().block(b * kl, h * dk, kl, dk);
            dkm.block(b * kl, h * dk, kl, dk).noalias() +=
                ds.transpose() * q.value().block(b * ql, h * dk, ql, dk);
          }
        }
        auto& tape = q.tape();
        tape.accumulate(q, dq);
        tape.accumulate(k, dkm);
        tape.accumulate(v, dvm);
      });
}

void MultiHeadAttention::collect(std::vector<const Parameter*>& out) const {
  out.push_back(&w_q);
  out.push_back(&w_k);
  out.push_back(&w_v);
  out.push_back(&w_o);
}

MultiHeadAttention make_multi_head_attention(int d_model, int heads, std::mt19937_64& rng,
                                             const std::string& name) {
  if (heads < 1 || d_model % heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  MultiHeadAttention m;
  m.heads = heads;
  m.w_q = Parameter(name + ".w_q", xavier_uniform(d_model, d_model, rng));
  m.w_k = Parameter(name + ".w_k", xavier_uniform(d_model, d_model, rng));
  m.w_v = Parameter(name + ".w_v", xavier_uniform(d_model, d_model, rng));
  m.w_o = Parameter(name + ".w_o", xavier_uniform(d_model, d_model, rng));
  return m;
}

Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_k, const Tensor& x_v,
                            const MultiHeadAttention& params, const AttentionLayout& layout,
                            AttentionTrace* trace) {
  if (params.heads < 1 || params.d_model() % params.heads != 0)
    throw ConfigError("d_model " + std::to_string(params.d_model()) + " is not divisible by " +
                      std::to_string(params.heads) + " heads");
  auto& tape = x_q.tape();
  Tensor q = matmul(x_q, tape.parameter(params.w_q));
  Tensor k = matmul(x_k, tape.parameter(params.w_k));
  Tensor v = matmul(x_v, tape.parameter(params.w_v));
  Tensor heads = attend(q, k, v, params.heads, layout, trace);
  return matmul(heads, tape.parameter(params.w_o));
}

AttentionResult multi_head_attention(const Tensor& x_q, const Tensor& x_k, const Tensor& x_v,
                                     const MultiHeadAttention& params, const AttentionMask* mask) {
  AttentionLayout layout;
  layout.batch = 1;
  layout.q_len = static_cast<int>(x_q.rows());
  layout.k_len = static_cast<int>(x_k.rows());
  if (mask != nullptr) layout.masks.push_back(*mask);
  AttentionTrace trace;
  AttentionResult r;
  r.output = multi_head_attention(x_q, x_k, x_v, params, layout, &trace);
  r.weights = std::move(trace.front());
  return r;
}

}  // namespace parattn
