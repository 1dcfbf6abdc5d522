#pragma once

// Reference implementations used as test oracles. They work on plain matrices with
// explicit loops and never call the library's forward code.

#include "parattn/model.hpp"
#include "parattn/parallel.hpp"
#include "parattn/tensor.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace oracle {

using parattn::Index;
using parattn::Matrix;

inline Matrix random_matrix(Index rows, Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = u(rng);
  return m;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out = Matrix::Zero(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (Index k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

inline Matrix add_row(const Matrix& a, const Matrix& row) {
  Matrix out = a;
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j) out(i, j) += row(0, j);
  return out;
}

inline Matrix relu(const Matrix& a) {
  Matrix out = a;
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j) out(i, j) = a(i, j) > 0.0 ? a(i, j) : 0.0;
  return out;
}

inline Matrix softmax_rows(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    double m = a(i, 0);
    for (Index j = 1; j < a.cols(); ++j) m = std::max(m, a(i, j));
    double z = 0.0;
    for (Index j = 0; j < a.cols(); ++j) z += std::exp(a(i, j) - m);
    for (Index j = 0; j < a.cols(); ++j) out(i, j) = std::exp(a(i, j) - m) / z;
  }
  return out;
}

/// Two-pass mean/variance normalization.
inline Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps) {
  Matrix out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (Index j = 0; j < x.cols(); ++j) mean += x(i, j);
    mean /= n;
    double var = 0.0;
    for (Index j = 0; j < x.cols(); ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= n;
    for (Index j = 0; j < x.cols(); ++j)
      out(i, j) = (x(i, j) - mean) / std::sqrt(var + eps) * gain(0, j) + bias(0, j);
  }
  return out;
}

/// Single-head attention restricted to allowed keys (masked keys are skipped, not filled).
inline Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v,
                        const parattn::BoolMatrix* allowed, Matrix* weights = nullptr) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix w = Matrix::Zero(q.rows(), k.rows());
  for (Index i = 0; i < q.rows(); ++i) {
    std::vector<double> s(static_cast<std::size_t>(k.rows()));
    double m = -INFINITY;
    for (Index j = 0; j < k.rows(); ++j) {
      if (allowed != nullptr && !(*allowed)(i, j)) continue;
      double d = 0.0;
      for (Index c = 0; c < q.cols(); ++c) d += q(i, c) * k(j, c);
      s[static_cast<std::size_t>(j)] = d * scale;
      m = std::max(m, d * scale);
    }
    double z = 0.0;
    for (Index j = 0; j < k.rows(); ++j) {
      if (allowed != nullptr && !(*allowed)(i, j)) continue;
      z += std::exp(s[static_cast<std::size_t>(j)] - m);
    }
    for (Index j = 0; j < k.rows(); ++j) {
      if (allowed != nullptr && !(*allowed)(i, j)) continue;
      w(i, j) = std::exp(s[static_cast<std::size_t>(j)] - m) / z;
    }
  }
  if (weights != nullptr) *weights = w;
  return matmul(w, v);
}

/// Per-head slicing of the fused projections, attention, concatenation, output projection.
inline Matrix multi_head(const Matrix& xq, const Matrix& xk, const Matrix& xv,
                         const parattn::MultiHeadAttention& p, const parattn::BoolMatrix* allowed,
                         std::vector<Matrix>* weights = nullptr) {
  const Index d = p.w_q.value.rows();
  const Index dk = d / p.heads;
  Matrix concat(xq.rows(), d);
  for (int h = 0; h < p.heads; ++h) {
    const Matrix q = matmul(xq, p.w_q.value.middleCols(h * dk, dk));
    const Matrix k = matmul(xk, p.w_k.value.middleCols(h * dk, dk));
    const Matrix v = matmul(xv, p.w_v.value.middleCols(h * dk, dk));
    Matrix w;
    concat.middleCols(h * dk, dk) = attention(q, k, v, allowed, &w);
    if (weights != nullptr) weights->push_back(w);
  }
  return matmul(concat, p.w_o.value);
}

inline Matrix feed_forward(const Matrix& x, const parattn::FeedForward& f) {
  return add_row(matmul(relu(add_row(matmul(x, f.w1.value), f.b1.value)), f.w2.value), f.b2.value);
}

inline Matrix norm(const Matrix& x, const parattn::LayerNorm& n) {
  return layer_norm(x, n.gain.value, n.bias.value, parattn::kLayerNormEps);
}

inline Matrix encoder_layer(const Matrix& x, const parattn::EncoderLayer& l,
                            const parattn::BoolMatrix* allowed) {
  const Matrix y = norm(x + multi_head(x, x, x, l.self_attn, allowed), l.norm1);
  return norm(y + feed_forward(y, l.ffn), l.norm2);
}

inline Matrix decoder_layer(const Matrix& y, const Matrix& memory, const parattn::DecoderLayer& l,
                            const parattn::BoolMatrix* self_allowed,
                            const parattn::BoolMatrix* cross_allowed) {
  const Matrix a = norm(y + multi_head(y, y, y, l.self_attn, self_allowed), l.norm1);
  const Matrix b = norm(a + multi_head(a, memory, memory, l.cross_attn, cross_allowed), l.norm2);
  return norm(b + feed_forward(b, l.ffn), l.norm3);
}

inline Matrix branch(const Matrix& x, const parattn::EncoderBranch& layers,
                     const parattn::BoolMatrix* allowed) {
  Matrix h = x;
  for (const auto& l : layers) h = encoder_layer(h, l, allowed);
  return h;
}

/// Brute-force composition of every encoder variant for one sequence.
inline Matrix encode(const Matrix& x, const parattn::EncoderTopology& t,
                     const parattn::BoolMatrix* allowed) {
  using parattn::EncoderVariant;
  if (t.variant == EncoderVariant::Stacked) return branch(x, t.branches.front(), allowed);
  if (t.variant == EncoderVariant::ACPA) {
    const Index d = x.cols();
    Matrix concat(x.rows(), d * static_cast<Index>(t.branches.size()));
    for (std::size_t b = 0; b < t.branches.size(); ++b)
      concat.middleCols(static_cast<Index>(b) * d, d) = branch(x, t.branches[b], allowed);
    const Matrix r = relu(add_row(matmul(concat, t.reducer->weight.value), t.reducer->bias.value));
    return encoder_layer(r, *t.final_layer, allowed);
  }
  Matrix total = Matrix::Zero(x.rows(), x.cols());
  for (const auto& b : t.branches) total += branch(x, b, allowed);
  if (t.variant == EncoderVariant::APA) return t.sum_norm ? norm(total, *t.sum_norm) : total;
  return encoder_layer(total, *t.final_layer, allowed);
}

inline Matrix positional_encoding(int len, int d) {
  Matrix pe(len, d);
  for (int pos = 0; pos < len; ++pos)
    for (int i = 0; i < d / 2; ++i) {
      const double angle = pos / std::pow(10000.0, 2.0 * i / d);
      pe(pos, 2 * i) = std::sin(angle);
      pe(pos, 2 * i + 1) = std::cos(angle);
    }
  return pe;
}

inline Matrix embed(const std::vector<int>& ids, const Matrix& table) {
  const int d = static_cast<int>(table.cols());
  const Matrix pe = positional_encoding(static_cast<int>(ids.size()), d);
  Matrix out(static_cast<Index>(ids.size()), d);
  for (std::size_t t = 0; t < ids.size(); ++t)
    for (int c = 0; c < d; ++c)
      out(static_cast<Index>(t), c) = table(ids[t], c) * std::sqrt(static_cast<double>(d)) + pe(static_cast<Index>(t), c);
  return out;
}

/// Logits for one unpadded pair whose decoder input is `tgt_in`.
inline Matrix model_logits(const parattn::TransformerModel& m, const std::vector<int>& src,
                           const std::vector<int>& tgt_in) {
  const Matrix memory = encode(embed(src, m.src_embedding().value), m.encoder(), nullptr);
  const Index n = static_cast<Index>(tgt_in.size());
  parattn::BoolMatrix causal(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) causal(i, j) = j <= i;
  Matrix y = embed(tgt_in, m.tgt_embedding().value);
  for (const auto& l : m.decoder()) y = decoder_layer(y, memory, l, &causal, nullptr);
  return add_row(matmul(y, m.output_weight().value), m.output_bias().value);
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;
  long long checked = 0;
};

/// Compares the tape gradient of every entry of every parameter with a central
/// difference. `loss` must build a 1x1 tensor on the given tape.
inline GradCheck check_gradients(const std::vector<parattn::Parameter*>& params,
                                 const std::function<parattn::Tensor(parattn::Tape&)>& loss,
                                 double h = 1e-5, double floor = 1e-6) {
  for (auto* p : params) p->zero_grad();
  {
    parattn::Tape tape;
    tape.backward(loss(tape));
  }
  auto value = [&] {
    parattn::Tape tape(false);
    return loss(tape).value()(0, 0);
  };
  GradCheck out;
  for (auto* p : params) {
    const Matrix analytic = p->grad;
    for (Index i = 0; i < p->value.rows(); ++i)
      for (Index j = 0; j < p->value.cols(); ++j) {
        const double saved = p->value(i, j);
        p->value(i, j) = saved + h;
        const double up = value();
        p->value(i, j) = saved - h;
        const double down = value();
        p->value(i, j) = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double a = analytic(i, j);
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
        ++out.checked;
        if (rel > out.max_rel_error) {
          out.max_rel_error = rel;
          out.worst = p->name + "(" + std::to_string(i) + "," + std::to_string(j) + ") analytic " +
                      std::to_string(a) + " numeric " + std::to_string(numeric);
        }
      }
  }
  return out;
}

/// Scalar KL(t || softmax(logits)) with t = (1 - eps) on gold, eps / (V - 1) elsewhere.
inline double kl_row(const std::vector<double>& logits, int gold, double eps) {
  const std::size_t v = logits.size();
  double m = logits[0];
  for (double x : logits) m = std::max(m, x);
  double z = 0.0;
  for (double x : logits) z += std::exp(x - m);
  double kl = 0.0;
  for (std::size_t j = 0; j < v; ++j) {
    const double t = static_cast<int>(j) == gold ? 1.0 - eps : eps / static_cast<double>(v - 1);
    if (t == 0.0) continue;
    const double logp = logits[j] - m - std::log(z);
    kl += t * (std::log(t) - logp);
  }
  return kl;
}

/// One textbook Adam update of a single scalar.
struct ScalarAdam {
  double lr, b1, b2, eps;
  double m = 0.0, v = 0.0;
  long long t = 0;

  double step(double p, double g) {
    ++t;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    const double mhat = m / (1.0 - std::pow(b1, static_cast<double>(t)));
    const double vhat = v / (1.0 - std::pow(b2, static_cast<double>(t)));
    return p - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

// Independent BLEU: n-grams keyed by their joined text, counted in hash maps.
inline double bleu(const std::vector<std::vector<std::string>>& cands,
                   const std::vector<std::vector<std::string>>& refs, bool smooth = false) {
  double c_len = 0, r_len = 0, log_p = 0;
  for (std::size_t k = 0; k < cands.size(); ++k) {
    c_len += static_cast<double>(cands[k].size());
    r_len += static_cast<double>(refs[k].size());
  }
  for (int n = 1; n <= 4; ++n) {
    double matched = 0, total = 0;
    for (std::size_t k = 0; k < cands.size(); ++k) {
      auto grams = [n](const std::vector<std::string>& w) {
        std::unordered_map<std::string, int> g;
        for (int i = 0; i + n <= static_cast<int>(w.size()); ++i) {
          std::string key;
          for (int j = 0; j < n; ++j) key += w[static_cast<std::size_t>(i + j)] + "\x1f";
          ++g[key];
        }
        return g;
      };
      const auto c = grams(cands[k]);
      const auto r = grams(refs[k]);
      for (const auto& [key, count] : c) {
        total += count;
        const auto it = r.find(key);
        if (it != r.end()) matched += std::min(count, it->second);
      }
    }
    const double p = (smooth && n > 1) ? (matched + 1) / (total + 1) : (total > 0 ? matched / total : 0.0);
    if (p == 0.0) return 0.0;
    log_p += std::log(p) / 4.0;
  }
  if (c_len == 0) return 0.0;
  const double bp = c_len < r_len ? std::exp(1.0 - r_len / c_len) : 1.0;
  return bp * std::exp(log_p);
}


}  // namespace oracle
