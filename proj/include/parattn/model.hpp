#pragma once

#include "parattn/attention.hpp"
#include "parattn/blocks.hpp"
#include "parattn/data.hpp"
#include "parattn/parallel.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace parattn {

struct ModelConfig {
  EncoderVariant variant = EncoderVariant::AAPA;
  /// Parallel branch count B (stack depth N for Stacked).
  int branches = 2;
  int branch_depth = 1;
  int decoder_depth = 2;
  int d_model = 64;
  int d_ff = 256;
  int heads = 4;
  int max_len = 64;
  int src_vocab = 0;
  int tgt_vocab = 0;
  std::uint64_t seed = 1;
  bool count_includes_final = false;
  bool apa_output_norm = true;
  /// Threads for branch evaluation. Does not change results.
  int workers = 1;

  /// Throws ConfigError on inconsistent values.
  void validate() const;
  TopologyOptions topology() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Per-layer attention weights of the decoder.
struct DecoderTrace {
  std::vector<AttentionTrace> self;
  std::vector<AttentionTrace> cross;
};

/// Embeddings, encoder topology, stacked decoder and the vocabulary projection.
class TransformerModel {
 public:
  explicit TransformerModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  void set_workers(int workers) { config_.workers = workers; }

  std::vector<const Parameter*> parameters() const;
  std::vector<Parameter*> parameters();

  const EncoderTopology& encoder() const { return encoder_; }
  EncoderTopology& encoder() { return encoder_; }
  const std::vector<DecoderLayer>& decoder() const { return decoder_; }
  std::vector<DecoderLayer>& decoder() { return decoder_; }
  const Parameter& src_embedding() const { return src_embed_; }
  const Parameter& tgt_embedding() const { return tgt_embed_; }
  const Parameter& output_weight() const { return out_w_; }
  const Parameter& output_bias() const { return out_b_; }
  const Matrix& positions() const { return pe_; }

  /// Encoder memory [batch * src_len, d_model].
  Tensor encode(Tape& tape, const SequenceBatch& src, EncoderTrace* trace = nullptr) const;
  /// Vocabulary logits [batch * tgt_len, tgt_vocab] for decoder inputs `tgt_in`.
  Tensor decode(const Tensor& memory, const SequenceBatch& src, const SequenceBatch& tgt_in,
                DecoderTrace* trace = nullptr) const;
  /// Teacher-forced logits for a padded batch (rows follow batch.tgt_in).
  Tensor forward(Tape& tape, const TranslationBatch& batch) const;
  /// Logits [tgt.size(), tgt_vocab] for one pair: the decoder reads BOS followed by
  /// tgt[0 .. n-2], so row t scores the prediction of tgt[t].
  Tensor forward(Tape& tape, std::span<const int> src, std::span<const int> tgt) const;

 private:
  ModelConfig config_;
  Parameter src_embed_;
  Parameter tgt_embed_;
  Matrix pe_;
  EncoderTopology encoder_;
  std::vector<DecoderLayer> decoder_;
  Parameter out_w_;
  Parameter out_b_;
};

/// Self-attention layout for a padded batch (padding mask, plus causal when asked).
AttentionLayout self_attention_layout(const SequenceBatch& seq, bool causal);
/// Cross-attention layout: queries from `tgt`, keys over the unpadded part of `src`.
AttentionLayout cross_attention_layout(const SequenceBatch& tgt, const SequenceBatch& src);

struct AttentionDumpEntry {
  /// encoder_stack | encoder_branch | encoder_final | decoder_self | decoder_cross
  std::string component;
  /// Branch index (encoder_branch), otherwise 0.
  int index = 0;
  /// Layer within the branch, stack or decoder.
  int layer = 0;
  int head = 0;
  Matrix weights;
};

struct AttentionDump {
  std::vector<AttentionDumpEntry> entries;

  /// Number of distinct (component, index) groups for a component.
  int groups(const std::string& component) const;
};

/// Attention weights of every encoder branch, the final attending layer, and the
/// decoder self/cross attention for a single pair.
AttentionDump extract_attention(const TransformerModel& model, std::span<const int> src,
                                std::span<const int> tgt);

struct ParameterBreakdown {
  Index embeddings = 0;
  Index encoder = 0;
  Index decoder = 0;
  Index output = 0;

  Index total() const { return embeddings + encoder + decoder + output; }
};

ParameterBreakdown parameter_breakdown(const TransformerModel& model);
Index parameter_count(const TransformerModel& model);

}  // namespace parattn
