#include "parattn/model.hpp"

#include "parattn/errors.hpp"

#include <random>
#include <set>
#include <utility>

namespace parattn {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (d_model < 2 || d_model % 2 != 0) fail("d_model must be even and positive");
  if (heads < 1 || d_model % heads != 0) fail("d_model must be divisible by heads");
  if (d_ff < 1) fail("d_ff must be positive");
  if (branches < 1) fail("branches must be >= 1");
  if (branch_depth < 1) fail("branch_depth must be >= 1");
  if (decoder_depth < 1) fail("decoder_depth must be >= 1");
  if (max_len < 2) fail("max_len must be >= 2");
  if (src_vocab <= kReservedTokens || tgt_vocab <= kReservedTokens)
    fail("vocabularies must hold more than the reserved tokens");
  if (workers < 1) fail("workers must be >= 1");
}

TopologyOptions ModelConfig::topology() const {
  TopologyOptions o;
  o.variant = variant;
  o.branches = branches;
  o.branch_depth = branch_depth;
  o.d_model = d_model;
  o.d_ff = d_ff;
  o.heads = heads;
  o.count_includes_final = count_includes_final;
  o.apa_output_norm = apa_output_norm;
  return o;
}

TransformerModel::TransformerModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  src_embed_ = Parameter("src_embed", xavier_uniform(config_.src_vocab, config_.d_model, rng));
  tgt_embed_ = Parameter("tgt_embed", xavier_uniform(config_.tgt_vocab, config_.d_model, rng));
  pe_ = positional_encoding(config_.max_len, config_.d_model);
  encoder_ = make_topology(config_.topology(), rng);
  for (int i = 0; i < config_.decoder_depth; ++i)
    decoder_.push_back(make_decoder_layer(config_.d_model, config_.d_ff, config_.heads, rng,
                                          "decoder.layer" + std::to_string(i)));
  out_w_ = Parameter("output.weight", xavier_uniform(config_.d_model, config_.tgt_vocab, rng));
  out_b_ = Parameter("output.bias", Matrix::Zero(1, config_.tgt_vocab));
}

std::vector<const Parameter*> TransformerModel::parameters() const {
  std::vector<const Parameter*> out{&src_embed_, &tgt_embed_};
  encoder_.collect(out);
  for (const auto& l : decoder_) l.collect(out);
  out.push_back(&out_w_);
  out.push_back(&out_b_);
  return out;
}

std::vector<Parameter*> TransformerModel::parameters() {
  std::vector<Parameter*> out;
  for (const auto* p : std::as_const(*this).parameters()) out.push_back(const_cast<Parameter*>(p));
  return out;
}

AttentionLayout self_attention_layout(const SequenceBatch& seq, bool causal) {
  AttentionLayout layout{seq.batch, seq.len, seq.len, {}};
  const AttentionMask causal_mask = causal ? make_causal_mask(seq.len) : AttentionMask{};
  for (int b = 0; b < seq.batch; ++b) {
    AttentionMask pad = make_padding_mask(seq.len, seq.len, seq.lengths[static_cast<std::size_t>(b)]);
    layout.masks.push_back(causal ? combine_masks(causal_mask, pad) : std::move(pad));
  }
  return layout;
}

AttentionLayout cross_attention_layout(const SequenceBatch& tgt, const SequenceBatch& src) {
  if (tgt.batch != src.batch) throw DimensionError("cross attention: batch sizes differ");
  AttentionLayout layout{tgt.batch, tgt.len, src.len, {}};
  for (int b = 0; b < src.batch; ++b)
    layout.masks.push_back(make_padding_mask(tgt.len, src.len, src.lengths[static_cast<std::size_t>(b)]));
  return layout;
}

namespace {

void check_lengths(const SequenceBatch& s, int max_len, const char* side) {
  if (s.len > max_len)
    throw ConfigError(std::string(side) + " length " + std::to_string(s.len) +
                      " exceeds max_len " + std::to_string(max_len));
  if (s.len < 1) throw DimensionError(std::string(side) + " batch is empty");
}

}  // namespace

Tensor TransformerModel::encode(Tape& tape, const SequenceBatch& src, EncoderTrace* trace) const {
  check_lengths(src, config_.max_len, "source");
  Tensor x = embed(tape, src.ids, src.len, src_embed_, pe_);
  EncodeOptions options;
  options.workers = config_.workers;
  options.trace = trace;
  return parattn::encode(x, encoder_, self_attention_layout(src, false), options);
}

Tensor TransformerModel::decode(const Tensor& memory, const SequenceBatch& src,
                                const SequenceBatch& tgt_in, DecoderTrace* trace) const {
  check_lengths(tgt_in, config_.max_len, "target");
  Tape& tape = memory.tape();
  Tensor y = embed(tape, tgt_in.ids, tgt_in.len, tgt_embed_, pe_);
  const AttentionLayout self = self_attention_layout(tgt_in, true);
  const AttentionLayout cross = cross_attention_layout(tgt_in, src);
  if (trace != nullptr) {
    trace->self.assign(decoder_.size(), {});
    trace->cross.assign(decoder_.size(), {});
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    y = decoder_layer_forward(y, memory, decoder_[i], self, cross,
                              trace != nullptr ? &trace->self[i] : nullptr,
                              trace != nullptr ? &trace->cross[i] : nullptr);
  }
  return add_bias(matmul(y, tape.parameter(out_w_)), tape.parameter(out_b_));
}

Tensor TransformerModel::forward(Tape& tape, const TranslationBatch& batch) const {
  Tensor memory = encode(tape, batch.src);
  return decode(memory, batch.src, batch.tgt_in);
}

namespace {

SequenceBatch single(std::span<const int> ids) {
  SequenceBatch s;
  s.batch = 1;
  s.len = static_cast<int>(ids.size());
  s.ids.assign(ids.begin(), ids.end());
  s.lengths.push_back(s.len);
  return s;
}

SequenceBatch shifted_right(std::span<const int> tgt) {
  std::vector<int> in{kBos};
  in.insert(in.end(), tgt.begin(), tgt.end() - 1);
  return single(in);
}

}  // namespace

Tensor TransformerModel::forward(Tape& tape, std::span<const int> src, std::span<const int> tgt) const {
  if (src.empty() || tgt.empty()) throw DimensionError("forward: empty source or target");
  const SequenceBatch s = single(src);
  Tensor memory = encode(tape, s);
  return decode(memory, s, shifted_right(tgt));
}

int AttentionDump::groups(const std::string& component) const {
  std::set<int> seen;
  for (const auto& e : entries)
    if (e.component == component) seen.insert(e.index);
  return static_cast<int>(seen.size());
}

namespace {

void append(AttentionDump& dump, const std::string& component, int index, int layer,
            const AttentionTrace& trace) {
  const auto& heads = trace.front().heads;
  for (std::size_t h = 0; h < heads.size(); ++h)
    dump.entries.push_back({component, index, layer, static_cast<int>(h), heads[h]});
}

}  // namespace

AttentionDump extract_attention(const TransformerModel& model, std::span<const int> src,
                                std::span<const int> tgt) {
  if (src.empty() || tgt.empty()) throw DimensionError("extract_attention: empty source or target");
  Tape tape(false);
  const SequenceBatch s = single(src);
  EncoderTrace enc;
  DecoderTrace dec;
  Tensor memory = model.encode(tape, s, &enc);
  model.decode(memory, s, shifted_right(tgt), &dec);

  AttentionDump dump;
  const bool stacked = model.encoder().variant == EncoderVariant::Stacked;
  for (std::size_t b = 0; b < enc.branches.size(); ++b) {
    for (std::size_t l = 0; l < enc.branches[b].size(); ++l) {
      if (stacked)
        append(dump, "encoder_stack", static_cast<int>(l), static_cast<int>(l), enc.branches[b][l]);
      else
        append(dump, "encoder_branch", static_cast<int>(b), static_cast<int>(l), enc.branches[b][l]);
    }
  }
  if (enc.final) append(dump, "encoder_final", 0, 0, *enc.final);
  for (std::size_t l = 0; l < dec.self.size(); ++l) {
    append(dump, "decoder_self", static_cast<int>(l), static_cast<int>(l), dec.self[l]);
    append(dump, "decoder_cross", static_cast<int>(l), static_cast<int>(l), dec.cross[l]);
  }
  return dump;
}

ParameterBreakdown parameter_breakdown(const TransformerModel& model) {
  ParameterBreakdown b;
  b.embeddings = model.src_embedding().size() + model.tgt_embedding().size();
  std::vector<const Parameter*> enc;
  model.encoder().collect(enc);
  for (const auto* p : enc) b.encoder += p->size();
  std::vector<const Parameter*> dec;
  for (const auto& l : model.decoder()) l.collect(dec);
  for (const auto* p : dec) b.decoder += p->size();
  b.output = model.output_weight().size() + model.output_bias().size();
  return b;
}

Index parameter_count(const TransformerModel& model) {
  Index n = 0;
  for (const auto* p : model.parameters()) n += p->size();
  return n;
}

}  // namespace parattn
