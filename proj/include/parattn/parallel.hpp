#pragma once

// Encoder topologies: the stacked baseline and the parallel-branch variants.
//
//   Stacked  x -> L1 -> L2 -> ... -> LN                      depth N
//   APA      x -> {B_1 .. B_B} -> sum -> norm                depth d
//   ACPA     x -> {B_1 .. B_B} -> concat -> ReLU(affine) -> F depth d + 1
//   AAPA     x -> {B_1 .. B_B} -> sum -> F                   depth d + 1
//
// where every branch B_b is `d` (branch_depth) independently initialized encoder
// layers fed the same input, and F is one extra attending encoder layer.

#include "parattn/attention.hpp"
#include "parattn/blocks.hpp"

#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace parattn {

enum class EncoderVariant { Stacked, APA, ACPA, AAPA };

std::string to_string(EncoderVariant v);
/// Accepts stacked | apa | acpa | aapa (case-insensitive).
EncoderVariant parse_variant(const std::string& name);

using EncoderBranch = std::vector<EncoderLayer>;

/// Dimension reduction [len, B·d] -> [len, d] used by ACPA.
struct Reducer {
  Parameter weight;  // [B·d, d]
  Parameter bias;    // [1, d]
};

struct TopologyOptions {
  EncoderVariant variant = EncoderVariant::AAPA;
  /// Parallel branch count B; for Stacked, the stack depth N.
  int branches = 2;
  int branch_depth = 1;
  int d_model = 64;
  int d_ff = 256;
  int heads = 4;
  /// AAPA only: `branches` counts the final attending layer too, leaving B-1 parallel branches.
  bool count_includes_final = false;
  /// APA only: layer-normalize the branch sum before it leaves the encoder.
  bool apa_output_norm = true;
};

struct EncoderTopology {
  EncoderVariant variant = EncoderVariant::Stacked;
  /// Stacked keeps its N layers as a single branch.
  std::vector<EncoderBranch> branches;
  std::optional<EncoderLayer> final_layer;
  std::optional<Reducer> reducer;
  std::optional<LayerNorm> sum_norm;

  /// Number of branches evaluated side by side (1 for Stacked).
  int parallel_branches() const;
  /// Throws ConfigError if the optional parts do not match the variant.
  void validate() const;
  void collect(std::vector<const Parameter*>& out) const;
};

EncoderTopology make_topology(const TopologyOptions& options, std::mt19937_64& rng);

/// Attention weights captured during one encoder pass.
struct EncoderTrace {
  /// [branch][layer within branch]
  std::vector<std::vector<AttentionTrace>> branches;
  /// Final attending layer (ACPA / AAPA).
  std::optional<AttentionTrace> final;
};

struct EncodeOptions {
  /// Threads used to evaluate branches (forward and backward).
  int workers = 1;
  EncoderTrace* trace = nullptr;
};

/// Sequential composition layer N ∘ ... ∘ layer 1.
Tensor encode_stacked(const Tensor& x, std::span<const EncoderLayer> layers,
                      const AttentionLayout& layout, std::vector<AttentionTrace>* trace = nullptr);

/// Elementwise sum of all branch outputs (then the optional APA norm).
Tensor encode_apa(const Tensor& x, const EncoderTopology& topology, const AttentionLayout& layout,
                  const EncodeOptions& options = {});

/// final_layer(ReLU(concat(branches) · W_r + b_r)).
Tensor encode_acpa(const Tensor& x, const EncoderTopology& topology, const AttentionLayout& layout,
                   const EncodeOptions& options = {});

/// final_layer(sum of branches).
Tensor encode_aapa(const Tensor& x, const EncoderTopology& topology, const AttentionLayout& layout,
                   const EncodeOptions& options = {});

/// Dispatches on topology.variant.
Tensor encode(const Tensor& x, const EncoderTopology& topology, const AttentionLayout& layout,
              const EncodeOptions& options = {});

enum class BranchCombine { Sum, Concat };

/// Runs every branch on `x`, each on its own sub-tape so branches can execute
/// concurrently, and merges the outputs in branch order. Backward also runs the
/// branches concurrently; the input gradient is summed in branch-index order.
Tensor run_branches(const Tensor& x, std::span<const EncoderBranch> branches,
                    const AttentionLayout& layout, BranchCombine combine, int workers,
                    std::vector<std::vector<AttentionTrace>>* traces = nullptr);

/// Longest chain of dependent encoder-layer evaluations.
int critical_path_depth(const EncoderTopology& topology);

struct CriticalPathReport {
  int sequential_depth = 1;
  int branch_count = 1;
  /// Median seconds of one encoder forward pass on the benchmark batch.
  double wall_clock_forward = 0.0;
};

struct BenchmarkOptions {
  int batch = 16;
  int len = 32;
  int workers = 4;
  int repeats = 7;
  unsigned long long seed = 7;
};

/// Depth by construction plus the measured forward wall-clock (grad-free tape,
/// concurrent branch evaluation with `workers` threads).
CriticalPathReport critical_path(const EncoderTopology& topology, const BenchmarkOptions& bench);

}  // namespace parattn
