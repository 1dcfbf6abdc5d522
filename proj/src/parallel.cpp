#include "parattn/parallel.hpp"

#include "parattn/errors.hpp"
#include "parattn/workers.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <memory>

namespace parattn {

std::string to_string(EncoderVariant v) {
  switch (v) {
    case EncoderVariant::Stacked: return "stacked";
    case EncoderVariant::APA: return "apa";
    case EncoderVariant::ACPA: return "acpa";
    case EncoderVariant::AAPA: return "aapa";
  }
  return "unknown";
}

EncoderVariant parse_variant(const std::string& name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "stacked") return EncoderVariant::Stacked;
  if (lower == "apa") return EncoderVariant::APA;
  if (lower == "acpa") return EncoderVariant::ACPA;
  if (lower == "aapa") return EncoderVariant::AAPA;
  throw ConfigError("unknown encoder variant '" + name + "' (expected stacked|apa|acpa|aapa)");
}

int EncoderTopology::parallel_branches() const {
  return variant == EncoderVariant::Stacked ? 1 : static_cast<int>(branches.size());
}

void EncoderTopology::validate() const {
  if (branches.empty()) throw ConfigError("encoder topology has no branches");
  for (const auto& b : branches)
    if (b.empty()) throw ConfigError("encoder branch has no layers");
  const bool attended = variant == EncoderVariant::ACPA || variant == EncoderVariant::AAPA;
  if (attended != final_layer.has_value())
    throw ConfigError(to_string(variant) + ": final attending layer " +
                      (attended ? "missing" : "not allowed"));
  if ((variant == EncoderVariant::ACPA) != reducer.has_value())
    throw ConfigError(to_string(variant) + ": reducer " +
                      (variant == EncoderVariant::ACPA ? "missing" : "not allowed"));
  if (sum_norm.has_value() && variant != EncoderVariant::APA)
    throw ConfigError("only APA carries an output norm");
  if (variant == EncoderVariant::Stacked && branches.size() != 1)
    throw ConfigError("stacked topology keeps its layers in a single branch");
  if (reducer) {
    const Index d = branches.front().front().self_attn.d_model();
    if (reducer->weight.value.rows() != d * static_cast<Index>(branches.size()) ||
        reducer->weight.value.cols() != d || reducer->bias.value.cols() != d)
      throw ConfigError("ACPA reducer shape does not match B x d_model");
  }
}

void EncoderTopology::collect(std::vector<const Parameter*>& out) const {
  for (const auto& branch : branches)
    for (const auto& layer : branch) layer.collect(out);
  if (sum_norm) {
    out.push_back(&sum_norm->gain);
    out.push_back(&sum_norm->bias);
  }
  if (reducer) {
    out.push_back(&reducer->weight);
    out.push_back(&reducer->bias);
  }
  if (final_layer) final_layer->collect(out);
}

EncoderTopology make_topology(const TopologyOptions& o, std::mt19937_64& rng) {
  if (o.branches < 1) throw ConfigError("branch count must be >= 1");
  if (o.branch_depth < 1) throw ConfigError("branch depth must be >= 1");
  EncoderTopology t;
  t.variant = o.variant;
  auto layer = [&](const std::string& name) {
    return make_encoder_layer(o.d_model, o.d_ff, o.heads, rng, name);
  };
  if (o.variant == EncoderVariant::Stacked) {
    EncoderBranch stack;
    for (int i = 0; i < o.branches; ++i) stack.push_back(layer("encoder.layer" + std::to_string(i)));
    t.branches.push_back(std::move(stack));
    return t;
  }

  int parallel = o.branches;
  if (o.variant == EncoderVariant::AAPA && o.count_includes_final) {
    if (o.branches < 2)
      throw ConfigError("AAPA counting the final layer needs branches >= 2");
    parallel = o.branches - 1;
  }
  for (int b = 0; b < parallel; ++b) {
    EncoderBranch branch;
    for (int i = 0; i < o.branch_depth; ++i)
      branch.push_back(layer("encoder.branch" + std::to_string(b) + ".layer" + std::to_string(i)));
    t.branches.push_back(std::move(branch));
  }
  if (o.variant == EncoderVariant::APA && o.apa_output_norm)
    t.sum_norm = make_layer_norm(o.d_model, "encoder.sum_norm");
  if (o.variant == EncoderVariant::ACPA) {
    Reducer r;
    r.weight = Parameter("encoder.reducer.weight",
                         xavier_uniform(static_cast<Index>(parallel) * o.d_model, o.d_model, rng));
    r.bias = Parameter("encoder.reducer.bias", Matrix::Zero(1, o.d_model));
    t.reducer = std::move(r);
  }
  if (o.variant == EncoderVariant::ACPA || o.variant == EncoderVariant::AAPA)
    t.final_layer = layer("encoder.final");
  return t;
}

Tensor encode_stacked(const Tensor& x, std::span<const EncoderLayer> layers,
                      const AttentionLayout& layout, std::vector<AttentionTrace>* trace) {
  if (layers.empty()) throw ConfigError("stacked encoder needs at least one layer");
  if (trace != nullptr) trace->assign(layers.size(), AttentionTrace{});
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i)
    h = encoder_layer_forward(h, layers[i], layout, trace != nullptr ? &(*trace)[i] : nullptr);
  return h;
}

Tensor run_branches(const Tensor& x, std::span<const EncoderBranch> branches,
                    const AttentionLayout& layout, BranchCombine combine, int workers,
                    std::vector<std::vector<AttentionTrace>>* traces) {
  const std::size_t count = branches.size();
  if (count == 0) throw ConfigError("run_branches: no branches");
  Tape& parent = x.tape();
  const bool grads = parent.grad_enabled();

  auto children = std::make_shared<std::vector<std::unique_ptr<Tape>>>();
  for (std::size_t b = 0; b < count; ++b) children->push_back(std::make_unique<Tape>(grads));
  auto inputs = std::make_shared<std::vector<Tensor>>(count);
  auto outputs = std::make_shared<std::vector<Tensor>>(count);
  if (traces != nullptr) traces->assign(count, {});

  parallel_for(count, workers, [&](std::size_t b) {
    Tape& tape = *(*children)[b];
    Tensor in = x.requires_grad() ? tape.variable(x.value()) : tape.constant(x.value());
    (*inputs)[b] = in;
    (*outputs)[b] =
        encode_stacked(in, branches[b], layout, traces != nullptr ? &(*traces)[b] : nullptr);
  });

  const Index d = x.cols();
  Matrix merged;
  if (combine == BranchCombine::Sum) {
    merged = (*outputs)[0].value();
    for (std::size_t b = 1; b < count; ++b) merged += (*outputs)[b].value();
  } else {
    merged.resize(x.rows(), d * static_cast<Index>(count));
    for (std::size_t b = 0; b < count; ++b)
      merged.middleCols(static_cast<Index>(b) * d, d) = (*outputs)[b].value();
  }
  if (!grads) return parent.constant(std::move(merged));

  std::vector<Tensor> deps{x};
  return parent.record_composite(
      std::move(merged), deps,
      [x, children, inputs, outputs, combine, workers, d](const Matrix& g, const Matrix&) {
        const std::size_t n = children->size();
        parallel_for(n, workers, [&](std::size_t b) {
          if (combine == BranchCombine::Sum)
            (*children)[b]->backward((*outputs)[b], g);
          else
            (*children)[b]->backward((*outputs)[b], g.middleCols(static_cast<Index>(b) * d, d));
        });
        if (!x.requires_grad()) return;
        Matrix dx = (*inputs)[0].grad();
        for (std::size_t b = 1; b < n; ++b) dx += (*inputs)[b].grad();
        x.tape().accumulate(x, dx);
      });
}

namespace {

void require_variant(const EncoderTopology& t, EncoderVariant v) {
  if (t.variant != v)
    throw ConfigError("expected a " + to_string(v) + " topology, got " + to_string(t.variant));
  t.validate();
}

std::vector<std::vector<AttentionTrace>>* branch_traces(const EncodeOptions& o) {
  return o.trace != nullptr ? &o.trace->branches : nullptr;
}

Tensor attend_final(const Tensor& h, const EncoderTopology& t, const AttentionLayout& layout,
                    const EncodeOptions& o) {
  AttentionTrace* trace = nullptr;
  if (o.trace != nullptr) trace = &o.trace->final.emplace();
  return encoder_layer_forward(h, *t.final_layer, layout, trace);
}

}  // namespace

Tensor encode_apa(const Tensor& x, const EncoderTopology& t, const AttentionLayout& layout,
                  const EncodeOptions& o) {
  require_variant(t, EncoderVariant::APA);
  Tensor s = run_branches(x, t.branches, layout, BranchCombine::Sum, o.workers, branch_traces(o));
  if (t.sum_norm) s = apply_layer_norm(s, *t.sum_norm);
  return s;
}

Tensor encode_acpa(const Tensor& x, const EncoderTopology& t, const AttentionLayout& layout,
                   const EncodeOptions& o) {
  require_variant(t, EncoderVariant::ACPA);
  Tensor c = run_branches(x, t.branches, layout, BranchCombine::Concat, o.workers, branch_traces(o));
  auto& tape = x.tape();
  Tensor r = relu(add_bias(matmul(c, tape.parameter(t.reducer->weight)),
                           tape.parameter(t.reducer->bias)));
  return attend_final(r, t, layout, o);
}

Tensor encode_aapa(const Tensor& x, const EncoderTopology& t, const AttentionLayout& layout,
                   const EncodeOptions& o) {
  require_variant(t, EncoderVariant::AAPA);
  Tensor s = run_branches(x, t.branches, layout, BranchCombine::Sum, o.workers, branch_traces(o));
  return attend_final(s, t, layout, o);
}

Tensor encode(const Tensor& x, const EncoderTopology& t, const AttentionLayout& layout,
              const EncodeOptions& o) {
  switch (t.variant) {
    case EncoderVariant::Stacked: {
      t.validate();
      std::vector<AttentionTrace>* trace = nullptr;
      if (o.trace != nullptr) {
        o.trace->branches.assign(1, {});
        trace = &o.trace->branches.front();
      }
      return encode_stacked(x, t.branches.front(), layout, trace);
    }
    case EncoderVariant::APA: return encode_apa(x, t, layout, o);
    case EncoderVariant::ACPA: return encode_acpa(x, t, layout, o);
    case EncoderVariant::AAPA: return encode_aapa(x, t, layout, o);
  }
  throw ConfigError("unknown encoder variant");
}

int critical_path_depth(const EncoderTopology& t) {
  t.validate();
  std::size_t deepest = 0;
  for (const auto& b : t.branches) deepest = std::max(deepest, b.size());
  return static_cast<int>(deepest) + (t.final_layer ? 1 : 0);
}

CriticalPathReport critical_path(const EncoderTopology& t, const BenchmarkOptions& bench) {
  CriticalPathReport report;
  report.sequential_depth = critical_path_depth(t);
  report.branch_count = t.parallel_branches();

  const Index d = t.branches.front().front().self_attn.d_model();
  std::mt19937_64 rng(bench.seed);
  std::normal_distribution<Scalar> normal(0.0, 1.0);
  Matrix input(static_cast<Index>(bench.batch) * bench.len, d);
  for (Index i = 0; i < input.size(); ++i) input.data()[i] = normal(rng);
  AttentionLayout layout{bench.batch, bench.len, bench.len, {}};
  EncodeOptions options;
  options.workers = bench.workers;

  auto run_once = [&] {
    Tape tape(false);
    Tensor x = tape.constant(input);
    const auto start = std::chrono::steady_clock::now();
    encode(x, t, layout, options);
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  run_once();
  std::vector<double> times;
  for (int r = 0; r < std::max(bench.repeats, 1); ++r) times.push_back(run_once());
  std::sort(times.begin(), times.end());
  report.wall_clock_forward = times[times.size() / 2];
  return report;
}

}  // namespace parattn
