#pragma once

#include "parattn/data.hpp"
#include "parattn/model.hpp"
#include "parattn/training.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace parattn {

/// Fully resolved run configuration. Every field has a flat `key=value` spelling.
struct RunConfig {
  // model
  std::string variant = "aapa";
  int branches = 2;
  int branch_depth = 1;
  int decoder_depth = 2;
  int d_model = 64;
  int d_ff = 256;
  int heads = 4;
  int max_len = 64;
  bool count_includes_final = false;
  bool apa_output_norm = true;
  int workers = 1;
  std::uint64_t seed = 1;

  // training
  int epochs = 10;
  int batch_size = 16;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-9;
  double smoothing = 0.1;
  bool bleu_smoothing = false;

  // data: task is copy | reverse | increment | tsv
  std::string task = "copy";
  int vocab_size = 30;
  int n_pairs = 2000;
  int valid_pairs = 200;
  int task_min_len = 3;
  int task_max_len = 12;
  std::string train_path;
  std::string valid_path;
  std::string test_path;
  int min_freq = 1;
  int max_sentence_len = 60;

  // compare: comma-separated variant:branches entries, e.g. "stacked:6,aapa:5"
  std::string variants = "stacked:6,apa:4,acpa:4,aapa:5";
  // attn-dump
  std::string sentence;
  // bench
  int bench_batch = 16;
  int bench_len = 32;
  int bench_repeats = 7;

  /// Throws ConfigError for an unknown key or a malformed value.
  void set(const std::string& key, const std::string& value);
  /// Resolved key/value pairs in a fixed order.
  std::vector<std::pair<std::string, std::string>> items() const;

  ModelConfig model_config(int src_vocab, int tgt_vocab) const;
  TrainOptions train_options() const;
  BenchmarkOptions bench_options() const;
};

/// Reads `key=value` lines; `#` starts a comment line.
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});

struct RunSpec {
  std::string command;
  std::filesystem::path config_path;
  std::vector<std::string> overrides;
  std::filesystem::path out_dir = "parattn_out";
  std::filesystem::path checkpoint;
  RunConfig config;
};

/// Writes `manifest.txt`: the command as a comment, then every resolved key.
void write_manifest(const RunSpec& spec);

/// Training and validation data for a run config, built deterministically.
TrainingData build_training_data(const RunConfig& config);

/// (variant, branches) pairs from a `variants` list.
std::vector<std::pair<EncoderVariant, int>> parse_variant_list(const std::string& list);

struct BranchDivergence {
  int branch_a = 0;
  int branch_b = 0;
  double js = 0.0;
};

/// Pairwise JS divergence between the head-averaged attention maps of the last
/// layer of each encoder branch.
std::vector<BranchDivergence> branch_divergence(const AttentionDump& dump);

/// Binary greymap, each row scaled so its maximum maps to 255.
void write_pgm(const Matrix& weights, const std::filesystem::path& path);
void write_matrix_csv(const Matrix& weights, const std::filesystem::path& path);

int cmd_train(const RunSpec& spec, std::ostream& out);
int cmd_translate(const RunSpec& spec, std::istream& in, std::ostream& out);
int cmd_eval(const RunSpec& spec, std::ostream& out);
int cmd_compare(const RunSpec& spec, std::ostream& out);
int cmd_attn_dump(const RunSpec& spec, std::ostream& out);
int cmd_bench(const RunSpec& spec, std::ostream& out);

/// Parses argv and dispatches. Returns the process exit code; module errors are
/// reported on `err` with a nonzero code.
int run_cli(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace parattn
