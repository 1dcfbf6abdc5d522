#include "parattn/cli.hpp"

#include "parattn/checkpoint.hpp"
#include "parattn/errors.hpp"
#include "parattn/metrics.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <variant>

namespace parattn {

namespace {

using FieldRef = std::variant<int*, double*, bool*, std::string*, std::uint64_t*>;

std::vector<std::pair<std::string, FieldRef>> fields(RunConfig& c) {
  return {{"variant", &c.variant},
          {"branches", &c.branches},
          {"branch_depth", &c.branch_depth},
          {"decoder_depth", &c.decoder_depth},
          {"d_model", &c.d_model},
          {"d_ff", &c.d_ff},
          {"heads", &c.heads},
          {"max_len", &c.max_len},
          {"count_includes_final", &c.count_includes_final},
          {"apa_output_norm", &c.apa_output_norm},
          {"workers", &c.workers},
          {"seed", &c.seed},
          {"epochs", &c.epochs},
          {"batch_size", &c.batch_size},
          {"lr", &c.lr},
          {"beta1", &c.beta1},
          {"beta2", &c.beta2},
          {"adam_eps", &c.adam_eps},
          {"smoothing", &c.smoothing},
          {"bleu_smoothing", &c.bleu_smoothing},
          {"task", &c.task},
          {"vocab_size", &c.vocab_size},
          {"n_pairs", &c.n_pairs},
          {"valid_pairs", &c.valid_pairs},
          {"task_min_len", &c.task_min_len},
          {"task_max_len", &c.task_max_len},
          {"train_path", &c.train_path},
          {"valid_path", &c.valid_path},
          {"test_path", &c.test_path},
          {"min_freq", &c.min_freq},
          {"max_sentence_len", &c.max_sentence_len},
          {"variants", &c.variants},
          {"sentence", &c.sentence},
          {"bench_batch", &c.bench_batch},
          {"bench_len", &c.bench_len},
          {"bench_repeats", &c.bench_repeats}};
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end || value.empty())
    throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  return out;
}

template <typename T>
std::string format_number(T v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + value + "'");
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  for (auto& [name, ref] : fields(*this)) {
    if (name != key) continue;
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, bool>)
            *p = parse_bool(key, value);
          else if constexpr (std::is_same_v<T, std::string>)
            *p = value;
          else
            *p = parse_number<T>(key, value);
        },
        ref);
    if (key == "variant") {
      parse_variant(variant);
      for (auto& ch : variant) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    if (key == "task" && task != "tsv") parse_task(task);
    if (key == "variants") parse_variant_list(variants);
    return;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> RunConfig::items() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (auto& [name, ref] : fields(const_cast<RunConfig&>(*this))) {
    std::string text = std::visit(
        [](auto* p) -> std::string {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, bool>)
            return *p ? "true" : "false";
          else if constexpr (std::is_same_v<T, std::string>)
            return *p;
          else
            return format_number(*p);
        },
        ref);
    out.emplace_back(name, std::move(text));
  }
  return out;
}

ModelConfig RunConfig::model_config(int src, int tgt) const {
  ModelConfig m;
  m.variant = parse_variant(variant);
  m.branches = branches;
  m.branch_depth = branch_depth;
  m.decoder_depth = decoder_depth;
  m.d_model = d_model;
  m.d_ff = d_ff;
  m.heads = heads;
  m.max_len = max_len;
  m.src_vocab = src;
  m.tgt_vocab = tgt;
  m.seed = seed;
  m.count_includes_final = count_includes_final;
  m.apa_output_norm = apa_output_norm;
  m.workers = workers;
  return m;
}

TrainOptions RunConfig::train_options() const {
  TrainOptions o;
  o.epochs = epochs;
  o.batch_size = batch_size;
  o.adam = {lr, beta1, beta2, adam_eps};
  o.smoothing = smoothing;
  o.seed = seed;
  o.bleu_smoothing = bleu_smoothing;
  return o;
}

BenchmarkOptions RunConfig::bench_options() const {
  BenchmarkOptions b;
  b.batch = bench_batch;
  b.len = bench_len;
  b.workers = workers;
  b.repeats = bench_repeats;
  b.seed = seed;
  return b;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::string line;
  int number = 0;
  while (std::getline(is, line)) {
    ++number;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(number) + ": expected key=value");
    base.set(trim(t.substr(0, eq)), t.substr(eq + 1));
  }
  return base;
}

void write_manifest(const RunSpec& spec) {
  std::filesystem::create_directories(spec.out_dir);
  std::ofstream os(spec.out_dir / "manifest.txt");
  if (!os) throw FormatError("cannot write manifest in " + spec.out_dir.string());
  os << "# command: " << spec.command << '\n';
  if (!spec.checkpoint.empty()) os << "# checkpoint: " << spec.checkpoint.string() << '\n';
  for (const auto& [k, v] : spec.config.items()) os << k << '=' << v << '\n';
}

namespace {

struct Corpora {
  Corpus train;
  Corpus valid;
};

Corpora load_corpora(const RunConfig& c) {
  Corpora out;
  if (c.task == "tsv") {
    if (c.train_path.empty() || c.valid_path.empty())
      throw ConfigError("task=tsv needs train_path and valid_path");
    out.train = load_parallel_tsv(c.train_path, c.max_sentence_len).pairs;
    out.valid = load_parallel_tsv(c.valid_path, c.max_sentence_len).pairs;
  } else {
    Corpus all = make_synthetic_task(parse_task(c.task), c.vocab_size, c.n_pairs + c.valid_pairs,
                                     c.task_min_len, c.task_max_len, c.seed);
    out.train.assign(all.begin(), all.begin() + c.n_pairs);
    out.valid.assign(all.begin() + c.n_pairs, all.end());
  }
  if (out.train.empty()) throw ConfigError("training corpus is empty");
  return out;
}

Corpus load_test_corpus(const RunConfig& c) {
  if (!c.test_path.empty()) return load_parallel_tsv(c.test_path, c.max_sentence_len).pairs;
  if (c.task == "tsv") {
    if (c.valid_path.empty()) throw ConfigError("eval needs test_path or valid_path");
    return load_parallel_tsv(c.valid_path, c.max_sentence_len).pairs;
  }
  return make_synthetic_task(parse_task(c.task), c.vocab_size, c.valid_pairs, c.task_min_len,
                             c.task_max_len, c.seed + 1);
}

std::vector<Sentence> side(const Corpus& corpus, bool source) {
  std::vector<Sentence> out;
  for (const auto& p : corpus) out.push_back(source ? p.source : p.target);
  return out;
}

TrainingData encode_corpora(const Corpora& corpora, Vocabulary src, Vocabulary tgt) {
  TrainingData d;
  d.src_vocab = std::move(src);
  d.tgt_vocab = std::move(tgt);
  d.train = encode_corpus(corpora.train, d.src_vocab, d.tgt_vocab);
  d.valid = encode_corpus(corpora.valid, d.src_vocab, d.tgt_vocab);
  return d;
}

void write_curves(const TrainReport& report, const std::filesystem::path& dir, const std::string& prefix) {
  std::filesystem::create_directories(dir);
  std::ofstream loss(dir / (prefix + "loss.csv"));
  std::ofstream bleu(dir / (prefix + "bleu.csv"));
  if (!loss || !bleu) throw FormatError("cannot write curves in " + dir.string());
  loss << "epoch,train_loss,val_loss\n" << std::setprecision(17);
  bleu << "epoch,val_bleu\n" << std::setprecision(17);
  for (const auto& e : report.epochs) {
    loss << e.epoch << ',' << e.train_loss << ',' << e.val_loss << '\n';
    bleu << e.epoch << ',' << e.val_bleu << '\n';
  }
}

std::string lowercase(std::string s) {
  for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

Checkpoint require_checkpoint(const RunSpec& spec) {
  if (spec.checkpoint.empty()) throw ConfigError(spec.command + " needs --checkpoint");
  return load_checkpoint(spec.checkpoint);
}

}  // namespace

TrainingData build_training_data(const RunConfig& config) {
  const Corpora corpora = load_corpora(config);
  const auto src_sentences = side(corpora.train, true);
  const auto tgt_sentences = side(corpora.train, false);
  return encode_corpora(corpora, Vocabulary::build(src_sentences, config.min_freq),
                        Vocabulary::build(tgt_sentences, config.min_freq));
}

std::vector<std::pair<EncoderVariant, int>> parse_variant_list(const std::string& list) {
  std::vector<std::pair<EncoderVariant, int>> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos)
      throw ConfigError("variants entry '" + item + "' must look like name:branches");
    const int count = parse_number<int>("variants", trim(item.substr(colon + 1)));
    if (count < 1) throw ConfigError("variants entry '" + item + "' needs at least one branch");
    out.emplace_back(parse_variant(trim(item.substr(0, colon))), count);
  }
  return out;
}

std::vector<BranchDivergence> branch_divergence(const AttentionDump& dump) {
  std::map<int, int> last_layer;
  for (const auto& e : dump.entries)
    if (e.component == "encoder_branch") last_layer[e.index] = std::max(last_layer[e.index], e.layer);
  std::map<int, Matrix> averaged;
  std::map<int, int> heads;
  for (const auto& e : dump.entries) {
    if (e.component != "encoder_branch" || e.layer != last_layer[e.index]) continue;
    auto [it, fresh] = averaged.try_emplace(e.index, Matrix::Zero(e.weights.rows(), e.weights.cols()));
    it->second += e.weights;
    ++heads[e.index];
  }
  for (auto& [b, m] : averaged) m /= static_cast<double>(heads[b]);

  std::vector<BranchDivergence> out;
  for (auto a = averaged.begin(); a != averaged.end(); ++a)
    for (auto b = std::next(a); b != averaged.end(); ++b)
      out.push_back({a->first, b->first, mean_row_js_divergence(a->second, b->second)});
  return out;
}

void write_pgm(const Matrix& w, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << "P5\n" << w.cols() << ' ' << w.rows() << "\n255\n";
  for (Index r = 0; r < w.rows(); ++r) {
    const double top = w.row(r).maxCoeff();
    for (Index c = 0; c < w.cols(); ++c) {
      const double scaled = top > 0.0 ? std::clamp(w(r, c) / top, 0.0, 1.0) * 255.0 : 0.0;
      os.put(static_cast<char>(static_cast<unsigned char>(std::lround(scaled))));
    }
  }
}

void write_matrix_csv(const Matrix& w, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  os << std::setprecision(17);
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index c = 0; c < w.cols(); ++c) os << (c ? "," : "") << w(r, c);
    os << '\n';
  }
}

int cmd_train(const RunSpec& spec, std::ostream& out) {
  const RunConfig& c = spec.config;
  TrainState state;
  std::optional<TransformerModel> model;
  TrainingData data;
  if (!spec.checkpoint.empty()) {
    Checkpoint ck = load_checkpoint(spec.checkpoint);
    data = encode_corpora(load_corpora(c), ck.src_vocab, ck.tgt_vocab);
    model.emplace(std::move(ck.model));
    model->set_workers(c.workers);
    state = std::move(ck.state);
    out << "resuming after epoch " << state.epochs_done << '\n';
  } else {
    data = build_training_data(c);
    model.emplace(c.model_config(data.src_vocab.size(), data.tgt_vocab.size()));
  }
  TrainOptions options = c.train_options();
  options.checkpoint_dir = spec.out_dir;
  options.on_epoch = [&out](const EpochRecord& e) {
    out << "epoch " << e.epoch << "  train_loss " << e.train_loss << "  val_loss " << e.val_loss
        << "  val_bleu " << e.val_bleu << "  " << e.seconds << "s\n";
  };
  const TrainReport report = train(*model, data, options, state);
  report.write_csv(spec.out_dir / "report.csv");
  write_curves(report, spec.out_dir / "curves", "");
  out << "parameters " << parameter_count(*model) << "  total " << report.total_seconds << "s\n";
  return 0;
}

int cmd_translate(const RunSpec& spec, std::istream& in, std::ostream& out) {
  const Checkpoint ck = require_checkpoint(spec);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  std::vector<std::vector<int>> sources;
  std::vector<std::size_t> where;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    Sentence s = tokenize(lines[i]);
    if (s.empty()) continue;
    sources.push_back(ck.src_vocab.encode(s));
    where.push_back(i);
  }
  std::vector<std::string> result(lines.size());
  const auto hyps = greedy_decode_batch(ck.model, sources);
  for (std::size_t k = 0; k < hyps.size(); ++k) result[where[k]] = detokenize(ck.tgt_vocab.decode(hyps[k]));
  for (const auto& r : result) out << r << '\n';
  return 0;
}

int cmd_eval(const RunSpec& spec, std::ostream& out) {
  const Checkpoint ck = require_checkpoint(spec);
  const Corpus test = load_test_corpus(spec.config);
  if (test.empty()) throw ConfigError("evaluation corpus is empty");
  const auto encoded = encode_corpus(test, ck.src_vocab, ck.tgt_vocab);
  std::vector<std::vector<int>> sources;
  std::vector<std::vector<int>> refs;
  for (const auto& p : encoded) {
    sources.push_back(p.source);
    refs.push_back(p.target);
  }
  const auto hyps = greedy_decode_batch(ck.model, sources);
  BleuOptions options;
  options.smoothing = spec.config.bleu_smoothing;
  const BleuScore bleu = corpus_bleu<int>(hyps, refs, options);
  std::ofstream os(spec.out_dir / "eval.csv");
  os << "sentences,bleu,bleu100,brevity_penalty,p1,p2,p3,p4\n" << std::setprecision(17) << test.size()
     << ',' << bleu.score << ',' << 100.0 * bleu.score << ',' << bleu.brevity_penalty;
  for (double p : bleu.precisions) os << ',' << p;
  os << '\n';
  out << std::fixed << std::setprecision(4) << "BLEU " << bleu.score << " (" << std::setprecision(2)
      << 100.0 * bleu.score << ") on " << test.size() << " sentences\n";
  return 0;
}

int cmd_compare(const RunSpec& spec, std::ostream& out) {
  const RunConfig& c = spec.config;
  const auto list = parse_variant_list(c.variants);
  if (list.size() < 2) throw ConfigError("compare needs at least two variants");
  const TrainingData data = build_training_data(c);
  std::filesystem::create_directories(spec.out_dir);
  std::ofstream csv(spec.out_dir / "compare.csv");
  if (!csv) throw FormatError("cannot write compare.csv");
  csv << "variant,branches,params,final_bleu,total_seconds,critical_path_depth\n" << std::setprecision(17);
  for (const auto& [variant, branches] : list) {
    ModelConfig mc = c.model_config(data.src_vocab.size(), data.tgt_vocab.size());
    mc.variant = variant;
    mc.branches = branches;
    TransformerModel model(mc);
    TrainOptions options = c.train_options();
    const std::string name = lowercase(to_string(variant));
    out << name << " B=" << branches << '\n';
    options.on_epoch = [&out](const EpochRecord& e) {
      out << "  epoch " << e.epoch << "  val_loss " << e.val_loss << "  val_bleu " << e.val_bleu << '\n';
    };
    const TrainReport report = train(model, data, options);
    write_curves(report, spec.out_dir / "curves", name + "_b" + std::to_string(branches) + "_");
    csv << name << ',' << branches << ',' << parameter_count(model) << ',' << report.epochs.back().val_bleu
        << ',' << report.total_seconds << ',' << critical_path_depth(model.encoder()) << '\n';
  }
  return 0;
}

int cmd_attn_dump(const RunSpec& spec, std::ostream& out) {
  const Checkpoint ck = require_checkpoint(spec);
  const Sentence sentence = tokenize(spec.config.sentence);
  if (sentence.empty()) throw ConfigError("attn-dump needs a non-empty sentence (--set sentence=...)");
  const std::vector<int> src = ck.src_vocab.encode(sentence);
  std::vector<int> tgt = greedy_decode(ck.model, src, ck.model.config().max_len - 1);
  out << "translation: " << detokenize(ck.tgt_vocab.decode(tgt)) << '\n';
  tgt.push_back(kEos);
  const AttentionDump dump = extract_attention(ck.model, src, tgt);

  const auto dir = spec.out_dir / "attn";
  std::filesystem::create_directories(dir);
  for (const auto& e : dump.entries) {
    std::string stem = e.component;
    if (e.component == "encoder_branch") stem += std::to_string(e.index);
    if (e.component != "encoder_final") stem += "_layer" + std::to_string(e.layer);
    stem += "_head" + std::to_string(e.head);
    write_matrix_csv(e.weights, dir / (stem + ".csv"));
    write_pgm(e.weights, dir / (stem + ".pgm"));
  }

  std::ofstream csv(spec.out_dir / "divergence.csv");
  if (!csv) throw FormatError("cannot write divergence.csv");
  csv << "branch_a,branch_b,js_divergence\n" << std::setprecision(17);
  const auto pairs = branch_divergence(dump);
  double total = 0.0;
  for (const auto& d : pairs) {
    csv << d.branch_a << ',' << d.branch_b << ',' << d.js << '\n';
    total += d.js;
  }
  out << dump.entries.size() << " attention maps written to " << dir.string() << '\n';
  if (!pairs.empty()) out << "mean pairwise branch divergence " << total / static_cast<double>(pairs.size()) << '\n';
  return 0;
}

int cmd_bench(const RunSpec& spec, std::ostream& out) {
  const RunConfig& c = spec.config;
  const ModelConfig mc = c.model_config(kReservedTokens + 1, kReservedTokens + 1);
  mc.validate();
  std::mt19937_64 rng(mc.seed);
  const EncoderTopology topology = make_topology(mc.topology(), rng);
  const CriticalPathReport r = critical_path(topology, c.bench_options());
  std::filesystem::create_directories(spec.out_dir);
  std::ofstream csv(spec.out_dir / "bench.csv");
  if (!csv) throw FormatError("cannot write bench.csv");
  const std::string name = lowercase(to_string(mc.variant));
  csv << "variant,branches,workers,critical_path_depth,parallel_branches,wall_clock_forward\n"
      << std::setprecision(17) << name << ',' << mc.branches << ',' << c.workers << ','
      << r.sequential_depth << ',' << r.branch_count << ',' << r.wall_clock_forward << '\n';
  out << name << " B=" << mc.branches << "  critical path depth " << r.sequential_depth
      << "  forward " << r.wall_clock_forward * 1e3 << " ms (median of " << c.bench_repeats
      << ", " << c.workers << " workers)\n";
  return 0;
}

int run_cli(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Parallel-encoder Transformer translation engine"};
  RunSpec spec;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::optional<int> branches;
  std::optional<int> epochs;
  std::optional<std::string> task;
  app.add_option("command", spec.command, "train | translate | eval | compare | attn-dump | bench")
      ->required()
      ->check(CLI::IsMember({"train", "translate", "eval", "compare", "attn-dump", "bench"}));
  app.add_option("--config", spec.config_path, "key=value config file");
  app.add_option("--set", spec.overrides, "override a config key (key=value)")->take_all();
  app.add_option("--out", spec.out_dir, "output directory");
  app.add_option("--seed", seed, "random seed");
  app.add_option("--checkpoint", spec.checkpoint, "checkpoint to load (resume for train)");
  app.add_option("--variant", variant, "encoder topology")->check(CLI::IsMember({"stacked", "apa", "acpa", "aapa"}, CLI::ignore_case));
  app.add_option("--branches", branches, "parallel branches (stack depth for stacked)");
  app.add_option("--epochs", epochs, "training epochs");
  app.add_option("--task", task, "synthetic task, or tsv for corpus files")->check(CLI::IsMember({"copy", "reverse", "increment", "tsv"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (!spec.config_path.empty()) spec.config = load_run_config(spec.config_path);
    for (const auto& kv : spec.overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      spec.config.set(trim(kv.substr(0, eq)), kv.substr(eq + 1));
    }
    if (seed) spec.config.seed = *seed;
    if (variant) spec.config.set("variant", *variant);
    if (branches) spec.config.branches = *branches;
    if (epochs) spec.config.epochs = *epochs;
    if (task) spec.config.set("task", *task);
    write_manifest(spec);

    if (spec.command == "train") return cmd_train(spec, out);
    if (spec.command == "translate") return cmd_translate(spec, in, out);
    if (spec.command == "eval") return cmd_eval(spec, out);
    if (spec.command == "compare") return cmd_compare(spec, out);
    if (spec.command == "attn-dump") return cmd_attn_dump(spec, out);
    return cmd_bench(spec, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace parattn
