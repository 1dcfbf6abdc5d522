#include "parattn/data.hpp"

#include "parattn/errors.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace parattn {

namespace {

const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> r{"<pad>", "<s>", "</s>", "<unk>"};
  return r;
}

bool is_reserved(std::string_view t) {
  const auto& r = reserved_tokens();
  return std::find(r.begin(), r.end(), t) != r.end();
}

}  // namespace

Sentence tokenize(std::string_view line) {
  Sentence out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.emplace_back(line.substr(start, i - start));
  }
  return out;
}

std::string detokenize(const Sentence& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out += ' ';
    out += tokens[i];
  }
  return out;
}

Vocabulary::Vocabulary() : tokens_(reserved_tokens()) {
  for (int i = 0; i < size(); ++i) index_.emplace(tokens_[i], i);
}

Vocabulary Vocabulary::build(std::span<const Sentence> sentences, int min_freq) {
  std::map<std::string, int> counts;
  bool any = false;
  for (const auto& s : sentences) {
    for (const auto& t : s) {
      any = true;
      if (!is_reserved(t)) ++counts[t];
    }
  }
  if (!any) throw VocabularyError("cannot build a vocabulary from an empty corpus");
  Vocabulary v;
  for (const auto& [tok, n] : counts) {
    if (n < min_freq) continue;
    v.index_.emplace(tok, v.size());
    v.tokens_.push_back(tok);
  }
  return v;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  const auto& r = reserved_tokens();
  if (tokens.size() < r.size() || !std::equal(r.begin(), r.end(), tokens.begin()))
    throw FormatError("vocabulary does not start with the reserved tokens");
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  v.index_.clear();
  for (int i = 0; i < v.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], i).second)
      throw FormatError("duplicate vocabulary token '" + v.tokens_[i] + "'");
  }
  return v;
}

int Vocabulary::id(std::string_view token) const {
  if (is_reserved(token)) return kUnk;
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size())
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(size()));
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const Sentence& sentence) const {
  std::vector<int> ids;
  ids.reserve(sentence.size());
  for (const auto& t : sentence) ids.push_back(id(t));
  return ids;
}

Sentence Vocabulary::decode(std::span<const int> ids) const {
  Sentence out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write vocabulary " + path.string());
  os << "#vocab " << size() << '\n';
  for (const auto& t : tokens_) os << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot read vocabulary " + path.string());
  std::string header;
  std::getline(is, header);
  int declared = -1;
  if (std::sscanf(header.c_str(), "#vocab %d", &declared) != 1 || declared < kReservedTokens)
    throw FormatError("vocabulary " + path.string() + ": bad header '" + header + "'");
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  if (static_cast<int>(tokens.size()) != declared)
    throw FormatError("vocabulary " + path.string() + ": header declares " +
                      std::to_string(declared) + " tokens, found " + std::to_string(tokens.size()));
  return from_tokens(std::move(tokens));
}

LoadedCorpus load_parallel_tsv(const std::filesystem::path& path, int max_len) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot read corpus " + path.string());
  LoadedCorpus out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos && line.find('\t') == std::string::npos)
      continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
      throw FormatError(path.string() + ":" + std::to_string(lineno) +
                        ": expected exactly one tab between source and target");
    SentencePair p{tokenize(std::string_view(line).substr(0, tab)),
                   tokenize(std::string_view(line).substr(tab + 1))};
    if (p.source.empty() || p.target.empty())
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": empty source or target");
    if (static_cast<int>(p.source.size()) > max_len || static_cast<int>(p.target.size()) > max_len) {
      ++out.skipped;
      continue;
    }
    out.pairs.push_back(std::move(p));
  }
  return out;
}

void save_parallel_tsv(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write corpus " + path.string());
  for (const auto& p : corpus) os << detokenize(p.source) << '\t' << detokenize(p.target) << '\n';
}

SyntheticTask parse_task(const std::string& name) {
  if (name == "copy") return SyntheticTask::Copy;
  if (name == "reverse") return SyntheticTask::Reverse;
  if (name == "increment") return SyntheticTask::Increment;
  throw ConfigError("unknown synthetic task '" + name + "' (expected copy|reverse|increment)");
}

std::string to_string(SyntheticTask task) {
  switch (task) {
    case SyntheticTask::Copy: return "copy";
    case SyntheticTask::Reverse: return "reverse";
    case SyntheticTask::Increment: return "increment";
  }
  return "unknown";
}

std::string synthetic_token(int k) {
  if (k < 26) return std::string(1, static_cast<char>('a' + k));
  return "w" + std::to_string(k);
}

namespace {

int synthetic_index(const std::string& tok) {
  if (tok.size() == 1 && tok[0] >= 'a' && tok[0] <= 'z') return tok[0] - 'a';
  if (tok.size() > 1 && tok[0] == 'w') return std::stoi(tok.substr(1));
  throw VocabularyError("'" + tok + "' is not a synthetic token");
}

}  // namespace

Sentence apply_task_rule(SyntheticTask task, int vocab_size, const Sentence& source) {
  const int content = vocab_size - kReservedTokens;
  switch (task) {
    case SyntheticTask::Copy: return source;
    case SyntheticTask::Reverse: return Sentence(source.rbegin(), source.rend());
    case SyntheticTask::Increment: {
      Sentence out;
      for (const auto& t : source) out.push_back(synthetic_token((synthetic_index(t) + 1) % content));
      return out;
    }
  }
  return source;
}

Corpus make_synthetic_task(SyntheticTask task, int vocab_size, int n_pairs, int min_len,
                           int max_len, std::uint64_t seed) {
  if (vocab_size <= kReservedTokens)
    throw ConfigError("synthetic task needs vocab_size > " + std::to_string(kReservedTokens));
  if (min_len < 1 || max_len < min_len) throw ConfigError("synthetic task: bad length range");
  const int content = vocab_size - kReservedTokens;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> length(min_len, max_len);
  std::uniform_int_distribution<int> token(0, content - 1);
  Corpus corpus;
  corpus.reserve(static_cast<std::size_t>(n_pairs));
  for (int i = 0; i < n_pairs; ++i) {
    Sentence src;
    const int n = length(rng);
    for (int t = 0; t < n; ++t) src.push_back(synthetic_token(token(rng)));
    Sentence tgt = apply_task_rule(task, vocab_size, src);
    corpus.push_back({std::move(src), std::move(tgt)});
  }
  return corpus;
}

std::vector<EncodedPair> encode_corpus(const Corpus& corpus, const Vocabulary& src_vocab,
                                       const Vocabulary& tgt_vocab) {
  std::vector<EncodedPair> out;
  out.reserve(corpus.size());
  for (const auto& p : corpus) out.push_back({src_vocab.encode(p.source), tgt_vocab.encode(p.target)});
  return out;
}

Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> SequenceBatch::mask() const {
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(batch, len);
  for (int b = 0; b < batch; ++b)
    for (int t = 0; t < len; ++t) m(b, t) = t < lengths[static_cast<std::size_t>(b)];
  return m;
}

SequenceBatch pad_sequences(std::span<const std::vector<int>> sequences) {
  SequenceBatch s;
  s.batch = static_cast<int>(sequences.size());
  for (const auto& q : sequences) s.len = std::max(s.len, static_cast<int>(q.size()));
  s.ids.assign(static_cast<std::size_t>(s.batch) * s.len, kPad);
  for (int b = 0; b < s.batch; ++b) {
    const auto& q = sequences[static_cast<std::size_t>(b)];
    std::copy(q.begin(), q.end(), s.ids.begin() + static_cast<std::ptrdiff_t>(b) * s.len);
    s.lengths.push_back(static_cast<int>(q.size()));
  }
  return s;
}

TranslationBatch make_batch(std::span<const EncodedPair> corpus, std::span<const std::size_t> ids) {
  std::vector<std::vector<int>> src;
  std::vector<std::vector<int>> tin;
  std::vector<std::vector<int>> tout;
  for (std::size_t i : ids) {
    const auto& p = corpus[i];
    src.push_back(p.source);
    std::vector<int> in{kBos};
    in.insert(in.end(), p.target.begin(), p.target.end());
    std::vector<int> out(p.target);
    out.push_back(kEos);
    tin.push_back(std::move(in));
    tout.push_back(std::move(out));
  }
  TranslationBatch b;
  b.src = pad_sequences(src);
  b.tgt_in = pad_sequences(tin);
  b.tgt_out = pad_sequences(tout);
  b.pair_ids.assign(ids.begin(), ids.end());
  return b;
}

std::vector<std::vector<std::size_t>> batch_plan(std::span<const EncodedPair> corpus,
                                                 int batch_size, std::uint64_t seed, int epoch) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return corpus[a].source.size() < corpus[b].source.size();
  });
  std::vector<std::vector<std::size_t>> plan;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    plan.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                      order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  std::shuffle(plan.begin(), plan.end(), rng);
  return plan;
}

std::vector<TranslationBatch> batch_iter(std::span<const EncodedPair> corpus, int batch_size,
                                         std::uint64_t seed, int epoch) {
  std::vector<TranslationBatch> out;
  for (const auto& ids : batch_plan(corpus, batch_size, seed, epoch))
    out.push_back(make_batch(corpus, ids));
  return out;
}

}  // namespace parattn
