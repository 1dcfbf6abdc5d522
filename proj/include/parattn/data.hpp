#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace parattn {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kReservedTokens = 4;

using Sentence = std::vector<std::string>;

struct SentencePair {
  Sentence source;
  Sentence target;

  bool operator==(const SentencePair&) const = default;
};

using Corpus = std::vector<SentencePair>;

/// Splits on ASCII whitespace.
Sentence tokenize(std::string_view line);
std::string detokenize(const Sentence& tokens);

/// Token <-> id map. Ids 0..3 are PAD, BOS, EOS, UNK; corpus tokens follow in
/// alphabetical order.
class Vocabulary {
 public:
  Vocabulary();

  /// Tokens seen at least `min_freq` times. Throws VocabularyError on an empty corpus.
  static Vocabulary build(std::span<const Sentence> sentences, int min_freq = 1);
  /// Rebuild from an id-ordered token list whose first four entries are the reserved tokens.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  /// UNK for unknown tokens and for the reserved spellings.
  int id(std::string_view token) const;
  /// Throws VocabularyError for ids outside the vocabulary.
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(const Sentence& sentence) const;
  Sentence decode(std::span<const int> ids) const;

  /// Text format: header line "#vocab <size>", then one token per line in id order.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct LoadedCorpus {
  Corpus pairs;
  /// Pairs dropped because one side exceeded max_len tokens.
  int skipped = 0;
};

/// One "source<TAB>target" pair per line. Blank lines are ignored; a line without
/// exactly one tab or with an empty side throws FormatError naming the line number.
LoadedCorpus load_parallel_tsv(const std::filesystem::path& path, int max_len = 60);
void save_parallel_tsv(const Corpus& corpus, const std::filesystem::path& path);

enum class SyntheticTask { Copy, Reverse, Increment };

SyntheticTask parse_task(const std::string& name);
std::string to_string(SyntheticTask task);

/// Name of content token k: "a".."z", then "w26", "w27", ...
std::string synthetic_token(int k);

/// Random source sentences over vocab_size - 4 content tokens with lengths in
/// [min_len, max_len]; targets follow the task rule. Deterministic in `seed`.
Corpus make_synthetic_task(SyntheticTask task, int vocab_size, int n_pairs, int min_len,
                           int max_len, std::uint64_t seed);
/// Target produced by the task rule for a source sentence.
Sentence apply_task_rule(SyntheticTask task, int vocab_size, const Sentence& source);

struct EncodedPair {
  std::vector<int> source;
  std::vector<int> target;
};

std::vector<EncodedPair> encode_corpus(const Corpus& corpus, const Vocabulary& src_vocab,
                                       const Vocabulary& tgt_vocab);

/// Right-padded id matrix [batch, len] stored row-major.
struct SequenceBatch {
  int batch = 0;
  int len = 0;
  std::vector<int> ids;
  std::vector<int> lengths;

  int at(int b, int t) const { return ids[static_cast<std::size_t>(b) * len + t]; }
  /// true where a position holds a real token.
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> mask() const;
};

/// tgt_in = BOS + target, tgt_out = target + EOS; both padded to the same length.
struct TranslationBatch {
  SequenceBatch src;
  SequenceBatch tgt_in;
  SequenceBatch tgt_out;
  std::vector<std::size_t> pair_ids;

  int size() const { return src.batch; }
};

SequenceBatch pad_sequences(std::span<const std::vector<int>> sequences);
TranslationBatch make_batch(std::span<const EncodedPair> corpus, std::span<const std::size_t> ids);

/// Partition of [0, n) into batches: shuffle under (seed, epoch), stable-sort by
/// source length, chunk, then shuffle the chunk order.
std::vector<std::vector<std::size_t>> batch_plan(std::span<const EncodedPair> corpus,
                                                 int batch_size, std::uint64_t seed, int epoch);

std::vector<TranslationBatch> batch_iter(std::span<const EncodedPair> corpus, int batch_size,
                                         std::uint64_t seed, int epoch);

}  // namespace parattn
