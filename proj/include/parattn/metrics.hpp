#pragma once

#include "parattn/tensor.hpp"

#include <chrono>
#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace parattn {

struct NgramMatch {
  long long clipped = 0;
  long long total = 0;
};

/// Candidate n-gram counts clipped by the reference counts, summed over the corpus.
/// One reference per candidate.
template <class Token>
NgramMatch modified_ngram_precision(std::span<const std::vector<Token>> candidates,
                                    std::span<const std::vector<Token>> references, int n) {
  if (n < 1) throw std::invalid_argument("n-gram order must be >= 1");
  if (candidates.size() != references.size())
    throw std::invalid_argument("candidate and reference counts differ");
  NgramMatch m;
  auto count = [n](const std::vector<Token>& s) {
    std::map<std::vector<Token>, long long> c;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= s.size(); ++i)
      ++c[std::vector<Token>(s.begin() + static_cast<std::ptrdiff_t>(i),
                             s.begin() + static_cast<std::ptrdiff_t>(i) + n)];
    return c;
  };
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    const auto cand = count(candidates[k]);
    const auto ref = count(references[k]);
    for (const auto& [gram, c] : cand) {
      m.total += c;
      auto it = ref.find(gram);
      if (it != ref.end()) m.clipped += std::min(c, it->second);
    }
  }
  return m;
}

struct BleuScore {
  double score = 0.0;
  std::vector<double> precisions;
  double brevity_penalty = 0.0;
  long long candidate_len = 0;
  long long reference_len = 0;
};

struct BleuOptions {
  int max_n = 4;
  /// Add-one smoothing of the n >= 2 precisions.
  bool smoothing = false;
};

/// Corpus-level BLEU: clipped counts and lengths are summed over the corpus before
/// the ratios are taken. score = BP · exp(mean ln pₙ), and 0 when any pₙ is 0.
template <class Token>
BleuScore corpus_bleu(std::span<const std::vector<Token>> candidates,
                      std::span<const std::vector<Token>> references, BleuOptions options = {}) {
  if (candidates.empty()) throw std::invalid_argument("corpus_bleu: empty candidate list");
  if (candidates.size() != references.size())
    throw std::invalid_argument("corpus_bleu: candidate and reference counts differ");
  BleuScore s;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    s.candidate_len += static_cast<long long>(candidates[k].size());
    s.reference_len += static_cast<long long>(references[k].size());
  }
  double log_sum = 0.0;
  bool zero = false;
  for (int n = 1; n <= options.max_n; ++n) {
    const NgramMatch m = modified_ngram_precision(candidates, references, n);
    double p = 0.0;
    if (options.smoothing && n > 1)
      p = (static_cast<double>(m.clipped) + 1.0) / (static_cast<double>(m.total) + 1.0);
    else if (m.total > 0)
      p = static_cast<double>(m.clipped) / static_cast<double>(m.total);
    s.precisions.push_back(p);
    if (p <= 0.0)
      zero = true;
    else
      log_sum += std::log(p);
  }
  if (s.candidate_len == 0)
    s.brevity_penalty = 0.0;
  else if (s.candidate_len < s.reference_len)
    s.brevity_penalty = std::exp(1.0 - static_cast<double>(s.reference_len) /
                                           static_cast<double>(s.candidate_len));
  else
    s.brevity_penalty = 1.0;
  s.score = zero ? 0.0 : s.brevity_penalty * std::exp(log_sum / options.max_n);
  return s;
}

/// Wall-clock seconds accumulated per label.
class TimingRegistry {
 public:
  void add(const std::string& label, double seconds) { totals_[label] += seconds; }
  double total(const std::string& label) const {
    auto it = totals_.find(label);
    return it == totals_.end() ? 0.0 : it->second;
  }
  const std::map<std::string, double>& totals() const { return totals_; }

 private:
  std::map<std::string, double> totals_;
};

/// Runs `work` and returns its monotonic-clock duration in seconds, also adding it
/// to `label` in the registry.
template <class Work>
double time_block(TimingRegistry& registry, const std::string& label, Work&& work) {
  const auto start = std::chrono::steady_clock::now();
  work();
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  registry.add(label, s);
  return s;
}

/// Jensen-Shannon divergence (natural log, bounded by ln 2) of two distributions.
double js_divergence(const RowVector& p, const RowVector& q);

/// Mean over rows of the row-wise JS divergence of two equally shaped weight maps.
double mean_row_js_divergence(const Matrix& a, const Matrix& b);

}  // namespace parattn
