#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "emin/common.hpp"

namespace emin {

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

namespace detail {

using Tokens = std::vector<std::string>;
using NGramCounts = std::map<std::vector<std::string>, int>;

inline NGramCounts ngram_counts(const Tokens& toks, int n) {
  NGramCounts counts;
  if (static_cast<int>(toks.size()) < n) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i)
    ++counts[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)];
  return counts;
}

inline int clipped_overlap(const NGramCounts& cand, const NGramCounts& ref) {
  int overlap = 0;
  for (const auto& [gram, cnt] : cand) {
    auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(cnt, it->second);
  }
  return overlap;
}

inline int total(const NGramCounts& c) {
  int t = 0;
  for (const auto& [gram, cnt] : c) t += cnt;
  return t;
}

inline PRF prf(double overlap, double cand_total, double ref_total) {
  PRF out;
  out.precision = cand_total > 0.0 ? overlap / cand_total : 0.0;
  out.recall = ref_total > 0.0 ? overlap / ref_total : 0.0;
  out.f1 = (out.precision + out.recall) > 0.0
               ? 2.0 * out.precision * out.recall / (out.precision + out.recall)
               : 0.0;
  return out;
}

inline int lcs_length(const Tokens& a, const Tokens& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

}  // namespace detail

// ROUGE-N with clipped n-gram overlap.
inline PRF rouge_n(const std::vector<std::string>& candidate,
                   const std::vector<std::string>& reference, int n) {
  if (n < 1) throw UsageError("rouge_n requires n >= 1");
  const auto cand = detail::ngram_counts(candidate, n);
  const auto ref = detail::ngram_counts(reference, n);
  return detail::prf(detail::clipped_overlap(cand, ref), detail::total(cand),
                     detail::total(ref));
}

// ROUGE-L from the longest common subsequence.
inline PRF rouge_l(const std::vector<std::string>& candidate,
                   const std::vector<std::string>& reference) {
  const int lcs = detail::lcs_length(candidate, reference);
  return detail::prf(lcs, static_cast<double>(candidate.size()),
                     static_cast<double>(reference.size()));
}

// Corpus-level BLEU-4: clipped modified precisions p_1..p_4, uniform
// geometric mean, brevity penalty exp(1 - r/c) when c < r. When smoothing is
// on, a zero corpus p_n is replaced by 1 / (2 * total candidate n-gram
// count) for that n; desk-scale sentences are short enough to need it.
inline double bleu4(const std::vector<std::vector<std::string>>& candidates,
                    const std::vector<std::vector<std::string>>& references,
                    bool smoothing = true) {
  if (candidates.empty()) throw UsageError("bleu4 requires a nonempty corpus");
  if (candidates.size() != references.size())
    throw UsageError("bleu4 candidate/reference count mismatch");
  double log_sum = 0.0;
  for (int n = 1; n <= 4; ++n) {
    long long overlap = 0, cand_total = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const auto cand = detail::ngram_counts(candidates[i], n);
      const auto ref = detail::ngram_counts(references[i], n);
      overlap += detail::clipped_overlap(cand, ref);
      cand_total += detail::total(cand);
    }
    double pn;
    if (cand_total == 0) {
      pn = 0.0;
    } else if (overlap == 0) {
      pn = smoothing ? 1.0 / (2.0 * static_cast<double>(cand_total)) : 0.0;
    } else {
      pn = static_cast<double>(overlap) / static_cast<double>(cand_total);
    }
    if (pn <= 0.0) return 0.0;
    log_sum += 0.25 * std::log(pn);
  }
  long long c = 0, r = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    c += static_cast<long long>(candidates[i].size());
    r += static_cast<long long>(references[i].size());
  }
  const double bp = (c >= r || c == 0) ? 1.0
                                       : std::exp(1.0 - static_cast<double>(r) /
                                                            static_cast<double>(c));
  return bp * std::exp(log_sum);
}

struct MetricSummary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation
};

struct MetricReport {
  MetricSummary rouge1, rouge2, rougeL;
  double bleu4_corpus = 0.0;
  MetricSummary bleu4_sentence;
  std::vector<double> per_instance_rouge1, per_instance_rouge2, per_instance_rougeL,
      per_instance_bleu4;
};

namespace detail {

inline MetricSummary summarize(const std::vector<double>& xs) {
  MetricSummary s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

}  // namespace detail

// ROUGE reported as F1 (stated explicitly since the reporting convention
// varies); BLEU-4 both corpus-level and mean sentence-level.
inline MetricReport evaluate_corpus(const std::vector<std::vector<std::string>>& candidates,
                                    const std::vector<std::vector<std::string>>& references) {
  if (candidates.size() != references.size())
    throw UsageError("evaluate_corpus size mismatch");
  MetricReport rep;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    rep.per_instance_rouge1.push_back(rouge_n(candidates[i], references[i], 1).f1);
    rep.per_instance_rouge2.push_back(rouge_n(candidates[i], references[i], 2).f1);
    rep.per_instance_rougeL.push_back(rouge_l(candidates[i], references[i]).f1);
    rep.per_instance_bleu4.push_back(bleu4({candidates[i]}, {references[i]}));
  }
  rep.rouge1 = detail::summarize(rep.per_instance_rouge1);
  rep.rouge2 = detail::summarize(rep.per_instance_rouge2);
  rep.rougeL = detail::summarize(rep.per_instance_rougeL);
  rep.bleu4_sentence = detail::summarize(rep.per_instance_bleu4);
  rep.bleu4_corpus = candidates.empty() ? 0.0 : bleu4(candidates, references);
  return rep;
}

}  // namespace emin
