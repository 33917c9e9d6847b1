#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "emin/common.hpp"
#include "emin/corpus.hpp"

namespace emin {

// Built-in English stopword list (function words); can be overridden from a
// file with one token per line.
inline const std::set<std::string>& default_stopwords() {
  static const std::set<std::string> words = {
      "a", "about", "above", "after", "again", "against", "all", "am", "an", "and",
      "any", "are", "as", "at", "be", "because", "been", "before", "being", "below",
      "between", "both", "but", "by", "can", "could", "did", "do", "does", "doing",
      "down", "during", "each", "few", "for", "from", "further", "had", "has",
      "have", "having", "he", "her", "here", "hers", "him", "his", "how", "i",
      "if", "in", "into", "is", "it", "its", "itself", "just", "me", "more",
      "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on",
      "once", "only", "or", "other", "our", "ours", "out", "over", "own", "same",
      "she", "should", "so", "some", "such", "than", "that", "the", "their",
      "theirs", "them", "then", "there", "these", "they", "this", "those",
      "through", "to", "too", "under", "until", "up", "very", "was", "we", "were",
      "what", "when", "where", "which", "while", "who", "whom", "why", "will",
      "with", "would", "you", "your", "yours"};
  return words;
}

inline std::set<std::string> load_stopwords(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open stopword file: " + path.string());
  std::set<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    auto toks = tokenize(line);
    words.insert(toks.begin(), toks.end());
  }
  return words;
}

// Tokenized, lowercased, stopword-free text plus its token set.
struct ProcessedText {
  std::string original;
  std::vector<std::string> tokens;
  std::set<std::string> token_set;
};

// Tokenization into words, stopword removal, lowercasing. Punctuation is
// stripped from token edges so "cat." matches "cat".
inline ProcessedText preprocess(const std::string& text,
                                const std::set<std::string>& stopwords = default_stopwords()) {
  ProcessedText out;
  out.original = text;
  for (auto tok : tokenize(text)) {
    std::size_t b = 0, e = tok.size();
    while (b < e && !std::isalnum(static_cast<unsigned char>(tok[b]))) ++b;
    while (e > b && !std::isalnum(static_cast<unsigned char>(tok[e - 1]))) --e;
    tok = tok.substr(b, e - b);
    if (tok.empty() || stopwords.count(tok)) continue;
    out.tokens.push_back(tok);
    out.token_set.insert(tok);
  }
  return out;
}

// DICE over token sets: 2|A∩B| / (|A|+|B|); 0 when both sides are empty.
inline double dice_similarity(const ProcessedText& a, const ProcessedText& b) {
  if (a.token_set.empty() && b.token_set.empty()) return 0.0;
  std::size_t inter = 0;
  for (const auto& t : a.token_set) inter += b.token_set.count(t);
  return 2.0 * static_cast<double>(inter) /
         static_cast<double>(a.token_set.size() + b.token_set.size());
}

struct ScoredDocument {
  std::string id;
  double score = 0.0;
  int index = 0;  // position in the collection
};

// Document-stage lexical scorer: tf-idf weighted cosine over preprocessed
// tokens. Kept behind this function so a dense scorer can replace it without
// touching the paragraph stage.
class DocumentIndex {
 public:
  DocumentIndex(const DocumentCollection& coll, const std::set<std::string>& stopwords)
      : coll_(&coll), stopwords_(&stopwords) {
    if (coll.docs.empty()) throw DataError("empty document collection");
    doc_tf_.resize(coll.docs.size());
    for (std::size_t d = 0; d < coll.docs.size(); ++d) {
      for (const auto& para : coll.docs[d].paragraphs) {
        for (const auto& tok : preprocess(para, stopwords).tokens) ++doc_tf_[d][tok];
      }
      for (const auto& [tok, tf] : doc_tf_[d]) ++df_[tok];
    }
    // idf = ln(N/df); terms present in every document contribute nothing.
    const double n = static_cast<double>(coll.docs.size());
    for (const auto& [tok, df] : df_) idf_[tok] = std::log(n / static_cast<double>(df));
    doc_norm_.resize(coll.docs.size(), 0.0);
    for (std::size_t d = 0; d < coll.docs.size(); ++d) {
      double s = 0.0;
      for (const auto& [tok, tf] : doc_tf_[d]) {
        const double w = tf * idf_[tok];
        s += w * w;
      }
      doc_norm_[d] = std::sqrt(s);
    }
  }

  std::vector<ScoredDocument> retrieve(const ProcessedText& query, int top_d) const {
    if (query.tokens.empty()) throw DataError("empty retrieval query");
    if (top_d < 1) throw UsageError("top_d must be >= 1");
    std::map<std::string, int> qtf;
    for (const auto& tok : query.tokens) ++qtf[tok];
    double qnorm = 0.0;
    for (const auto& [tok, tf] : qtf) {
      auto it = idf_.find(tok);
      if (it == idf_.end()) continue;
      const double w = tf * it->second;
      qnorm += w * w;
    }
    qnorm = std::sqrt(qnorm);
    std::vector<ScoredDocument> scored;
    scored.reserve(coll_->docs.size());
    for (std::size_t d = 0; d < coll_->docs.size(); ++d) {
      double dot = 0.0;
      for (const auto& [tok, tf] : qtf) {
        auto itIdf = idf_.find(tok);
        if (itIdf == idf_.end()) continue;
        auto itTf = doc_tf_[d].find(tok);
        if (itTf == doc_tf_[d].end()) continue;
        dot += (tf * itIdf->second) * (itTf->second * itIdf->second);
      }
      double score = 0.0;
      if (qnorm > 0.0 && doc_norm_[d] > 0.0) score = dot / (qnorm * doc_norm_[d]);
      scored.push_back(ScoredDocument{coll_->docs[d].id, score, static_cast<int>(d)});
    }
    std::stable_sort(scored.begin(), scored.end(),
                     [](const ScoredDocument& a, const ScoredDocument& b) {
                       if (a.score != b.score) return a.score > b.score;
                       return a.id < b.id;
                     });
    if (static_cast<int>(scored.size()) > top_d) scored.resize(top_d);
    return scored;
  }

  const DocumentCollection& collection() const { return *coll_; }
  const std::set<std::string>& stopwords() const { return *stopwords_; }

 private:
  const DocumentCollection* coll_;
  const std::set<std::string>* stopwords_;
  std::vector<std::map<std::string, int>> doc_tf_;
  std::map<std::string, int> df_;
  std::map<std::string, double> idf_;
  std::vector<double> doc_norm_;
};

struct RankedParagraph {
  std::string paragraph;
  std::string document_id;
  int paragraph_index = 0;
  double dice = 0.0;
};

struct RankedEvidence {
  std::vector<RankedParagraph> paragraphs;  // scores non-increasing, length <= k
  bool shortfall = false;                   // fewer than k paragraphs were available
};

// Two-stage selection: documents first (tf-idf cosine), then paragraphs by
// DICE against the preprocessed query. Ties break by (doc id, paragraph
// index).
inline RankedEvidence select_evidence(const std::string& answer_query,
                                      const DocumentIndex& index, int k,
                                      int top_d = 25) {
  if (k < 1) throw UsageError("k must be >= 1");
  const ProcessedText query = preprocess(answer_query, index.stopwords());
  const auto docs = index.retrieve(query, top_d);
  std::vector<RankedParagraph> all;
  for (const auto& sd : docs) {
    const Document& doc = index.collection().docs[sd.index];
    for (std::size_t p = 0; p < doc.paragraphs.size(); ++p) {
      RankedParagraph rp;
      rp.paragraph = doc.paragraphs[p];
      rp.document_id = doc.id;
      rp.paragraph_index = static_cast<int>(p);
      rp.dice = dice_similarity(query, preprocess(doc.paragraphs[p], index.stopwords()));
      all.push_back(std::move(rp));
    }
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const RankedParagraph& a, const RankedParagraph& b) {
                     if (a.dice != b.dice) return a.dice > b.dice;
                     if (a.document_id != b.document_id) return a.document_id < b.document_id;
                     return a.paragraph_index < b.paragraph_index;
                   });
  RankedEvidence out;
  out.shortfall = static_cast<int>(all.size()) < k;
  if (static_cast<int>(all.size()) > k) all.resize(k);
  out.paragraphs = std::move(all);
  return out;
}

}  // namespace emin
