#pragma once

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "emin/common.hpp"
#include "emin/rng.hpp"

namespace emin {

// Hard limits shared across the pipeline.
inline constexpr int kMaxInputLen = 944;     // question + answer tokens
inline constexpr int kMaxEvidenceLen = 944;  // one evidence paragraph
inline constexpr int kMaxExplanationLen = 128;

// Whitespace tokenization with lowercasing; the corpus tokens are atomic
// words so no subword machinery is involved.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// One (question, answer, evidence, explanation) record.
struct QAEInstance {
  std::string id;
  std::string question;
  std::string answer;
  std::vector<std::string> evidence;
  std::string explanation;                 // empty at pure inference
  std::optional<int> planted_index;        // synthetic ground truth, never fed to the model

  void validate(std::size_t line_no = 0) const {
    auto where = [line_no] {
      return line_no ? " at line " + std::to_string(line_no) : std::string();
    };
    const auto q = tokenize(question);
    const auto a = tokenize(answer);
    if (q.empty()) throw DataError("empty question" + where());
    if (static_cast<int>(q.size() + a.size()) > kMaxInputLen)
      throw DataError("question+answer exceeds " + std::to_string(kMaxInputLen) +
                      " tokens" + where());
    for (const auto& p : evidence) {
      if (static_cast<int>(tokenize(p).size()) > kMaxEvidenceLen)
        throw DataError("evidence paragraph exceeds " +
                        std::to_string(kMaxEvidenceLen) + " tokens" + where());
    }
    if (static_cast<int>(tokenize(explanation).size()) > kMaxExplanationLen)
      throw DataError("explanation exceeds " + std::to_string(kMaxExplanationLen) +
                      " tokens" + where());
    if (planted_index &&
        (*planted_index < 0 || *planted_index >= static_cast<int>(evidence.size())))
      throw DataError("planted_index out of range" + where());
  }
};

// Token ids. 0..3 are reserved; real tokens are dense in [4, V).
struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumReserved = 4;

  std::unordered_map<std::string, int> token_to_id;
  std::vector<std::string> id_to_token{"<pad>", "<bos>", "<eos>", "<unk>"};

  int size() const { return static_cast<int>(id_to_token.size()); }

  int add(const std::string& tok) {
    auto it = token_to_id.find(tok);
    if (it != token_to_id.end()) return it->second;
    int id = size();
    token_to_id.emplace(tok, id);
    id_to_token.push_back(tok);
    return id;
  }

  int id_of(const std::string& tok) const {
    auto it = token_to_id.find(tok);
    return it == token_to_id.end() ? kUnk : it->second;
  }

  std::vector<int> encode(const std::vector<std::string>& toks) const {
    std::vector<int> out;
    out.reserve(toks.size());
    for (const auto& t : toks) out.push_back(id_of(t));
    return out;
  }

  std::vector<int> encode_text(const std::string& text) const {
    return encode(tokenize(text));
  }

  std::string decode(const std::vector<int>& ids, bool strip_reserved = true) const {
    std::string out;
    for (int id : ids) {
      if (strip_reserved && id < kNumReserved) continue;
      if (!out.empty()) out.push_back(' ');
      out += id < size() ? id_to_token[id] : "<bad>";
    }
    return out;
  }
};

// Paragraph-structured document collection used by retrieval.
struct Document {
  std::string id;
  std::vector<std::string> paragraphs;
};

struct DocumentCollection {
  std::vector<Document> docs;  // kept sorted by id

  void sort_by_id() {
    std::sort(docs.begin(), docs.end(),
              [](const Document& a, const Document& b) { return a.id < b.id; });
  }
};

// --- dataset file format (UTF-8 JSON Lines) ---

inline QAEInstance instance_from_json(const nlohmann::json& j, std::size_t line_no) {
  auto require_string = [&](const char* key) {
    if (!j.contains(key) || !j.at(key).is_string())
      throw DataError("missing or non-string key \"" + std::string(key) +
                      "\" at line " + std::to_string(line_no));
    return j.at(key).get<std::string>();
  };
  QAEInstance inst;
  if (!j.contains("id") || !j.at("id").is_string())
    throw DataError("missing or non-string key \"id\" at line " + std::to_string(line_no));
  inst.id = j.at("id").get<std::string>();
  inst.question = require_string("question");
  inst.answer = require_string("answer");
  if (j.contains("evidence")) {
    if (!j.at("evidence").is_array())
      throw DataError("\"evidence\" is not an array at line " + std::to_string(line_no));
    for (const auto& e : j.at("evidence")) {
      if (!e.is_string())
        throw DataError("non-string evidence entry at line " + std::to_string(line_no));
      inst.evidence.push_back(e.get<std::string>());
    }
  }
  if (j.contains("explanation")) {
    if (!j.at("explanation").is_string())
      throw DataError("\"explanation\" is not a string at line " + std::to_string(line_no));
    inst.explanation = j.at("explanation").get<std::string>();
  }
  if (j.contains("planted_index")) {
    if (!j.at("planted_index").is_number_integer())
      throw DataError("\"planted_index\" is not an integer at line " + std::to_string(line_no));
    inst.planted_index = j.at("planted_index").get<int>();
  }
  inst.validate(line_no);
  return inst;
}

inline nlohmann::json instance_to_json(const QAEInstance& inst) {
  nlohmann::json j;
  j["id"] = inst.id;
  j["question"] = inst.question;
  j["answer"] = inst.answer;
  if (!inst.evidence.empty()) j["evidence"] = inst.evidence;
  if (!inst.explanation.empty()) j["explanation"] = inst.explanation;
  if (inst.planted_index) j["planted_index"] = *inst.planted_index;
  return j;
}

inline std::vector<QAEInstance> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file: " + path.string());
  std::vector<QAEInstance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("malformed JSON at line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(instance_from_json(j, line_no));
  }
  return out;
}

inline std::string dataset_to_string(const std::vector<QAEInstance>& instances) {
  std::string out;
  for (const auto& inst : instances) {
    out += instance_to_json(inst).dump();
    out.push_back('\n');
  }
  return out;
}

inline void save_dataset(const std::filesystem::path& path,
                         const std::vector<QAEInstance>& instances) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset file: " + path.string());
  out << dataset_to_string(instances);
}

// Document collection on disk: directory of .txt files, blank-line-separated
// paragraphs, filename stem = document id.
inline DocumentCollection load_collection(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw DataError("corpus directory not found: " + dir.string());
  DocumentCollection coll;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
    std::ifstream in(entry.path());
    Document doc;
    doc.id = entry.path().stem().string();
    std::string line, para;
    auto flush = [&] {
      if (!para.empty()) {
        doc.paragraphs.push_back(para);
        para.clear();
      }
    };
    while (std::getline(in, line)) {
      if (line.empty()) {
        flush();
      } else {
        if (!para.empty()) para.push_back(' ');
        para += line;
      }
    }
    flush();
    coll.docs.push_back(std::move(doc));
  }
  coll.sort_by_id();
  return coll;
}

inline void save_collection(const std::filesystem::path& dir, const DocumentCollection& coll) {
  std::filesystem::create_directories(dir);
  for (const auto& doc : coll.docs) {
    std::ofstream out(dir / (doc.id + ".txt"), std::ios::binary);
    if (!out) throw DataError("cannot write document: " + doc.id);
    for (std::size_t i = 0; i < doc.paragraphs.size(); ++i) {
      if (i) out << "\n";
      out << doc.paragraphs[i] << "\n";
    }
  }
}

// --- vocabulary construction ---

inline Vocabulary build_vocabulary(const std::vector<QAEInstance>& instances,
                                   const DocumentCollection& docs, int min_count) {
  if (min_count < 1) throw UsageError("min_count must be >= 1");
  std::vector<std::string> order;  // first-seen order
  std::unordered_map<std::string, int> counts;
  auto feed = [&](const std::string& text) {
    for (auto& tok : tokenize(text)) {
      auto [it, inserted] = counts.emplace(tok, 0);
      if (inserted) order.push_back(tok);
      ++it->second;
    }
  };
  for (const auto& inst : instances) {
    feed(inst.question);
    feed(inst.answer);
    for (const auto& e : inst.evidence) feed(e);
    feed(inst.explanation);
  }
  for (const auto& doc : docs.docs)
    for (const auto& p : doc.paragraphs) feed(p);
  if (order.empty()) throw DataError("empty corpus: no tokens to build a vocabulary from");
  Vocabulary vocab;
  for (const auto& tok : order)
    if (counts[tok] >= min_count) vocab.add(tok);
  return vocab;
}

// Vocabulary on disk: one token per line in id order, reserved ids implicit.
inline void save_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocabulary file: " + path.string());
  for (int id = Vocabulary::kNumReserved; id < vocab.size(); ++id)
    out << vocab.id_to_token[id] << "\n";
}

inline Vocabulary load_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary file: " + path.string());
  Vocabulary vocab;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    vocab.add(line);
  }
  return vocab;
}

// --- synthetic planted-evidence corpus ---

struct SynthConfig {
  int num_entities = 50;
  int num_attributes = 5;
  int values_per_attribute = 30;
  int paragraphs_per_instance = 10;  // = k
  int filler_tokens_per_paragraph = 4;
  int filler_pool = 30;
  int train_size = 500;
  int val_size = 100;
  int test_size = 100;
  std::uint64_t seed = 7;

  void validate() const {
    if (paragraphs_per_instance < 1)
      throw UsageError("paragraphs_per_instance must be >= 1");
    if (train_size <= 0 || val_size <= 0 || test_size <= 0)
      throw UsageError("split sizes must be > 0");
    if (num_entities < 1 || num_attributes < 1 || values_per_attribute < 1)
      throw UsageError("entity/attribute/value pool sizes must be >= 1");
    if (paragraphs_per_instance > num_entities)
      throw UsageError("paragraphs_per_instance exceeds num_entities: cannot draw "
                       "enough distinct distractor entities");
  }
};

struct SynthResult {
  std::vector<QAEInstance> train, val, test;
  DocumentCollection collection;
};

namespace detail {

inline std::string synth_name(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%02d", prefix, i);
  return buf;
}

inline std::string join(const std::vector<std::string>& toks) {
  std::string out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) out.push_back(' ');
    out += toks[i];
  }
  return out;
}

}  // namespace detail

// Each instance describes a freshly sampled fact world. The question names an
// (entity, attribute) pair; the answer carries the base value plus the entity
// (it doubles as the retrieval query). The full value is a (base, mod, tag)
// token triple that appears only in the planted paragraph, so the gold
// explanation cannot be produced from the question and answer alone. The two
// evidence-only tokens play different roles: every paragraph carries a
// mod-pool token, so the right mod is only recoverable by weighting the
// planted paragraph, while the tag-pool token appears in no distractor at
// all, giving generation an unambiguous copy target even under uniform
// weights — the anchor that lets inference-time E-steps identify which
// paragraph supports the generated text.
inline SynthResult generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  SynthResult res;

  auto make_split = [&](const char* split_name, int n) {
    Rng rng = substream(cfg.seed, std::string("synth:") + split_name);
    std::vector<QAEInstance> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
      const int k = cfg.paragraphs_per_instance;
      const int ent = static_cast<int>(rng.below(cfg.num_entities));
      const int attr = static_cast<int>(rng.below(cfg.num_attributes));
      const int vbase = static_cast<int>(rng.below(cfg.values_per_attribute));
      const int vmod = static_cast<int>(rng.below(cfg.values_per_attribute));
      const int vtag = static_cast<int>(rng.below(cfg.values_per_attribute));
      const std::string entity = detail::synth_name("ent", ent);
      const std::string attribute = detail::synth_name("attr", attr);
      const std::string value_base = detail::synth_name("val", vbase);
      const std::string value_mod = detail::synth_name("mod", vmod);
      const std::string value_tag = detail::synth_name("tag", vtag);

      auto fillers = [&] {
        std::vector<std::string> f;
        for (int t = 0; t < cfg.filler_tokens_per_paragraph; ++t)
          f.push_back(detail::synth_name("filler", static_cast<int>(rng.below(cfg.filler_pool))));
        return f;
      };

      // Distinct distractor entities, none equal to the planted one.
      std::vector<int> others;
      for (int e = 0; e < cfg.num_entities; ++e)
        if (e != ent) others.push_back(e);
      rng.shuffle(others);
      others.resize(k - 1);

      const int planted = static_cast<int>(rng.below(k));
      QAEInstance inst;
      {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%s-%04d", split_name, i);
        inst.id = buf;
      }
      inst.question = "what is the " + attribute + " of " + entity;
      inst.answer = value_base + " " + entity;
      inst.explanation = "the " + attribute + " of " + entity + " is " + value_base + " " +
                         value_mod + " " + value_tag + " because the evidence states " +
                         entity + " " + attribute + " " + value_base + " " + value_mod + " " +
                         value_tag;
      inst.planted_index = planted;
      int next_other = 0;
      for (int p = 0; p < k; ++p) {
        std::vector<std::string> toks;
        if (p == planted) {
          toks = {entity, attribute, value_base, value_mod, value_tag};
        } else {
          const std::string oe = detail::synth_name("ent", others[next_other++]);
          const std::string oa = detail::synth_name("attr", static_cast<int>(rng.below(cfg.num_attributes)));
          const std::string ob = detail::synth_name("val", static_cast<int>(rng.below(cfg.values_per_attribute)));
          const std::string om = detail::synth_name("mod", static_cast<int>(rng.below(cfg.values_per_attribute)));
          toks = {oe, oa, ob, om};
        }
        for (auto& f : fillers()) toks.push_back(f);
        inst.evidence.push_back(detail::join(toks));
      }
      inst.validate();
      out.push_back(std::move(inst));
    }
    return out;
  };

  res.train = make_split("train", cfg.train_size);
  res.val = make_split("val", cfg.val_size);
  res.test = make_split("test", cfg.test_size);

  auto add_docs = [&](const std::vector<QAEInstance>& split) {
    for (const auto& inst : split)
      res.collection.docs.push_back(Document{inst.id, inst.evidence});
  };
  add_docs(res.train);
  add_docs(res.val);
  add_docs(res.test);
  res.collection.sort_by_id();
  return res;
}

}  // namespace emin
