#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "emin/common.hpp"
#include "emin/em.hpp"
#include "emin/metrics.hpp"
#include "emin/rng.hpp"

namespace emin {

// Atomic write: stage into a sibling temp file, then rename over the target,
// so readers never observe a half-written artifact.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write file: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// FNV-1a over a file's bytes; used for manifest checksums.
inline std::uint64_t file_checksum(const std::filesystem::path& path) {
  return fnv1a64(read_file(path));
}

// ---------------------------------------------------------------------------
// Report serialization
// ---------------------------------------------------------------------------

// One JSON line per EM iteration: iteration, lambda, mean_kl, m_loss, and the
// full per-instance z (c omitted from the JSONL to keep files small; it is
// available in-memory for tests).
inline std::string em_report_to_jsonl(const EMReport& rep, bool include_z = true) {
  std::string out;
  for (const auto& it : rep.iterations) {
    nlohmann::json j{{"iteration", it.iteration},
                     {"lambda", it.lambda},
                     {"mean_kl", it.mean_kl},
                     {"m_loss", it.m_loss}};
    if (include_z) j["z"] = it.z;
    out += j.dump();
    out += '\n';
  }
  nlohmann::json tail{{"termination", rep.termination},
                      {"iterations", rep.iterations.size()}};
  out += tail.dump();
  out += '\n';
  return out;
}

inline nlohmann::json infer_result_to_json(const std::string& instance_id,
                                           const InferResult& res, const std::string& text) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& it : res.trace)
    trace.push_back(nlohmann::json{{"iteration", it.iteration},
                                   {"lambda", it.lambda},
                                   {"kl", it.kl},
                                   {"z", it.z},
                                   {"c", it.c}});
  return nlohmann::json{{"id", instance_id},
                        {"explanation", text},
                        {"tokens", res.explanation.tokens},
                        {"log_prob", res.explanation.log_prob},
                        {"final_z", res.final_z},
                        {"termination", res.termination},
                        {"trace", trace}};
}

inline nlohmann::json metric_summary_to_json(const MetricSummary& s) {
  return nlohmann::json{{"mean", s.mean}, {"stddev", s.stddev}};
}

inline nlohmann::json metric_report_to_json(const MetricReport& rep) {
  return nlohmann::json{{"rouge1_f1", metric_summary_to_json(rep.rouge1)},
                        {"rouge2_f1", metric_summary_to_json(rep.rouge2)},
                        {"rougeL_f1", metric_summary_to_json(rep.rougeL)},
                        {"bleu4_corpus", rep.bleu4_corpus},
                        {"bleu4_sentence", metric_summary_to_json(rep.bleu4_sentence)},
                        {"instances", rep.per_instance_rouge1.size()}};
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

// Records what produced a set of artifacts: the command line, the effective
// config, the seed, and an FNV-1a checksum per artifact so reruns can be
// verified byte-for-byte.
struct Manifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::vector<std::filesystem::path> artifacts;
};

inline void write_manifest(const std::filesystem::path& dir, const Manifest& m) {
  nlohmann::json files = nlohmann::json::array();
  for (const auto& p : m.artifacts) {
    files.push_back(nlohmann::json{{"path", p.filename().string()},
                                   {"fnv1a64", file_checksum(p)}});
  }
  nlohmann::json j{{"command", m.command},
                   {"config", m.config},
                   {"seed", m.seed},
                   {"artifacts", files}};
  write_file_atomic(dir / "manifest.json", j.dump(2) + "\n");
}

}  // namespace emin
