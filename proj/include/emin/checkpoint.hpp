#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "emin/common.hpp"
#include "emin/model.hpp"

namespace emin {

// Versioned binary checkpoint; see docs/checkpoint_format.md for the byte
// layout. load(save(x)) is bit-exact.
struct Checkpoint {
  ModelConfig model;
  std::vector<double> params;
  std::vector<double> adam_m, adam_v;
  std::uint64_t adam_steps = 0;
  std::uint64_t seed = 0;
  std::uint32_t em_iteration = 0;
  std::string strategy = "emin";
};

namespace detail {

inline constexpr char kCheckpointMagic[4] = {'E', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"d_model", c.d_model},
                        {"num_layers", c.num_layers},
                        {"num_heads", c.num_heads},
                        {"d_ff", c.d_ff},
                        {"vocab_size", c.vocab_size},
                        {"max_len_x", c.max_len_x},
                        {"max_len_ev", c.max_len_ev},
                        {"max_len_dec", c.max_len_dec},
                        {"dropout", c.dropout}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.num_layers = j.at("num_layers").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_len_x = j.at("max_len_x").get<int>();
  c.max_len_ev = j.at("max_len_ev").get<int>();
  c.max_len_dec = j.at("max_len_dec").get<int>();
  c.dropout = j.at("dropout").get<double>();
  return c;
}

template <class T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_pod(std::istream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
}

inline void write_doubles(std::ostream& out, const std::vector<double>& v) {
  const std::uint64_t n = v.size();
  write_pod(out, n);
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
}

inline std::vector<double> read_doubles(std::istream& in) {
  std::uint64_t n = 0;
  read_pod(in, n);
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path.string());
  out.write(detail::kCheckpointMagic, 4);
  detail::write_pod(out, detail::kCheckpointVersion);
  nlohmann::json header;
  header["model"] = detail::model_config_to_json(ck.model);
  header["adam_steps"] = ck.adam_steps;
  header["seed"] = ck.seed;
  header["em_iteration"] = ck.em_iteration;
  header["strategy"] = ck.strategy;
  const std::string hs = header.dump();
  const std::uint64_t hlen = hs.size();
  detail::write_pod(out, hlen);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  detail::write_doubles(out, ck.params);
  detail::write_doubles(out, ck.adam_m);
  detail::write_doubles(out, ck.adam_v);
  if (!out) throw DataError("checkpoint write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, detail::kCheckpointMagic, 4) != 0)
    throw DataError("not a checkpoint file: " + path.string());
  std::uint32_t version = 0;
  detail::read_pod(in, version);
  if (version != detail::kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  std::uint64_t hlen = 0;
  detail::read_pod(in, hlen);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  nlohmann::json header = nlohmann::json::parse(hs);
  Checkpoint ck;
  ck.model = detail::model_config_from_json(header.at("model"));
  ck.adam_steps = header.at("adam_steps").get<std::uint64_t>();
  ck.seed = header.at("seed").get<std::uint64_t>();
  ck.em_iteration = header.at("em_iteration").get<std::uint32_t>();
  ck.strategy = header.value("strategy", "emin");
  ck.params = detail::read_doubles(in);
  ck.adam_m = detail::read_doubles(in);
  ck.adam_v = detail::read_doubles(in);
  if (!in) throw DataError("truncated checkpoint: " + path.string());
  if (ck.params.size() != param_count(ck.model))
    throw DataError("checkpoint parameter count does not match its model config");
  return ck;
}

}  // namespace emin
