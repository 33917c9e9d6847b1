#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "emin/backbone.hpp"
#include "emin/common.hpp"
#include "emin/model.hpp"
#include "emin/rng.hpp"

namespace emin {

enum class AttentionMode { kSeparated, kConcatenated };

inline const char* mode_name(AttentionMode m) {
  return m == AttentionMode::kSeparated ? "separated" : "concatenated";
}

struct CostInputs {
  std::int64_t m = 1;       // paragraphs
  std::int64_t n = 1;       // tokens per paragraph
  std::int64_t l_x = 1;     // question-answer tokens
  std::int64_t l_d = 1;     // decoder tokens
  std::int64_t layers = 1;
  std::int64_t em_iterations = 1;  // T, separated mode only

  void validate() const {
    if (m < 1 || n < 1 || l_x < 1 || l_d < 1 || layers < 1 || em_iterations < 1)
      throw UsageError("all cost-model sizes must be >= 1");
  }
};

struct CostBreakdown {
  CostInputs inputs;
  AttentionMode mode = AttentionMode::kSeparated;
  std::int64_t encoder_ops = 0;
  std::int64_t decoder_ops = 0;

  std::int64_t total() const { return encoder_ops + decoder_ops; }
};

// Attention score multiply-accumulate counts, exact integers from closed
// forms. Concatenated: one full-attention pass over the fused evidence.
// Separated: the evidence is encoded once; the decoder reruns T EM
// iterations, each costing m one-hot teacher-forcings plus one generation
// (m+1 decoder passes).
inline CostBreakdown count_attention_ops(const CostInputs& in, AttentionMode mode) {
  in.validate();
  CostBreakdown out;
  out.inputs = in;
  out.mode = mode;
  const std::int64_t mn = in.m * in.n;
  if (mode == AttentionMode::kConcatenated) {
    out.encoder_ops = (in.l_x + mn) * (in.l_x + mn) * in.layers;
    out.decoder_ops = in.l_d * (in.l_x + mn) * in.layers;
  } else {
    out.encoder_ops = (in.l_x * in.l_x + in.m * in.n * in.n) * in.layers;
    out.decoder_ops =
        (in.l_d * in.l_x + in.m * in.l_d * in.n) * in.layers * in.em_iterations * (in.m + 1);
  }
  return out;
}

struct BenchRow {
  AttentionMode mode = AttentionMode::kSeparated;
  int m = 0;
  int n = 0;
  std::int64_t analytic_ops = 0;
  double median_ms = 0.0;
};

namespace detail {

inline double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace detail

struct BenchConfig {
  int d_model = 32;
  int num_layers = 1;
  int num_heads = 1;
  int d_ff = 64;
  int vocab_size = 64;
  int l_x = 8;
  int l_d = 16;
  int repetitions = 3;
  std::uint64_t seed = 7;
};

// Empirical companion to the analytic counts: median wall-clock of a full
// forward pass (encode + one decoder pass) per mode. Single-threaded for
// timing stability.
inline std::vector<BenchRow> bench_wallclock(const BenchConfig& bc,
                                             const std::vector<std::pair<int, int>>& grid) {
  std::vector<BenchRow> rows;
  for (const auto& [m, n] : grid) {
    ModelConfig cfg;
    cfg.d_model = bc.d_model;
    cfg.num_layers = bc.num_layers;
    cfg.num_heads = bc.num_heads;
    cfg.d_ff = bc.d_ff;
    cfg.vocab_size = bc.vocab_size;
    cfg.max_len_x = bc.l_x;
    cfg.max_len_ev = m * n;  // fits the concatenated evidence too
    cfg.max_len_dec = bc.l_d;
    cfg.dropout = 0.0;
    std::vector<double> params = init_parameters(cfg, bc.seed);
    Backbone model(cfg, params);

    Rng rng = substream(bc.seed, "bench");
    auto tokens = [&](int len) {
      std::vector<int> t(len);
      for (int& x : t)
        x = Vocabulary::kNumReserved +
            static_cast<int>(rng.below(cfg.vocab_size - Vocabulary::kNumReserved));
      return t;
    };
    const std::vector<int> qa_toks = tokens(bc.l_x);
    std::vector<std::vector<int>> paras;
    for (int j = 0; j < m; ++j) paras.push_back(tokens(n));
    std::vector<int> concat_toks;
    for (const auto& p : paras) concat_toks.insert(concat_toks.end(), p.begin(), p.end());
    std::vector<int> dec_in(bc.l_d);
    dec_in[0] = Vocabulary::kBos;
    const auto body = tokens(bc.l_d - 1);
    std::copy(body.begin(), body.end(), dec_in.begin() + 1);

    for (AttentionMode mode : {AttentionMode::kSeparated, AttentionMode::kConcatenated}) {
      std::vector<double> times;
      for (int rep = 0; rep < bc.repetitions; ++rep) {
        const auto t0 = std::chrono::steady_clock::now();
        EncoderResult qa = model.encode(qa_toks, Branch::kQuestionAnswer);
        std::vector<EncoderResult> evs;
        std::vector<double> z;
        if (mode == AttentionMode::kSeparated) {
          for (const auto& p : paras) evs.push_back(model.encode(p, Branch::kEvidence));
          z.assign(m, 1.0 / m);
        } else {
          evs.push_back(model.encode(concat_toks, Branch::kEvidence));
          z.assign(1, 1.0);
        }
        Mat probs = model.decode_probs(qa, evs, z, dec_in);
        (void)probs;
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      }
      CostInputs ci;
      ci.m = m;
      ci.n = n;
      ci.l_x = bc.l_x;
      ci.l_d = bc.l_d;
      ci.layers = bc.num_layers;
      ci.em_iterations = 1;
      rows.push_back(BenchRow{mode, m, n, count_attention_ops(ci, mode).total(),
                              detail::median(times)});
    }
  }
  return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "mode,m,n,analytic_ops,median_ms\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%d,%lld,%.6f\n", mode_name(r.mode), r.m, r.n,
                  static_cast<long long>(r.analytic_ops), r.median_ms);
    out += buf;
  }
  return out;
}

}  // namespace emin
