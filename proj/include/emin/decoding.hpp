#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "emin/backbone.hpp"
#include "emin/common.hpp"
#include "emin/corpus.hpp"

namespace emin {

// A generated sequence with the per-position probability of every emitted
// token under the emitting model. When generation is cut off at max_len the
// closing EOS is forced and recorded with probability 1.
struct Generation {
  std::vector<int> tokens;          // BOS ... EOS
  std::vector<double> probs;        // one entry per token after BOS
  double log_prob = 0.0;
  int beam_width = 1;

  double normalized_score() const {
    return probs.empty() ? 0.0 : log_prob / static_cast<double>(probs.size());
  }
};

struct DecodingConfig {
  int beam_width = 5;
  int max_len = 128;  // emitted tokens before the forced EOS cutoff
  int vocab_size = 0;
};

namespace detail {

// PAD/BOS/UNK are never emitted; EOS competes normally.
inline bool emittable(int tok) {
  return tok != Vocabulary::kPad && tok != Vocabulary::kBos && tok != Vocabulary::kUnk;
}

struct Hypothesis {
  std::vector<int> tokens;
  std::vector<double> probs;
  double log_prob = 0.0;
  bool finished = false;

  double normalized() const {
    return probs.empty() ? 0.0 : log_prob / static_cast<double>(probs.size());
  }
};

inline bool better_final(const Hypothesis& a, const Hypothesis& b) {
  const double sa = a.normalized(), sb = b.normalized();
  if (sa != sb) return sa > sb;
  return a.tokens < b.tokens;  // deterministic tie-break by token ids
}

inline Hypothesis force_finish(Hypothesis h) {
  if (!h.finished) {
    h.tokens.push_back(Vocabulary::kEos);
    h.probs.push_back(1.0);
    h.finished = true;
  }
  return h;
}

inline Generation to_generation(const Hypothesis& h, int beam_width) {
  Generation g;
  g.tokens = h.tokens;
  g.probs = h.probs;
  g.log_prob = h.log_prob;
  g.beam_width = beam_width;
  return g;
}

}  // namespace detail

// Length-normalized beam search. step(prefix) must return the next-token
// probability distribution (size vocab_size) given the prefix (which starts
// with BOS). Ties break by token id, then by source beam order.
template <class StepFn>
Generation beam_search(StepFn&& step, const DecodingConfig& cfg) {
  if (cfg.beam_width < 1) throw UsageError("beam_width must be >= 1");
  if (cfg.max_len < 0) throw UsageError("max_len must be >= 0");
  using detail::Hypothesis;

  std::vector<Hypothesis> live(1);
  live[0].tokens = {Vocabulary::kBos};
  std::vector<Hypothesis> finished;

  for (int pos = 0; pos < cfg.max_len && !live.empty(); ++pos) {
    struct Cand {
      double log_prob;
      int token;
      int beam;
      double prob;
    };
    std::vector<Cand> cands;
    cands.reserve(live.size() * static_cast<std::size_t>(cfg.vocab_size));
    for (std::size_t b = 0; b < live.size(); ++b) {
      const std::vector<double> dist = step(live[b].tokens);
      if (static_cast<int>(dist.size()) != cfg.vocab_size)
        throw UsageError("step function returned a distribution of wrong size");
      for (int tok = 0; tok < cfg.vocab_size; ++tok) {
        if (!detail::emittable(tok)) continue;
        const double p = dist[tok];
        cands.push_back(Cand{live[b].log_prob + std::log(std::max(p, kProbFloor)), tok,
                             static_cast<int>(b), p});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (a.token != b.token) return a.token < b.token;
      return a.beam < b.beam;
    });
    if (static_cast<int>(cands.size()) > cfg.beam_width) cands.resize(cfg.beam_width);

    std::vector<Hypothesis> next;
    for (const Cand& c : cands) {
      Hypothesis h = live[c.beam];
      h.tokens.push_back(c.token);
      h.probs.push_back(c.prob);
      h.log_prob = c.log_prob;
      if (c.token == Vocabulary::kEos) {
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }
  for (const Hypothesis& h : live) finished.push_back(detail::force_finish(h));
  if (finished.empty()) {
    // max_len == 0: the [BOS, EOS] convention.
    Hypothesis root;
    root.tokens = {Vocabulary::kBos};
    finished.push_back(detail::force_finish(std::move(root)));
  }
  const Hypothesis* best = &finished[0];
  for (const Hypothesis& h : finished)
    if (detail::better_final(h, *best)) best = &h;
  return detail::to_generation(*best, cfg.beam_width);
}

// Greedy argmax decoding, implemented independently of beam_search so the two
// can cross-check each other.
template <class StepFn>
Generation greedy_generate(StepFn&& step, const DecodingConfig& cfg) {
  if (cfg.max_len < 0) throw UsageError("max_len must be >= 0");
  detail::Hypothesis h;
  h.tokens = {Vocabulary::kBos};
  for (int pos = 0; pos < cfg.max_len; ++pos) {
    const std::vector<double> dist = step(h.tokens);
    if (static_cast<int>(dist.size()) != cfg.vocab_size)
      throw UsageError("step function returned a distribution of wrong size");
    int best = -1;
    for (int tok = 0; tok < cfg.vocab_size; ++tok) {
      if (!detail::emittable(tok)) continue;
      if (best < 0 || dist[tok] > dist[best]) best = tok;
    }
    h.tokens.push_back(best);
    h.probs.push_back(dist[best]);
    h.log_prob += std::log(std::max(dist[best], kProbFloor));
    if (best == Vocabulary::kEos) {
      h.finished = true;
      break;
    }
  }
  h = detail::force_finish(std::move(h));
  return detail::to_generation(h, 1);
}

// Step function over the trained backbone for a fixed instance encoding and
// evidence weights.
inline auto backbone_step(const Backbone& model, const EncoderResult& qa,
                          const std::vector<EncoderResult>& evs,
                          const std::vector<double>& z) {
  return [&model, &qa, &evs, &z](const std::vector<int>& prefix) {
    Mat probs = model.decode_probs(qa, evs, z, prefix);
    const double* last = probs.row(probs.rows - 1);
    return std::vector<double>(last, last + probs.cols);
  };
}

}  // namespace emin
