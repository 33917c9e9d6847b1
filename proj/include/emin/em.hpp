#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "emin/backbone.hpp"
#include "emin/common.hpp"
#include "emin/decoding.hpp"
#include "emin/optimizer.hpp"

namespace emin {

enum class Strategy { kEmin, kMean, kSimi };

inline Strategy parse_strategy(const std::string& s) {
  if (s == "emin" || s == "EMIN") return Strategy::kEmin;
  if (s == "mean" || s == "MEAN") return Strategy::kMean;
  if (s == "simi" || s == "SIMI") return Strategy::kSimi;
  throw UsageError("unknown strategy: " + s);
}

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kEmin: return "emin";
    case Strategy::kMean: return "mean";
    case Strategy::kSimi: return "simi";
  }
  return "?";
}

struct EMConfig {
  int k = 10;             // selected evidence paragraphs
  double epsilon = 0.01;  // KL stopping threshold
  int t_max = 30;         // EM iteration cap (training)
  int min_iterations = 5; // KL stop is not consulted before this iteration
  int m_passes = 1;       // full passes over the training set per M-step
  Strategy strategy = Strategy::kEmin;
  double ce_floor = 1e-6;   // bounds c = 1/CE
  int infer_t_max = 10;     // EM iteration cap (inference)
  int beam_width = 5;
  int max_len = 128;        // generation length cap
  bool soft_reference = true;  // Eq.-7 soft weighting of the previous generation

  void validate() const {
    if (epsilon <= 0.0) throw UsageError("epsilon must be > 0");
    if (t_max < 0 || infer_t_max < 1) throw UsageError("invalid EM iteration caps");
    if (k < 1) throw UsageError("k must be >= 1");
    if (m_passes < 0 || beam_width < 1 || max_len < 0) throw UsageError("invalid EM config");
    if (ce_floor <= 0.0) throw UsageError("ce_floor must be > 0");
  }
};

// Temperature decay: lambda = exp(-0.01 * iteration).
inline double temperature(int iteration) {
  if (iteration < 0) throw UsageError("iteration must be >= 0");
  return std::exp(-0.01 * iteration);
}

// KL(p || q) in nats with q floored at 1e-12 and 0*ln(0/q) = 0.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw UsageError("KL divergence length mismatch");
  double kl = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] <= 0.0) continue;
    kl += p[j] * std::log(p[j] / std::max(q[j], 1e-12));
  }
  return kl;
}

namespace detail {

inline std::vector<double> softmax_with_temperature(const std::vector<double>& c, double lambda) {
  double mx = c[0];
  for (double v : c) mx = std::max(mx, v);
  std::vector<double> z(c.size());
  double sum = 0.0;
  for (std::size_t j = 0; j < c.size(); ++j) {
    z[j] = std::exp((c[j] - mx) / lambda);
    sum += z[j];
  }
  for (double& v : z) v /= sum;
  return z;
}

inline std::vector<double> uniform_simplex(int k) {
  return std::vector<double>(k, 1.0 / static_cast<double>(k));
}

inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const int t = std::min<std::size_t>(threads, n);
  std::vector<std::thread> pool;
  std::atomic_size_t next{0};
  for (int w = 0; w < t; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

struct EStepResult {
  std::vector<double> z;  // simplex over evidence paragraphs
  std::vector<double> c;  // inverse cross-entropies
};

// Training E-step: teacher-force the ground-truth explanation with z one-hot
// on each paragraph in turn; CE_j is the mean per-token cross entropy (so c
// is invariant to the target length), c_j = 1 / max(CE_j, ce_floor), and
// z = softmax(c/λ). Ctx must provide k() and teacher_forced_probs(j, target).
template <class Ctx>
EStepResult e_step_train(const Ctx& ctx, std::span<const int> target, double lambda,
                         double ce_floor = 1e-6) {
  const int k = ctx.k();
  EStepResult out;
  out.c.resize(k);
  for (int j = 0; j < k; ++j) {
    const std::vector<double> probs = ctx.teacher_forced_probs(j, target);
    double ce = 0.0;
    for (double p : probs) ce -= std::log(std::max(p, kProbFloor));
    if (!probs.empty()) ce /= static_cast<double>(probs.size());
    out.c[j] = 1.0 / std::max(ce, ce_floor);
  }
  out.z = detail::softmax_with_temperature(out.c, lambda);
  return out;
}

// Inference E-step: the reference sequence is the previous global generation;
// its recorded per-position probabilities weight the cross entropy (the soft
// reading of the update), normalized to a weighted per-token mean. one-hot
// variant: weights identically 1 (plain mean, as in the training E-step).
template <class Ctx>
EStepResult e_step_infer(const Ctx& ctx, const Generation& prev, double lambda,
                         double ce_floor = 1e-6, bool soft_reference = true) {
  if (prev.tokens.size() < 2) throw UsageError("previous generation is empty");
  const std::vector<int> target(prev.tokens.begin() + 1, prev.tokens.end());
  const int k = ctx.k();
  EStepResult out;
  out.c.resize(k);
  for (int j = 0; j < k; ++j) {
    const std::vector<double> probs = ctx.teacher_forced_probs(j, target);
    double ce = 0.0, wsum = 0.0;
    for (std::size_t m = 0; m < probs.size(); ++m) {
      const double w = soft_reference ? prev.probs[m] : 1.0;
      ce -= w * std::log(std::max(probs[m], kProbFloor));
      wsum += w;
    }
    if (wsum > 0.0) ce /= wsum;
    out.c[j] = 1.0 / std::max(ce, ce_floor);
  }
  out.z = detail::softmax_with_temperature(out.c, lambda);
  return out;
}

// Encodes an instance once and answers teacher-forcing / generation queries
// against it. Read-only over the parameters.
class InstanceContext {
 public:
  InstanceContext(const Backbone& model, const TokenizedInstance& inst)
      : model_(&model), inst_(&inst) {
    if (inst.evidence.empty()) throw DataError("instance has no evidence: " + inst.id);
    qa_ = model.encode(inst.qa, Branch::kQuestionAnswer);
    for (const auto& e : inst.evidence) evs_.push_back(model.encode(e, Branch::kEvidence));
  }

  int k() const { return static_cast<int>(evs_.size()); }
  const EncoderResult& qa() const { return qa_; }
  const std::vector<EncoderResult>& evidence() const { return evs_; }
  const TokenizedInstance& instance() const { return *inst_; }

  std::vector<double> teacher_forced_probs(int j, std::span<const int> target) const {
    std::vector<double> z(evs_.size(), 0.0);
    z[j] = 1.0;
    return model_->decode_teacher_forced(qa_, evs_, z, target).target_probs;
  }

  Generation generate(const std::vector<double>& z, int beam_width, int max_len) const {
    DecodingConfig cfg;
    cfg.beam_width = beam_width;
    cfg.max_len = std::min(max_len, model_->config().max_len_dec - 1);
    cfg.vocab_size = model_->config().vocab_size;
    return beam_search(backbone_step(*model_, qa_, evs_, z), cfg);
  }

 private:
  const Backbone* model_;
  const TokenizedInstance* inst_;
  EncoderResult qa_;
  std::vector<EncoderResult> evs_;
};

// SIMI baseline weights: softmax over dot products of mean-pooled final-layer
// encoder features.
inline std::vector<double> simi_weights(const InstanceContext& ctx) {
  auto pool = [](const EncoderResult& r) {
    const Mat& top = r.layer_out.back();
    std::vector<double> v(top.cols, 0.0);
    for (int i = 0; i < top.rows; ++i)
      for (int j = 0; j < top.cols; ++j) v[j] += top(i, j);
    for (double& x : v) x /= top.rows;
    return v;
  };
  const std::vector<double> q = pool(ctx.qa());
  std::vector<double> dots(ctx.k());
  for (int j = 0; j < ctx.k(); ++j) {
    const std::vector<double> e = pool(ctx.evidence()[j]);
    dots[j] = std::inner_product(q.begin(), q.end(), e.begin(), 0.0);
  }
  return detail::softmax_with_temperature(dots, 1.0);
}

// ---------------------------------------------------------------------------
// M-step and the training loop
// ---------------------------------------------------------------------------

// `passes` full passes of mini-batch AdamW steps under fixed z. Returns the
// token-weighted mean per-token loss of the final pass (0 when passes == 0).
inline double m_step(const ModelConfig& cfg, std::vector<double>& params, AdamW& opt,
                     const LinearSchedule& sched, const std::vector<TokenizedInstance>& data,
                     const std::vector<std::vector<double>>& z_all, int passes, int batch_size,
                     Rng& batch_rng, Rng* drop_rng) {
  if (data.empty()) throw UsageError("empty dataset in M-step");
  if (data.size() != z_all.size()) throw UsageError("dataset/z_all size mismatch");
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  double last_pass_loss = 0.0;
  for (int pass = 0; pass < passes; ++pass) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    batch_rng.shuffle(order);
    double loss_weighted = 0.0;
    std::size_t tokens_total = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      std::vector<const TokenizedInstance*> batch;
      std::vector<const std::vector<double>*> zs;
      std::size_t batch_tokens = 0;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&data[order[i]]);
        zs.push_back(&z_all[order[i]]);
        batch_tokens += data[order[i]].target.size();
      }
      LossGrad lg = loss_and_gradients(cfg, params, batch, zs, drop_rng);
      opt.step(params, lg.grad, sched.at(opt.step_count()));
      loss_weighted += lg.loss * static_cast<double>(batch_tokens);
      tokens_total += batch_tokens;
    }
    last_pass_loss = loss_weighted / static_cast<double>(tokens_total);
  }
  return last_pass_loss;
}

struct EMIterationRecord {
  int iteration = 0;
  double lambda = 0.0;
  double mean_kl = 0.0;
  double m_loss = 0.0;
  std::vector<std::vector<double>> z;
  std::vector<std::vector<double>> c;
};

struct EMReport {
  std::vector<EMIterationRecord> iterations;
  std::string termination;  // "converged" | "t_max"
};

struct TrainConfig {
  ModelConfig model;
  EMConfig em;
  AdamWConfig opt;
  int batch_size = 16;
  int threads = 0;  // 0: hardware concurrency (E-step only)
  std::uint64_t seed = 7;
};

struct TrainResult {
  std::vector<double> params;
  EMReport report;
  std::vector<double> adam_m, adam_v;
  std::size_t adam_steps = 0;
  int em_iterations = 0;
  std::vector<std::string> warnings;
};

// EM training. The KL stopping rule applies to the EMIN strategy only: MEAN
// keeps z fixed and SIMI derives z from the parameters, so consecutive-z KL
// is not a meaningful convergence signal for them and they run for the full
// t_max iterations (a fixed training budget, like the paper's baselines).
inline TrainResult train(const std::vector<QAEInstance>& data, const Vocabulary& vocab,
                         const TrainConfig& cfg_in) {
  if (data.empty()) throw DataError("empty training set");
  TrainConfig cfg = cfg_in;
  if (cfg.model.vocab_size == 0) cfg.model.vocab_size = vocab.size();
  cfg.model.validate();
  cfg.em.validate();

  TrainResult res;
  std::vector<TokenizedInstance> tok;
  for (const auto& inst : data) {
    if (inst.explanation.empty())
      throw DataError("training instance lacks an explanation: " + inst.id);
    if (inst.evidence.empty())
      throw DataError("training instance lacks evidence: " + inst.id);
    tok.push_back(tokenize_instance(inst, vocab, cfg.model, &res.warnings));
  }

  res.params = init_parameters(cfg.model, cfg.seed);
  AdamW opt(res.params.size(), cfg.opt);
  const std::size_t steps_per_pass = (tok.size() + cfg.batch_size - 1) / cfg.batch_size;
  LinearSchedule sched{cfg.opt.lr,
                       std::max<std::size_t>(1, static_cast<std::size_t>(cfg.em.t_max) *
                                                    cfg.em.m_passes * steps_per_pass)};
  Rng batch_rng = substream(cfg.seed, "batch");
  Rng drop_rng = substream(cfg.seed, "dropout");

  std::vector<std::vector<double>> z_all;
  for (const auto& t : tok)
    z_all.push_back(detail::uniform_simplex(static_cast<int>(t.evidence.size())));

  const int threads =
      cfg.threads > 0 ? cfg.threads
                      : std::max(1u, std::thread::hardware_concurrency());

  res.report.termination = "t_max";
  bool weights_moved = false;  // guards against declaring convergence before z ever leaves uniform
  for (int t = 1; t <= cfg.em.t_max; ++t) {
    const double lambda = temperature(t);
    EMIterationRecord rec;
    rec.iteration = t;
    rec.lambda = lambda;

    Backbone model(cfg.model, res.params);
    double kl_sum = 0.0;
    rec.c.assign(tok.size(), {});
    if (cfg.em.strategy == Strategy::kEmin) {
      std::vector<double> kls(tok.size(), 0.0);
      detail::parallel_for(tok.size(), threads, [&](std::size_t i) {
        InstanceContext ctx(model, tok[i]);
        EStepResult e = e_step_train(ctx, tok[i].target, lambda, cfg.em.ce_floor);
        kls[i] = kl_divergence(e.z, z_all[i]);
        z_all[i] = std::move(e.z);
        rec.c[i] = std::move(e.c);
      });
      kl_sum = std::accumulate(kls.begin(), kls.end(), 0.0);
    } else if (cfg.em.strategy == Strategy::kSimi) {
      std::vector<double> kls(tok.size(), 0.0);
      detail::parallel_for(tok.size(), threads, [&](std::size_t i) {
        InstanceContext ctx(model, tok[i]);
        std::vector<double> z = simi_weights(ctx);
        kls[i] = kl_divergence(z, z_all[i]);
        z_all[i] = std::move(z);
      });
      kl_sum = std::accumulate(kls.begin(), kls.end(), 0.0);
    }
    rec.mean_kl = kl_sum / static_cast<double>(tok.size());
    const double rec_kl = rec.mean_kl;

    rec.m_loss = m_step(cfg.model, res.params, opt, sched, tok, z_all, cfg.em.m_passes,
                        cfg.batch_size, batch_rng, cfg.model.dropout > 0.0 ? &drop_rng : nullptr);
    rec.z = z_all;
    res.report.iterations.push_back(std::move(rec));
    res.em_iterations = t;

    if (rec_kl >= cfg.em.epsilon) weights_moved = true;
    if (cfg.em.strategy == Strategy::kEmin && t >= cfg.em.min_iterations && weights_moved &&
        rec_kl < cfg.em.epsilon) {
      res.report.termination = "converged";
      break;
    }
  }

  res.adam_m = opt.moment1();
  res.adam_v = opt.moment2();
  res.adam_steps = opt.step_count();
  return res;
}

// ---------------------------------------------------------------------------
// Inference-time EM
// ---------------------------------------------------------------------------

struct InferIteration {
  int iteration = 0;
  double lambda = 0.0;
  double kl = 0.0;
  std::vector<double> z;
  std::vector<double> c;
};

struct InferResult {
  Generation explanation;
  std::vector<InferIteration> trace;
  std::vector<double> final_z;
  std::string termination;  // "converged" | "t_max"
};

// EM over evidence weights at test time: alternate global generation under
// the current z with the inference E-step until the z update's KL falls
// below epsilon. The temperature schedule restarts at iteration 1.
inline InferResult infer(const Backbone& model, const TokenizedInstance& inst,
                         const EMConfig& em) {
  em.validate();
  InstanceContext ctx(model, inst);
  InferResult res;
  std::vector<double> z = detail::uniform_simplex(ctx.k());
  res.termination = "t_max";
  for (int t = 1; t <= em.infer_t_max; ++t) {
    Generation gen = ctx.generate(z, em.beam_width, em.max_len);
    if (t == em.infer_t_max) {
      res.explanation = std::move(gen);
      break;
    }
    EStepResult e = e_step_infer(ctx, gen, temperature(t), em.ce_floor, em.soft_reference);
    const double klv = kl_divergence(e.z, z);
    res.trace.push_back(InferIteration{t, temperature(t), klv, e.z, e.c});
    z = std::move(e.z);
    if (klv < em.epsilon) {
      res.explanation = ctx.generate(z, em.beam_width, em.max_len);
      res.termination = "converged";
      break;
    }
  }
  res.final_z = z;
  return res;
}

// Baseline-weighted generation: MEAN uses uniform z, SIMI its softmax dot
// weights; both generate once (no EM loop).
inline InferResult infer_with_strategy(const Backbone& model, const TokenizedInstance& inst,
                                       const EMConfig& em) {
  if (em.strategy == Strategy::kEmin) return infer(model, inst, em);
  InstanceContext ctx(model, inst);
  InferResult res;
  std::vector<double> z = em.strategy == Strategy::kMean ? detail::uniform_simplex(ctx.k())
                                                         : simi_weights(ctx);
  res.explanation = ctx.generate(z, em.beam_width, em.max_len);
  res.final_z = std::move(z);
  res.termination = "fixed";
  return res;
}

}  // namespace emin
