#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "emin/backbone.hpp"
#include "emin/common.hpp"
#include "emin/model.hpp"
#include "emin/rng.hpp"

namespace emin {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

// Central-difference check of the analytic gradient. Relative error uses
// max(|analytic|, |numeric|, floor) as the denominator so near-zero
// coordinates are compared absolutely. stride > 1 samples every stride-th
// coordinate.
inline GradCheckResult gradient_check(const ModelConfig& cfg, std::vector<double>& params,
                                      const std::vector<TokenizedInstance>& batch,
                                      const std::vector<std::vector<double>>& z_batch,
                                      double h = 1e-5, std::size_t stride = 1,
                                      double floor = 1e-4) {
  std::vector<const TokenizedInstance*> bp;
  std::vector<const std::vector<double>*> zp;
  for (const auto& b : batch) bp.push_back(&b);
  for (const auto& z : z_batch) zp.push_back(&z);

  const LossGrad lg = loss_and_gradients(cfg, params, bp, zp, nullptr);
  GradCheckResult res;
  for (std::size_t i = 0; i < params.size(); i += stride) {
    const double saved = params[i];
    params[i] = saved + h;
    const double up = loss_forward(cfg, params, bp, zp);
    params[i] = saved - h;
    const double dn = loss_forward(cfg, params, bp, zp);
    params[i] = saved;
    const double numeric = (up - dn) / (2.0 * h);
    const double analytic = lg.grad[i];
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
    const double rel = std::fabs(analytic - numeric) / denom;
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_index = i;
      res.worst_analytic = analytic;
      res.worst_numeric = numeric;
    }
    ++res.checked;
  }
  return res;
}

// A small random instance for gradient checking: random qa/evidence/target
// token sequences over the non-reserved vocabulary.
inline TokenizedInstance random_check_instance(const ModelConfig& cfg, int k, int qa_len,
                                               int ev_len, int target_len, Rng& rng) {
  auto toks = [&](int len) {
    std::vector<int> t(len);
    for (int& x : t)
      x = Vocabulary::kNumReserved +
          static_cast<int>(rng.below(cfg.vocab_size - Vocabulary::kNumReserved));
    return t;
  };
  TokenizedInstance inst;
  inst.id = "gradcheck";
  inst.qa = toks(qa_len);
  for (int j = 0; j < k; ++j) inst.evidence.push_back(toks(ev_len));
  inst.target = toks(target_len);
  inst.target.push_back(Vocabulary::kEos);
  return inst;
}

}  // namespace emin
