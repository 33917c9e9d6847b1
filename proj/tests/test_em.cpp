#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "emin/backbone.hpp"
#include "emin/em.hpp"
#include "emin/model.hpp"
#include "emin/rng.hpp"

using emin::EMConfig;
using emin::EStepResult;
using emin::Generation;
using emin::Strategy;
using emin::TokenizedInstance;
using emin::Vocabulary;

namespace {

// A rigged E-step context: teacher-forced probabilities are specified per
// paragraph directly, bypassing any model.
struct RiggedCtx {
  std::vector<std::vector<double>> per_paragraph;  // [j][m]

  int k() const { return static_cast<int>(per_paragraph.size()); }
  std::vector<double> teacher_forced_probs(int j, std::span<const int> target) const {
    REQUIRE(target.size() == per_paragraph[j].size());
    return per_paragraph[j];
  }
};

emin::ModelConfig small_config(int vocab) {
  emin::ModelConfig cfg;
  cfg.d_model = 8;
  cfg.num_layers = 1;
  cfg.num_heads = 1;
  cfg.d_ff = 16;
  cfg.vocab_size = vocab;
  cfg.max_len_x = 16;
  cfg.max_len_ev = 16;
  cfg.max_len_dec = 16;
  cfg.dropout = 0.0;
  return cfg;
}

TokenizedInstance small_instance() {
  TokenizedInstance t;
  t.id = "i";
  t.qa = {4, 5};
  t.evidence = {{6, 7}, {8, 9}};
  t.target = {5, 6, Vocabulary::kEos};
  return t;
}

}  // namespace

TEST_CASE("temperature schedule") {
  CHECK(emin::temperature(0) == doctest::Approx(1.0));
  CHECK(emin::temperature(100) == doctest::Approx(0.36788).epsilon(1e-5));
  for (int t = 0; t < 50; ++t) CHECK(emin::temperature(t + 1) < emin::temperature(t));
  CHECK_THROWS_AS(emin::temperature(-1), emin::UsageError);
}

TEST_CASE("kl divergence hand values and positivity") {
  const std::vector<double> u = {0.5, 0.5};
  CHECK(emin::kl_divergence(u, u) == doctest::Approx(0.0));
  // [0.75, 0.25] vs [0.5, 0.5] -> 0.75 ln 1.5 + 0.25 ln 0.5 = 0.13081...
  const std::vector<double> p = {0.75, 0.25};
  CHECK(emin::kl_divergence(p, u) == doctest::Approx(0.13081).epsilon(1e-4));
  CHECK(emin::kl_divergence(p, u) ==
        doctest::Approx(0.75 * std::log(1.5) + 0.25 * std::log(0.5)).epsilon(1e-12));
  // zero entries contribute nothing
  CHECK(emin::kl_divergence(std::vector<double>{1.0, 0.0}, std::vector<double>{1.0, 0.0}) ==
        doctest::Approx(0.0));
  CHECK_THROWS_AS(emin::kl_divergence(p, std::vector<double>{1.0}), emin::UsageError);

  emin::Rng rng(31);
  for (int it = 0; it < 1000; ++it) {
    std::vector<double> a(3), b(3);
    double sa = 0.0, sb = 0.0;
    for (int j = 0; j < 3; ++j) {
      a[j] = rng.uniform() + 1e-6;
      b[j] = rng.uniform() + 1e-6;
      sa += a[j];
      sb += b[j];
    }
    for (int j = 0; j < 3; ++j) {
      a[j] /= sa;
      b[j] /= sb;
    }
    CHECK(emin::kl_divergence(a, b) >= -1e-12);
  }
}

TEST_CASE("softmax with temperature hand value") {
  // c = [2, 1], lambda = 1 -> [0.7311, 0.2689]
  const auto z = emin::detail::softmax_with_temperature({2.0, 1.0}, 1.0);
  CHECK(z[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(z[1] == doctest::Approx(0.2689).epsilon(1e-4));
  CHECK(z[0] + z[1] == doctest::Approx(1.0));
}

TEST_CASE("training e-step on a rigged context") {
  // paragraph 0 predicts the target perfectly; paragraph 1 is uniform over a
  // 12-token vocabulary.
  RiggedCtx ctx;
  ctx.per_paragraph = {{1.0, 1.0, 1.0}, {1.0 / 12, 1.0 / 12, 1.0 / 12}};
  const std::vector<int> target = {5, 6, Vocabulary::kEos};

  const EStepResult e = emin::e_step_train(ctx, target, 1.0, 1e-6);
  // mean CE_0 = 0 floored at 1e-6 -> c_0 = 1e6; mean CE_1 = ln 12
  CHECK(e.c[0] == doctest::Approx(1e6));
  CHECK(e.c[1] == doctest::Approx(1.0 / std::log(12.0)).epsilon(1e-12));
  CHECK(e.z[0] > 0.999999);
  CHECK(e.z[0] + e.z[1] == doctest::Approx(1.0));

  // identical paragraphs -> exactly uniform z
  RiggedCtx sym;
  sym.per_paragraph = {{0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}};
  const EStepResult es = emin::e_step_train(sym, target, 0.7, 1e-6);
  for (double zj : es.z) CHECK(zj == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("e-step monotone link and temperature sharpening") {
  emin::Rng rng(41);
  for (int it = 0; it < 50; ++it) {
    std::vector<double> c(4);
    for (double& x : c) x = rng.uniform() * 3.0 + 0.1;
    const auto z = emin::detail::softmax_with_temperature(c, 0.8);
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b)
        if (c[a] > c[b]) CHECK(z[a] > z[b]);  // lower CE -> higher c -> higher z
  }

  const std::vector<double> c = {1.3, 0.9, 0.4};
  double prev_max = 0.0;
  for (double lambda : {2.0, 1.0, 0.5, 0.25, 0.1, 0.05}) {
    const auto z = emin::detail::softmax_with_temperature(c, lambda);
    const double mx = *std::max_element(z.begin(), z.end());
    CHECK(mx >= prev_max - 1e-12);
    prev_max = mx;
  }
  CHECK(prev_max > 1.0 - 1e-3);  // max z -> 1 as lambda -> small
}

TEST_CASE("inference e-step: soft weights and the degenerate one-hot reading") {
  RiggedCtx ctx;
  ctx.per_paragraph = {{0.9, 0.8}, {0.2, 0.3}};
  Generation prev;
  prev.tokens = {Vocabulary::kBos, 5, Vocabulary::kEos};
  prev.probs = {0.6, 0.7};

  const EStepResult soft = emin::e_step_infer(ctx, prev, 1.0, 1e-6, true);
  // weighted per-token mean cross entropies
  const double ce0 = -(0.6 * std::log(0.9) + 0.7 * std::log(0.8)) / (0.6 + 0.7);
  const double ce1 = -(0.6 * std::log(0.2) + 0.7 * std::log(0.3)) / (0.6 + 0.7);
  CHECK(soft.c[0] == doctest::Approx(1.0 / ce0).epsilon(1e-12));
  CHECK(soft.c[1] == doctest::Approx(1.0 / ce1).epsilon(1e-12));
  CHECK(soft.z[0] > soft.z[1]);

  // P_global == 1 everywhere degenerates to the training-style inverse CE
  Generation det = prev;
  det.probs = {1.0, 1.0};
  const EStepResult hard = emin::e_step_infer(ctx, det, 1.0, 1e-6, true);
  const EStepResult train_style =
      emin::e_step_train(ctx, std::vector<int>{5, Vocabulary::kEos}, 1.0, 1e-6);
  CHECK(hard.c[0] == doctest::Approx(train_style.c[0]).epsilon(1e-12));
  CHECK(hard.c[1] == doctest::Approx(train_style.c[1]).epsilon(1e-12));

  // soft_reference=false ignores the recorded probabilities
  const EStepResult flag = emin::e_step_infer(ctx, prev, 1.0, 1e-6, false);
  CHECK(flag.c[0] == doctest::Approx(train_style.c[0]).epsilon(1e-12));
}

TEST_CASE("instance context consistency: one-hot e-step equals direct teacher forcing") {
  const emin::ModelConfig cfg = small_config(12);
  std::vector<double> params = emin::init_parameters(cfg, 19);
  emin::Backbone model(cfg, params);
  const TokenizedInstance inst = small_instance();
  const emin::InstanceContext ctx(model, inst);
  REQUIRE(ctx.k() == 2);

  for (int j = 0; j < 2; ++j) {
    const auto via_ctx = ctx.teacher_forced_probs(j, inst.target);
    std::vector<double> z(2, 0.0);
    z[j] = 1.0;
    const auto direct =
        model.decode_teacher_forced(ctx.qa(), ctx.evidence(), z, inst.target).target_probs;
    REQUIRE(via_ctx.size() == direct.size());
    for (std::size_t m = 0; m < direct.size(); ++m)
      CHECK(via_ctx[m] == doctest::Approx(direct[m]).epsilon(1e-12));
  }
}

TEST_CASE("simi weights: hand softmax and symmetry") {
  // hand case: dot products [1, 0] -> [0.7311, 0.2689]
  const auto z = emin::detail::softmax_with_temperature({1.0, 0.0}, 1.0);
  CHECK(z[0] == doctest::Approx(0.7311).epsilon(1e-4));

  // identical paragraphs -> uniform weights under any model
  const emin::ModelConfig cfg = small_config(12);
  std::vector<double> params = emin::init_parameters(cfg, 23);
  emin::Backbone model(cfg, params);
  TokenizedInstance inst = small_instance();
  inst.evidence = {{6, 7}, {6, 7}, {6, 7}};
  const emin::InstanceContext ctx(model, inst);
  const auto w = emin::simi_weights(ctx);
  REQUIRE(w.size() == 3);
  for (double wj : w) CHECK(wj == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  // a paragraph repeating the question-answer tokens outranks random text
  TokenizedInstance inst2 = small_instance();
  inst2.evidence = {{4, 5}, {10, 11}};
  const emin::InstanceContext ctx2(model, inst2);
  const auto w2 = emin::simi_weights(ctx2);
  CHECK(w2[0] + w2[1] == doctest::Approx(1.0));
}

TEST_CASE("m_step: zero passes is the identity; one pass reduces the loss") {
  const emin::ModelConfig cfg = small_config(12);
  std::vector<double> params = emin::init_parameters(cfg, 29);
  const std::vector<double> before = params;

  std::vector<TokenizedInstance> data;
  emin::Rng rng(101);
  for (int i = 0; i < 10; ++i) {
    TokenizedInstance t;
    t.id = "d" + std::to_string(i);
    t.qa = {4, static_cast<int>(4 + rng.below(8))};
    t.evidence = {{static_cast<int>(4 + rng.below(8)), 5}, {6, static_cast<int>(4 + rng.below(8))}};
    t.target = {static_cast<int>(4 + rng.below(8)), 5, Vocabulary::kEos};
    data.push_back(t);
  }
  std::vector<std::vector<double>> z(10, {0.5, 0.5});

  emin::AdamW opt(params.size(), emin::AdamWConfig{});
  const emin::LinearSchedule sched{1e-3, 1000};
  emin::Rng batch_rng(1);

  const double l0 = emin::m_step(cfg, params, opt, sched, data, z, 0, 4, batch_rng, nullptr);
  CHECK(l0 == 0.0);
  CHECK(params == before);

  // measure the loss, take one pass, measure again
  std::vector<const TokenizedInstance*> bp;
  std::vector<const std::vector<double>*> zp;
  for (int i = 0; i < 10; ++i) {
    bp.push_back(&data[i]);
    zp.push_back(&z[i]);
  }
  const double loss_before = emin::loss_forward(cfg, params, bp, zp);
  emin::m_step(cfg, params, opt, sched, data, z, 1, 4, batch_rng, nullptr);
  const double loss_after = emin::loss_forward(cfg, params, bp, zp);
  CHECK(loss_after <= loss_before * 1.05);  // 5% slack for stochastic batching
  CHECK(params != before);
}

TEST_CASE("training records: MEAN keeps z uniform; lambda trace is exact") {
  emin::SynthConfig scfg;
  scfg.train_size = 8;
  scfg.val_size = 1;
  scfg.test_size = 1;
  scfg.paragraphs_per_instance = 2;
  scfg.num_entities = 6;
  scfg.filler_tokens_per_paragraph = 1;
  const auto synth = emin::generate_synthetic(scfg);
  const emin::Vocabulary vocab = emin::build_vocabulary(synth.train, {}, 1);

  emin::TrainConfig tcfg;
  tcfg.model = small_config(0);
  tcfg.model.max_len_x = 32;
  tcfg.model.max_len_ev = 32;
  tcfg.model.max_len_dec = 32;
  tcfg.em.t_max = 3;
  tcfg.em.strategy = Strategy::kMean;
  tcfg.batch_size = 4;
  tcfg.threads = 1;

  const emin::TrainResult mean = emin::train(synth.train, vocab, tcfg);
  REQUIRE(mean.report.iterations.size() == 3);
  for (std::size_t t = 0; t < 3; ++t) {
    const auto& rec = mean.report.iterations[t];
    CHECK(rec.lambda == doctest::Approx(std::exp(-0.01 * (t + 1))).epsilon(1e-15));
    for (const auto& zi : rec.z)
      for (double zj : zi) CHECK(zj == 0.5);  // exactly uniform, k=2
  }
  CHECK(mean.report.termination == "t_max");

  // EMIN on the same data: every recorded z is a valid simplex vector
  tcfg.em.strategy = Strategy::kEmin;
  const emin::TrainResult em = emin::train(synth.train, vocab, tcfg);
  for (const auto& rec : em.report.iterations) {
    for (const auto& zi : rec.z) {
      double s = 0.0;
      for (double zj : zi) {
        CHECK(zj >= 0.0);
        s += zj;
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  // determinism: same config and seed reproduce the parameters exactly
  const emin::TrainResult em2 = emin::train(synth.train, vocab, tcfg);
  CHECK(em.params == em2.params);
}

TEST_CASE("mean training is bit-identical to the m_step loop it abbreviates") {
  emin::SynthConfig scfg;
  scfg.train_size = 6;
  scfg.val_size = 1;
  scfg.test_size = 1;
  scfg.paragraphs_per_instance = 2;
  scfg.num_entities = 6;
  scfg.filler_tokens_per_paragraph = 1;
  const auto synth = emin::generate_synthetic(scfg);
  const emin::Vocabulary vocab = emin::build_vocabulary(synth.train, {}, 1);

  emin::TrainConfig tcfg;
  tcfg.model = small_config(0);
  tcfg.model.max_len_x = 32;
  tcfg.model.max_len_ev = 32;
  tcfg.model.max_len_dec = 32;
  tcfg.model.dropout = 0.1;
  tcfg.em.t_max = 2;
  tcfg.em.strategy = Strategy::kMean;
  tcfg.batch_size = 4;
  tcfg.threads = 1;
  const emin::TrainResult mean = emin::train(synth.train, vocab, tcfg);

  // hand loop: same init, uniform z, identical substreams and schedule
  emin::ModelConfig mcfg = tcfg.model;
  mcfg.vocab_size = vocab.size();
  std::vector<double> params = emin::init_parameters(mcfg, tcfg.seed);
  std::vector<TokenizedInstance> tok;
  for (const auto& inst : synth.train) tok.push_back(emin::tokenize_instance(inst, vocab, mcfg));
  std::vector<std::vector<double>> z(tok.size(), {0.5, 0.5});
  emin::AdamW opt(params.size(), tcfg.opt);
  const std::size_t steps_per_pass = (tok.size() + tcfg.batch_size - 1) / tcfg.batch_size;
  const emin::LinearSchedule sched{tcfg.opt.lr, 2 * steps_per_pass};
  emin::Rng batch_rng = emin::substream(tcfg.seed, "batch");
  emin::Rng drop_rng = emin::substream(tcfg.seed, "dropout");
  for (int t = 1; t <= 2; ++t)
    emin::m_step(mcfg, params, opt, sched, tok, z, 1, tcfg.batch_size, batch_rng, &drop_rng);

  CHECK(mean.params == params);  // bit-identical
}

TEST_CASE("inference loop: k=1 converges in one iteration with z=[1.0]") {
  const emin::ModelConfig cfg = small_config(12);
  std::vector<double> params = emin::init_parameters(cfg, 37);
  emin::Backbone model(cfg, params);
  TokenizedInstance inst = small_instance();
  inst.evidence = {{6, 7}};

  EMConfig em;
  em.k = 1;
  em.beam_width = 2;
  em.max_len = 8;
  const emin::InferResult res = emin::infer(model, inst, em);
  REQUIRE(res.final_z.size() == 1);
  CHECK(res.final_z[0] == 1.0);
  CHECK(res.trace.size() == 1);  // exactly one EM iteration
  CHECK(res.trace[0].kl == doctest::Approx(0.0));
  CHECK(res.termination == "converged");
  CHECK(res.explanation.tokens.front() == Vocabulary::kBos);
  CHECK(res.explanation.tokens.back() == Vocabulary::kEos);
}

TEST_CASE("infer_with_strategy: MEAN equals uniform-z generation; trace bounded") {
  const emin::ModelConfig cfg = small_config(12);
  std::vector<double> params = emin::init_parameters(cfg, 41);
  emin::Backbone model(cfg, params);
  const TokenizedInstance inst = small_instance();

  EMConfig em;
  em.k = 2;
  em.beam_width = 2;
  em.max_len = 6;
  em.strategy = Strategy::kMean;
  const emin::InferResult mean = emin::infer_with_strategy(model, inst, em);
  CHECK(mean.termination == "fixed");
  CHECK(mean.final_z == std::vector<double>{0.5, 0.5});

  const emin::InstanceContext ctx(model, inst);
  const Generation direct = ctx.generate({0.5, 0.5}, 2, 6);
  CHECK(mean.explanation.tokens == direct.tokens);

  em.strategy = Strategy::kEmin;
  em.infer_t_max = 4;
  const emin::InferResult emr = emin::infer_with_strategy(model, inst, em);
  CHECK(emr.trace.size() <= 4);
  if (emr.termination == "converged") CHECK(emr.trace.back().kl < em.epsilon);
  double s = 0.0;
  for (double zj : emr.final_z) s += zj;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("config validation") {
  EMConfig em;
  em.epsilon = 0.0;
  CHECK_THROWS_AS(em.validate(), emin::UsageError);
  em = EMConfig{};
  em.k = 0;
  CHECK_THROWS_AS(em.validate(), emin::UsageError);
  em = EMConfig{};
  em.infer_t_max = 0;
  CHECK_THROWS_AS(em.validate(), emin::UsageError);
  CHECK_THROWS_AS(emin::parse_strategy("bogus"), emin::UsageError);
  CHECK(emin::parse_strategy("EMIN") == Strategy::kEmin);
  CHECK(std::string(emin::strategy_name(Strategy::kSimi)) == "simi");
}
