// Command-line front end: synthetic corpus generation, evidence retrieval,
// EM training, iterative inference, metric evaluation, attention-cost
// benchmarking, and a finite-difference gradient check.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "emin/checkpoint.hpp"
#include "emin/common.hpp"
#include "emin/corpus.hpp"
#include "emin/costmodel.hpp"
#include "emin/em.hpp"
#include "emin/gradcheck.hpp"
#include "emin/metrics.hpp"
#include "emin/pipeline.hpp"
#include "emin/retrieval.hpp"

namespace fs = std::filesystem;

namespace {

// JSON config files for --config: flat object, keys matching long option
// names without the leading dashes. Command-line flags take precedence, so
// config values only fill options the user did not set explicitly.
void add_config_option(CLI::App* sub) {
  sub->add_option("--config", "JSON config file; explicit flags take precedence");
}

void apply_json_config(CLI::App* sub) {
  CLI::Option* copt = sub->get_option_no_throw("--config");
  if (copt == nullptr || copt->count() == 0) return;
  const std::string path = copt->as<std::string>();
  std::ifstream in(path);
  if (!in) throw emin::DataError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw emin::DataError("invalid JSON in config file " + path + ": " + e.what());
  }
  if (!j.is_object()) throw emin::DataError("config file must hold a JSON object: " + path);
  for (const auto& [key, value] : j.items()) {
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr || key == "config") throw emin::UsageError("unknown config key: " + key);
    if (opt->count() > 0) continue;  // set on the command line; flags win
    auto as_string = [](const nlohmann::json& v) {
      return v.is_string() ? v.get<std::string>() : v.dump();
    };
    if (value.is_array()) {
      for (const auto& v : value) opt->add_result(as_string(v));
    } else {
      opt->add_result(as_string(value));
    }
    opt->run_callback();
  }
}

void require_option(const std::string& value, const char* flag) {
  if (value.empty())
    throw emin::UsageError(std::string(flag) + " is required (flag or config file)");
}

std::string join_args(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i) s.push_back(' ');
    s += argv[i];
  }
  return s;
}

// --- synth ---

struct SynthArgs {
  std::string out;
  emin::SynthConfig cfg;
};

void run_synth(const SynthArgs& a, const std::string& cmdline) {
  require_option(a.out, "--out");
  emin::SynthResult res = emin::generate_synthetic(a.cfg);
  fs::create_directories(a.out);
  emin::write_file_atomic(fs::path(a.out) / "train.jsonl", emin::dataset_to_string(res.train));
  emin::write_file_atomic(fs::path(a.out) / "val.jsonl", emin::dataset_to_string(res.val));
  emin::write_file_atomic(fs::path(a.out) / "test.jsonl", emin::dataset_to_string(res.test));
  emin::save_collection(fs::path(a.out) / "corpus", res.collection);
  emin::Manifest m;
  m.command = cmdline;
  m.seed = a.cfg.seed;
  m.config = {{"entities", a.cfg.num_entities},
              {"attributes", a.cfg.num_attributes},
              {"values", a.cfg.values_per_attribute},
              {"k", a.cfg.paragraphs_per_instance},
              {"train", a.cfg.train_size},
              {"val", a.cfg.val_size},
              {"test", a.cfg.test_size}};
  m.artifacts = {fs::path(a.out) / "train.jsonl", fs::path(a.out) / "val.jsonl",
                 fs::path(a.out) / "test.jsonl"};
  emin::write_manifest(a.out, m);
  std::cout << "wrote " << res.train.size() << "/" << res.val.size() << "/" << res.test.size()
            << " train/val/test instances to " << a.out << "\n";
}

// --- retrieve ---

struct RetrieveArgs {
  std::string data, corpus, out, stopwords;
  int k = 10;
  int top_d = 25;
};

void run_retrieve(const RetrieveArgs& a, const std::string& cmdline) {
  require_option(a.data, "--data");
  require_option(a.corpus, "--corpus");
  require_option(a.out, "--out");
  const std::set<std::string> stop =
      a.stopwords.empty() ? emin::default_stopwords() : emin::load_stopwords(a.stopwords);
  std::vector<emin::QAEInstance> data = emin::load_dataset(a.data);
  emin::DocumentCollection coll = emin::load_collection(a.corpus);
  emin::DocumentIndex index(coll, stop);
  int shortfalls = 0, planted_kept = 0, planted_total = 0;
  for (auto& inst : data) {
    const std::string query = inst.question + " " + inst.answer;
    emin::RankedEvidence ranked = emin::select_evidence(query, index, a.k, a.top_d);
    if (ranked.shortfall) ++shortfalls;
    std::string planted_text;
    if (inst.planted_index) {
      planted_text = inst.evidence[*inst.planted_index];
      ++planted_total;
    }
    inst.evidence.clear();
    inst.planted_index.reset();
    for (std::size_t p = 0; p < ranked.paragraphs.size(); ++p) {
      inst.evidence.push_back(ranked.paragraphs[p].paragraph);
      if (!planted_text.empty() && ranked.paragraphs[p].paragraph == planted_text &&
          !inst.planted_index) {
        inst.planted_index = static_cast<int>(p);
        ++planted_kept;
      }
    }
  }
  emin::write_file_atomic(a.out, emin::dataset_to_string(data));
  emin::Manifest m;
  m.command = cmdline;
  m.config = {{"k", a.k}, {"top_d", a.top_d}};
  m.artifacts = {a.out};
  emin::write_manifest(fs::path(a.out).parent_path().empty() ? "." : fs::path(a.out).parent_path(),
                       m);
  std::cout << "retrieved evidence for " << data.size() << " instances";
  if (planted_total > 0)
    std::cout << "; planted paragraph kept in " << planted_kept << "/" << planted_total;
  if (shortfalls > 0) std::cout << "; " << shortfalls << " instances fell short of k";
  std::cout << "\n";
}

// --- train ---

struct TrainArgs {
  std::string data, out;
  std::string strategy = "emin";
  emin::TrainConfig cfg;
};

void run_train(const TrainArgs& a, const std::string& cmdline) {
  require_option(a.data, "--data");
  require_option(a.out, "--out");
  std::vector<emin::QAEInstance> data = emin::load_dataset(a.data);
  emin::Vocabulary vocab = emin::build_vocabulary(data, {}, 1);
  emin::TrainConfig cfg = a.cfg;
  cfg.em.strategy = emin::parse_strategy(a.strategy);
  emin::TrainResult res = emin::train(data, vocab, cfg);
  for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";

  fs::create_directories(a.out);
  emin::Checkpoint ck;
  ck.model = cfg.model;
  ck.model.vocab_size = vocab.size();
  ck.params = std::move(res.params);
  ck.adam_m = std::move(res.adam_m);
  ck.adam_v = std::move(res.adam_v);
  ck.adam_steps = res.adam_steps;
  ck.seed = cfg.seed;
  ck.em_iteration = static_cast<std::uint32_t>(res.em_iterations);
  ck.strategy = emin::strategy_name(cfg.em.strategy);
  emin::save_checkpoint(fs::path(a.out) / "checkpoint.bin", ck);
  emin::save_vocabulary(fs::path(a.out) / "vocab.txt", vocab);
  emin::write_file_atomic(fs::path(a.out) / "em_report.jsonl",
                          emin::em_report_to_jsonl(res.report));
  emin::Manifest m;
  m.command = cmdline;
  m.seed = cfg.seed;
  m.config = {{"strategy", emin::strategy_name(cfg.em.strategy)},
              {"t_max", cfg.em.t_max},
              {"epsilon", cfg.em.epsilon},
              {"d_model", cfg.model.d_model},
              {"num_layers", cfg.model.num_layers},
              {"num_heads", cfg.model.num_heads},
              {"batch_size", cfg.batch_size}};
  m.artifacts = {fs::path(a.out) / "checkpoint.bin", fs::path(a.out) / "vocab.txt",
                 fs::path(a.out) / "em_report.jsonl"};
  emin::write_manifest(a.out, m);
  std::cout << "trained " << emin::strategy_name(cfg.em.strategy) << " for "
            << res.em_iterations << " EM iterations (" << res.report.termination
            << "), final loss "
            << (res.report.iterations.empty() ? 0.0 : res.report.iterations.back().m_loss)
            << "\n";
}

// --- infer ---

struct InferArgs {
  std::string checkpoint, vocab, data, out;
  std::string strategy = "emin";
  emin::EMConfig em;
  bool hard_reference = false;
};

void run_infer(const InferArgs& a, const std::string& cmdline) {
  require_option(a.checkpoint, "--checkpoint");
  require_option(a.vocab, "--vocab");
  require_option(a.data, "--data");
  require_option(a.out, "--out");
  emin::Checkpoint ck = emin::load_checkpoint(a.checkpoint);
  emin::Vocabulary vocab = emin::load_vocabulary(a.vocab);
  if (vocab.size() != ck.model.vocab_size)
    throw emin::DataError("vocabulary size does not match the checkpoint");
  std::vector<emin::QAEInstance> data = emin::load_dataset(a.data);
  emin::Backbone model(ck.model, ck.params);
  emin::EMConfig em = a.em;
  em.strategy = emin::parse_strategy(a.strategy);
  em.soft_reference = !a.hard_reference;
  em.validate();

  std::string out;
  for (const auto& inst : data) {
    emin::TokenizedInstance tok = emin::tokenize_instance(inst, vocab, ck.model);
    emin::InferResult res = emin::infer_with_strategy(model, tok, em);
    out += emin::infer_result_to_json(inst.id, res, vocab.decode(res.explanation.tokens)).dump();
    out.push_back('\n');
  }
  emin::write_file_atomic(a.out, out);
  emin::Manifest m;
  m.command = cmdline;
  m.config = {{"strategy", emin::strategy_name(em.strategy)},
              {"beam", em.beam_width},
              {"infer_t_max", em.infer_t_max},
              {"epsilon", em.epsilon},
              {"soft_reference", em.soft_reference}};
  m.artifacts = {a.out};
  emin::write_manifest(fs::path(a.out).parent_path().empty() ? "." : fs::path(a.out).parent_path(),
                       m);
  std::cout << "generated explanations for " << data.size() << " instances -> " << a.out << "\n";
}

// --- eval ---

struct EvalArgs {
  std::string pred, data, out;
  bool no_smoothing = false;
};

void run_eval(const EvalArgs& a, const std::string&) {
  require_option(a.pred, "--pred");
  require_option(a.data, "--data");
  std::vector<emin::QAEInstance> refs = emin::load_dataset(a.data);
  std::map<std::string, std::string> pred_by_id;
  {
    std::ifstream in(a.pred);
    if (!in) throw emin::DataError("cannot open predictions file: " + a.pred);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw emin::DataError("malformed JSON at line " + std::to_string(line_no) + ": " +
                              e.what());
      }
      if (!j.contains("id") || !j.contains("explanation"))
        throw emin::DataError("prediction at line " + std::to_string(line_no) +
                              " lacks id/explanation");
      pred_by_id[j.at("id").get<std::string>()] = j.at("explanation").get<std::string>();
    }
  }
  std::vector<std::vector<std::string>> cands, gold;
  for (const auto& inst : refs) {
    auto it = pred_by_id.find(inst.id);
    if (it == pred_by_id.end())
      throw emin::DataError("no prediction for instance " + inst.id);
    if (inst.explanation.empty())
      throw emin::DataError("reference instance lacks an explanation: " + inst.id);
    cands.push_back(emin::tokenize(it->second));
    gold.push_back(emin::tokenize(inst.explanation));
  }
  emin::MetricReport rep = emin::evaluate_corpus(cands, gold);
  nlohmann::json j = emin::metric_report_to_json(rep);
  if (a.no_smoothing) j["bleu4_corpus"] = emin::bleu4(cands, gold, false);
  const std::string text = j.dump(2) + "\n";
  if (a.out.empty()) {
    std::cout << text;
  } else {
    emin::write_file_atomic(a.out, text);
    std::cout << "wrote metrics to " << a.out << "\n";
  }
}

// --- bench ---

struct BenchArgs {
  std::string out;
  std::vector<int> ms = {2, 4, 8, 16};
  int n = 64;
  emin::BenchConfig cfg;
};

void run_bench(const BenchArgs& a, const std::string&) {
  std::vector<std::pair<int, int>> grid;
  for (int m : a.ms) grid.emplace_back(m, a.n);
  const std::vector<emin::BenchRow> rows = emin::bench_wallclock(a.cfg, grid);
  const std::string csv = emin::bench_csv(rows);
  if (a.out.empty()) {
    std::cout << csv;
  } else {
    emin::write_file_atomic(a.out, csv);
    std::cout << "wrote benchmark to " << a.out << "\n";
  }
}

// --- gradcheck ---

struct GradcheckArgs {
  emin::ModelConfig model;
  int k = 2;
  std::uint64_t seed = 7;
  double h = 1e-5;
  std::size_t stride = 1;
  double tol = 1e-4;
};

int run_gradcheck(const GradcheckArgs& a) {
  emin::ModelConfig cfg = a.model;
  cfg.validate();
  std::vector<double> params = emin::init_parameters(cfg, a.seed);
  emin::Rng rng = emin::substream(a.seed, "gradcheck");
  std::vector<emin::TokenizedInstance> batch = {
      emin::random_check_instance(cfg, a.k, 5, 6, 4, rng)};
  std::vector<std::vector<double>> zs = {{0.3, 0.7}};
  if (a.k != 2) {
    zs[0].assign(a.k, 1.0 / a.k);
  }
  emin::GradCheckResult res = emin::gradient_check(cfg, params, batch, zs, a.h, a.stride);
  std::printf("checked %zu coordinates, max relative error %.3e (analytic %.6e, numeric %.6e at %zu)\n",
              res.checked, res.max_rel_err, res.worst_analytic, res.worst_numeric,
              res.worst_index);
  if (res.max_rel_err >= a.tol) {
    std::fprintf(stderr, "gradient check failed: %.3e >= tolerance %.3e\n", res.max_rel_err,
                 a.tol);
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EM-over-evidence explanation generation pipeline"};
  app.require_subcommand(1);
  const std::string cmdline = join_args(argc, argv);

  SynthArgs synth;
  CLI::App* s_synth = app.add_subcommand("synth", "generate a synthetic planted-evidence corpus");
  add_config_option(s_synth);
  s_synth->add_option("--out", synth.out, "output directory");
  s_synth->add_option("--seed", synth.cfg.seed, "random seed");
  s_synth->add_option("--k", synth.cfg.paragraphs_per_instance, "paragraphs per instance");
  s_synth->add_option("--train", synth.cfg.train_size, "training instances");
  s_synth->add_option("--val", synth.cfg.val_size, "validation instances");
  s_synth->add_option("--test", synth.cfg.test_size, "test instances");
  s_synth->add_option("--entities", synth.cfg.num_entities, "entity pool size");
  s_synth->add_option("--attributes", synth.cfg.num_attributes, "attribute pool size");
  s_synth->add_option("--values", synth.cfg.values_per_attribute, "value pool size");
  s_synth->add_option("--fillers", synth.cfg.filler_tokens_per_paragraph,
                      "filler tokens per paragraph");
  s_synth->add_option("--filler-pool", synth.cfg.filler_pool, "filler token pool size");

  RetrieveArgs retr;
  CLI::App* s_retr = app.add_subcommand("retrieve", "two-stage evidence selection");
  add_config_option(s_retr);
  s_retr->add_option("--data", retr.data, "input dataset (JSONL)");
  s_retr->add_option("--corpus", retr.corpus, "document collection directory");
  s_retr->add_option("--out", retr.out, "output dataset (JSONL)");
  s_retr->add_option("--k", retr.k, "paragraphs to keep per instance");
  s_retr->add_option("--top-d", retr.top_d, "documents to keep in the first stage");
  s_retr->add_option("--stopwords", retr.stopwords, "stopword file (one token per line)");

  TrainArgs train;
  CLI::App* s_train = app.add_subcommand("train", "EM training");
  add_config_option(s_train);
  s_train->add_option("--data", train.data, "training dataset (JSONL)");
  s_train->add_option("--out", train.out, "output directory");
  s_train->add_option("--strategy", train.strategy, "emin | mean | simi");
  s_train->add_option("--seed", train.cfg.seed, "random seed");
  s_train->add_option("--epsilon", train.cfg.em.epsilon, "KL stopping threshold");
  s_train->add_option("--t-max", train.cfg.em.t_max, "EM iteration cap");
  s_train->add_option("--min-iters", train.cfg.em.min_iterations,
                      "iterations before the KL stop applies");
  s_train->add_option("--m-passes", train.cfg.em.m_passes, "training passes per M-step");
  s_train->add_option("--batch", train.cfg.batch_size, "mini-batch size");
  s_train->add_option("--threads", train.cfg.threads, "E-step threads (0: auto)");
  s_train->add_option("--d-model", train.cfg.model.d_model, "model width");
  s_train->add_option("--layers", train.cfg.model.num_layers, "encoder/decoder layers");
  s_train->add_option("--heads", train.cfg.model.num_heads, "attention heads");
  s_train->add_option("--ff", train.cfg.model.d_ff, "feed-forward width");
  s_train->add_option("--dropout", train.cfg.model.dropout, "dropout rate (M-step only)");
  s_train->add_option("--max-len-x", train.cfg.model.max_len_x, "question+answer length cap");
  s_train->add_option("--max-len-ev", train.cfg.model.max_len_ev, "evidence length cap");
  s_train->add_option("--max-len-dec", train.cfg.model.max_len_dec, "decoder length cap");
  s_train->add_option("--lr", train.cfg.opt.lr, "peak learning rate");
  s_train->add_option("--weight-decay", train.cfg.opt.weight_decay, "decoupled weight decay");

  InferArgs infer;
  CLI::App* s_infer = app.add_subcommand("infer", "iterative inference");
  add_config_option(s_infer);
  s_infer->add_option("--checkpoint", infer.checkpoint, "model checkpoint");
  s_infer->add_option("--vocab", infer.vocab, "vocabulary file");
  s_infer->add_option("--data", infer.data, "dataset (JSONL)");
  s_infer->add_option("--out", infer.out, "output predictions (JSONL)");
  s_infer->add_option("--strategy", infer.strategy, "emin | mean | simi");
  s_infer->add_option("--beam", infer.em.beam_width, "beam width");
  s_infer->add_option("--max-len", infer.em.max_len, "generation length cap");
  s_infer->add_option("--epsilon", infer.em.epsilon, "KL stopping threshold");
  s_infer->add_option("--t-max", infer.em.infer_t_max, "inference EM iteration cap");
  s_infer->add_flag("--hard-reference", infer.hard_reference,
                    "weight the reference one-hot instead of by its probabilities");

  EvalArgs evala;
  CLI::App* s_eval = app.add_subcommand("eval", "text-overlap metrics");
  add_config_option(s_eval);
  s_eval->add_option("--pred", evala.pred, "predictions (JSONL with id, explanation)");
  s_eval->add_option("--data", evala.data, "reference dataset (JSONL)");
  s_eval->add_option("--out", evala.out, "output metrics JSON (default: stdout)");
  s_eval->add_flag("--no-smoothing", evala.no_smoothing, "disable BLEU smoothing");

  BenchArgs bench;
  CLI::App* s_bench = app.add_subcommand("bench", "attention-cost model and wall-clock grid");
  add_config_option(s_bench);
  s_bench->add_option("--out", bench.out, "output CSV (default: stdout)");
  s_bench->add_option("--m", bench.ms, "paragraph counts to sweep");
  s_bench->add_option("--n", bench.n, "tokens per paragraph");
  s_bench->add_option("--reps", bench.cfg.repetitions, "repetitions per point");
  s_bench->add_option("--seed", bench.cfg.seed, "random seed");

  GradcheckArgs gc;
  gc.model.d_model = 8;
  gc.model.num_layers = 1;
  gc.model.num_heads = 1;
  gc.model.d_ff = 16;
  gc.model.vocab_size = 16;
  gc.model.max_len_x = 16;
  gc.model.max_len_ev = 16;
  gc.model.max_len_dec = 16;
  gc.model.dropout = 0.0;
  CLI::App* s_gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
  add_config_option(s_gc);
  s_gc->add_option("--d-model", gc.model.d_model, "model width");
  s_gc->add_option("--layers", gc.model.num_layers, "layers");
  s_gc->add_option("--heads", gc.model.num_heads, "attention heads");
  s_gc->add_option("--ff", gc.model.d_ff, "feed-forward width");
  s_gc->add_option("--k", gc.k, "evidence paragraphs");
  s_gc->add_option("--seed", gc.seed, "random seed");
  s_gc->add_option("--fd-step", gc.h, "finite-difference step");
  s_gc->add_option("--stride", gc.stride, "check every stride-th coordinate");
  s_gc->add_option("--tol", gc.tol, "maximum allowed relative error");

  try {
    app.parse(argc, argv);
    for (CLI::App* sub : app.get_subcommands()) apply_json_config(sub);
    if (*s_synth) run_synth(synth, cmdline);
    if (*s_retr) run_retrieve(retr, cmdline);
    if (*s_train) run_train(train, cmdline);
    if (*s_infer) run_infer(infer, cmdline);
    if (*s_eval) run_eval(evala, cmdline);
    if (*s_bench) run_bench(bench, cmdline);
    if (*s_gc) return run_gradcheck(gc);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  } catch (const emin::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const emin::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const emin::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
