#pragma once

#include <cstdint>
#include <vector>

#include "emin/common.hpp"
#include "emin/matrix.hpp"
#include "emin/rng.hpp"

namespace emin {

struct ModelConfig {
  int d_model = 64;
  int num_layers = 2;  // encoder and decoder depths are equal (layer-wise pairing)
  int num_heads = 2;
  int d_ff = 256;
  int vocab_size = 0;
  int max_len_x = 944;    // question + answer
  int max_len_ev = 944;   // one evidence paragraph
  int max_len_dec = 128;  // explanation
  double dropout = 0.1;   // applied during the M-step only

  void validate() const {
    if (vocab_size <= 4) throw UsageError("vocab_size must exceed the reserved ids");
    if (num_heads < 1 || d_model % num_heads != 0)
      throw UsageError("d_model must be divisible by num_heads");
    if (num_layers < 1 || d_ff < 1) throw UsageError("invalid layer sizes");
    if (max_len_x < 1 || max_len_ev < 1 || max_len_dec < 1)
      throw UsageError("invalid maximum lengths");
    if (dropout < 0.0 || dropout >= 1.0) throw UsageError("dropout must be in [0,1)");
  }
};

struct AttnParams {
  MatView wq, wk, wv, wo;
  VecView bq, bk, bv, bo;
};

struct LayerNormParams {
  VecView gain, bias;
};

struct FfnParams {
  MatView w1, w2;
  VecView b1, b2;
};

struct EncLayerParams {
  AttnParams attn;
  LayerNormParams ln1;
  FfnParams ffn;
  LayerNormParams ln2;
};

struct DecLayerParams {
  AttnParams self_attn;
  LayerNormParams ln_self;
  AttnParams cross_qa;
  LayerNormParams ln_qa;
  AttnParams cross_ev;
  LayerNormParams ln_ev;
  FfnParams ffn;
  LayerNormParams ln_ffn;
};

// All learnable weights addressed through one flat vector. The token
// embedding table is shared by both encoders and the decoder; the two
// encoders otherwise have separate parameter sets.
struct ModelView {
  MatView tok_emb;  // V x d
  MatView pos_x, pos_ev, pos_dec;
  std::vector<EncLayerParams> qa_layers, ev_layers;
  std::vector<DecLayerParams> dec_layers;
  MatView w_out;  // d x V
  VecView b_out;
};

namespace detail {

struct ParamCursor {
  double* base = nullptr;
  std::size_t off = 0;

  MatView mat(int r, int c) {
    MatView v{base ? base + off : nullptr, r, c};
    off += static_cast<std::size_t>(r) * c;
    return v;
  }
  VecView vec(int n) {
    VecView v{base ? base + off : nullptr, n};
    off += static_cast<std::size_t>(n);
    return v;
  }

  AttnParams attn(int d) {
    AttnParams p;
    p.wq = mat(d, d);
    p.bq = vec(d);
    p.wk = mat(d, d);
    p.bk = vec(d);
    p.wv = mat(d, d);
    p.bv = vec(d);
    p.wo = mat(d, d);
    p.bo = vec(d);
    return p;
  }
  LayerNormParams ln(int d) {
    LayerNormParams p;
    p.gain = vec(d);
    p.bias = vec(d);
    return p;
  }
  FfnParams ffn(int d, int dff) {
    FfnParams p;
    p.w1 = mat(d, dff);
    p.b1 = vec(dff);
    p.w2 = mat(dff, d);
    p.b2 = vec(d);
    return p;
  }
};

inline ModelView layout(double* base, const ModelConfig& cfg, std::size_t* count_out) {
  ParamCursor cur{base};
  ModelView v;
  const int d = cfg.d_model;
  v.tok_emb = cur.mat(cfg.vocab_size, d);
  v.pos_x = cur.mat(cfg.max_len_x, d);
  v.pos_ev = cur.mat(cfg.max_len_ev, d);
  v.pos_dec = cur.mat(cfg.max_len_dec, d);
  for (int l = 0; l < cfg.num_layers; ++l) {
    EncLayerParams e;
    e.attn = cur.attn(d);
    e.ln1 = cur.ln(d);
    e.ffn = cur.ffn(d, cfg.d_ff);
    e.ln2 = cur.ln(d);
    v.qa_layers.push_back(e);
  }
  for (int l = 0; l < cfg.num_layers; ++l) {
    EncLayerParams e;
    e.attn = cur.attn(d);
    e.ln1 = cur.ln(d);
    e.ffn = cur.ffn(d, cfg.d_ff);
    e.ln2 = cur.ln(d);
    v.ev_layers.push_back(e);
  }
  for (int l = 0; l < cfg.num_layers; ++l) {
    DecLayerParams dl;
    dl.self_attn = cur.attn(d);
    dl.ln_self = cur.ln(d);
    dl.cross_qa = cur.attn(d);
    dl.ln_qa = cur.ln(d);
    dl.cross_ev = cur.attn(d);
    dl.ln_ev = cur.ln(d);
    dl.ffn = cur.ffn(d, cfg.d_ff);
    dl.ln_ffn = cur.ln(d);
    v.dec_layers.push_back(dl);
  }
  v.w_out = cur.mat(d, cfg.vocab_size);
  v.b_out = cur.vec(cfg.vocab_size);
  if (count_out) *count_out = cur.off;
  return v;
}

}  // namespace detail

inline std::size_t param_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  detail::layout(nullptr, cfg, &n);
  return n;
}

inline ModelView model_view(double* base, const ModelConfig& cfg) {
  return detail::layout(base, cfg, nullptr);
}

// Weights ~ N(0, 0.02^2); every bias 0; layer-norm gains 1.
inline std::vector<double> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<double> flat(param_count(cfg));
  Rng rng = substream(seed, "init");
  for (double& w : flat) w = 0.02 * rng.normal();
  ModelView v = model_view(flat.data(), cfg);
  auto reset_ln = [](const LayerNormParams& p) {
    for (int i = 0; i < p.gain.n; ++i) p.gain[i] = 1.0;
    for (int i = 0; i < p.bias.n; ++i) p.bias[i] = 0.0;
  };
  auto reset_attn_bias = [](const AttnParams& p) {
    for (auto* b : {&p.bq, &p.bk, &p.bv, &p.bo})
      for (int i = 0; i < b->n; ++i) (*b)[i] = 0.0;
  };
  auto reset_ffn_bias = [](const FfnParams& p) {
    for (int i = 0; i < p.b1.n; ++i) p.b1[i] = 0.0;
    for (int i = 0; i < p.b2.n; ++i) p.b2[i] = 0.0;
  };
  for (const auto& layers : {v.qa_layers, v.ev_layers}) {
    for (const auto& e : layers) {
      reset_attn_bias(e.attn);
      reset_ln(e.ln1);
      reset_ffn_bias(e.ffn);
      reset_ln(e.ln2);
    }
  }
  for (const auto& dl : v.dec_layers) {
    reset_attn_bias(dl.self_attn);
    reset_ln(dl.ln_self);
    reset_attn_bias(dl.cross_qa);
    reset_ln(dl.ln_qa);
    reset_attn_bias(dl.cross_ev);
    reset_ln(dl.ln_ev);
    reset_ffn_bias(dl.ffn);
    reset_ln(dl.ln_ffn);
  }
  for (int i = 0; i < v.b_out.n; ++i) v.b_out[i] = 0.0;
  for (double w : flat)
    if (!std::isfinite(w)) throw NumericalError("non-finite value in initialized parameters");
  return flat;
}

}  // namespace emin
