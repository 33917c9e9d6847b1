#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "emin/corpus.hpp"
#include "emin/matrix.hpp"
#include "emin/model.hpp"
#include "emin/rng.hpp"

namespace emin {

inline constexpr double kProbFloor = 1e-9;
inline constexpr double kLnEps = 1e-5;

// ---------------------------------------------------------------------------
// Sub-layer primitives with explicit caches for reverse-mode differentiation.
// ---------------------------------------------------------------------------

struct AttnCache {
  Mat q_in, kv_in;
  Mat q, k, v;             // projected, L x d
  std::vector<Mat> probs;  // per head, Lq x Lk
  Mat concat;              // Lq x d
};

inline Mat attention_forward(const AttnParams& p, const Mat& q_in, const Mat& kv_in,
                             int heads, bool causal, AttnCache& c) {
  const int d = p.wq.cols;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  c.q_in = q_in;
  c.kv_in = kv_in;
  c.q = linear(q_in, p.wq, p.bq);
  c.k = linear(kv_in, p.wk, p.bk);
  c.v = linear(kv_in, p.wv, p.bv);
  c.probs.assign(heads, Mat());
  c.concat = Mat(q_in.rows, d);
  for (int h = 0; h < heads; ++h) {
    const int o = h * dh;
    Mat s(q_in.rows, kv_in.rows);
    for (int i = 0; i < q_in.rows; ++i) {
      const double* qi = c.q.row(i) + o;
      for (int j = 0; j < kv_in.rows; ++j) {
        if (causal && j > i) {
          s(i, j) = -1e30;
          continue;
        }
        const double* kj = c.k.row(j) + o;
        double dot = 0.0;
        for (int t = 0; t < dh; ++t) dot += qi[t] * kj[t];
        s(i, j) = dot * scale;
      }
      softmax_row_inplace(s.row(i), kv_in.rows);
    }
    for (int i = 0; i < q_in.rows; ++i) {
      double* out = c.concat.row(i) + o;
      const double* srow = s.row(i);
      for (int j = 0; j < kv_in.rows; ++j) {
        const double a = srow[j];
        if (a == 0.0) continue;
        const double* vj = c.v.row(j) + o;
        for (int t = 0; t < dh; ++t) out[t] += a * vj[t];
      }
    }
    c.probs[h] = std::move(s);
  }
  return linear(c.concat, p.wo, p.bo);
}

// Accumulates parameter gradients into g and input gradients into the two
// accumulators (which may be the same object for self-attention).
inline void attention_backward(const AttnParams& p, const AttnParams& g, const AttnCache& c,
                               const Mat& d_out, int heads, Mat& d_q_in_accum,
                               Mat& d_kv_in_accum) {
  const int d = p.wq.cols;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const int lq = c.q_in.rows;
  const int lk = c.kv_in.rows;

  Mat d_concat = linear_backward(c.concat, p.wo, d_out, g.wo, g.bo);
  Mat d_q(lq, d), d_k(lk, d), d_v(lk, d);
  for (int h = 0; h < heads; ++h) {
    const int o = h * dh;
    const Mat& A = c.probs[h];
    // dA and dV
    Mat dA(lq, lk);
    for (int i = 0; i < lq; ++i) {
      const double* dci = d_concat.row(i) + o;
      const double* arow = A.row(i);
      for (int j = 0; j < lk; ++j) {
        const double* vj = c.v.row(j) + o;
        double dot = 0.0;
        for (int t = 0; t < dh; ++t) dot += dci[t] * vj[t];
        dA(i, j) = dot;
        const double a = arow[j];
        if (a != 0.0) {
          double* dvj = d_v.row(j) + o;
          for (int t = 0; t < dh; ++t) dvj[t] += a * dci[t];
        }
      }
    }
    // softmax backward, then scores -> q, k
    for (int i = 0; i < lq; ++i) {
      const double* arow = A.row(i);
      double* darow = dA.row(i);
      double inner = 0.0;
      for (int j = 0; j < lk; ++j) inner += darow[j] * arow[j];
      double* dqi = d_q.row(i) + o;
      for (int j = 0; j < lk; ++j) {
        const double ds = arow[j] * (darow[j] - inner) * scale;
        if (ds == 0.0) continue;
        const double* kj = c.k.row(j) + o;
        double* dkj = d_k.row(j) + o;
        const double* qi = c.q.row(i) + o;
        for (int t = 0; t < dh; ++t) {
          dqi[t] += ds * kj[t];
          dkj[t] += ds * qi[t];
        }
      }
    }
  }
  add_inplace(d_q_in_accum, linear_backward(c.q_in, p.wq, d_q, g.wq, g.bq));
  add_inplace(d_kv_in_accum, linear_backward(c.kv_in, p.wk, d_k, g.wk, g.bk));
  add_inplace(d_kv_in_accum, linear_backward(c.kv_in, p.wv, d_v, g.wv, g.bv));
}

struct LnCache {
  Mat xhat;
  std::vector<double> rstd;
};

inline Mat layernorm_forward(const LayerNormParams& p, const Mat& x, LnCache& c) {
  const int n = x.cols;
  c.xhat = Mat(x.rows, n);
  c.rstd.assign(x.rows, 0.0);
  Mat y(x.rows, n);
  for (int i = 0; i < x.rows; ++i) {
    const double* xi = x.row(i);
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += xi[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double dxy = xi[j] - mean;
      var += dxy * dxy;
    }
    var /= n;
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    c.rstd[i] = rstd;
    double* xh = c.xhat.row(i);
    double* yi = y.row(i);
    for (int j = 0; j < n; ++j) {
      xh[j] = (xi[j] - mean) * rstd;
      yi[j] = p.gain[j] * xh[j] + p.bias[j];
    }
  }
  return y;
}

inline Mat layernorm_backward(const LayerNormParams& p, const LayerNormParams& g,
                              const LnCache& c, const Mat& dy) {
  const int n = dy.cols;
  Mat dx(dy.rows, n);
  for (int i = 0; i < dy.rows; ++i) {
    const double* dyi = dy.row(i);
    const double* xh = c.xhat.row(i);
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (int j = 0; j < n; ++j) {
      const double dxhat = dyi[j] * p.gain[j];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xh[j];
      g.gain[j] += dyi[j] * xh[j];
      g.bias[j] += dyi[j];
    }
    const double inv_n = 1.0 / n;
    double* dxi = dx.row(i);
    for (int j = 0; j < n; ++j) {
      const double dxhat = dyi[j] * p.gain[j];
      dxi[j] = c.rstd[i] * (dxhat - inv_n * sum_dxhat - xh[j] * inv_n * sum_dxhat_xhat);
    }
  }
  return dx;
}

struct FfnCache {
  Mat x_in, hpre;
};

inline Mat ffn_forward(const FfnParams& p, const Mat& x, FfnCache& c) {
  c.x_in = x;
  c.hpre = linear(x, p.w1, p.b1);
  Mat h = c.hpre;
  for (double& v : h.a) v = v > 0.0 ? v : 0.0;
  return linear(h, p.w2, p.b2);
}

inline Mat ffn_backward(const FfnParams& p, const FfnParams& g, const FfnCache& c,
                        const Mat& dy) {
  Mat h = c.hpre;
  for (double& v : h.a) v = v > 0.0 ? v : 0.0;
  Mat dh = linear_backward(h, p.w2, dy, g.w2, g.b2);
  for (std::size_t i = 0; i < dh.a.size(); ++i)
    if (c.hpre.a[i] <= 0.0) dh.a[i] = 0.0;
  return linear_backward(c.x_in, p.w1, dh, g.w1, g.b1);
}

struct DropCache {
  Mat mask;
  bool active = false;
};

// Inverted dropout; a null rng or zero rate leaves the input untouched.
inline void dropout_forward(Mat& x, double rate, Rng* rng, DropCache& c) {
  if (rate <= 0.0 || rng == nullptr) return;
  c.active = true;
  c.mask = Mat(x.rows, x.cols);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < x.a.size(); ++i) {
    c.mask.a[i] = rng->uniform() < rate ? 0.0 : keep_scale;
    x.a[i] *= c.mask.a[i];
  }
}

inline void dropout_backward(Mat& d, const DropCache& c) {
  if (!c.active) return;
  for (std::size_t i = 0; i < d.a.size(); ++i) d.a[i] *= c.mask.a[i];
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

struct EncLayerCache {
  AttnCache attn;
  DropCache drop1;
  LnCache ln1;
  FfnCache ffn;
  DropCache drop2;
  LnCache ln2;
};

struct EncoderCache {
  std::vector<int> tokens;
  std::vector<EncLayerCache> layers;
};

// Per-layer outputs are all kept: decoder layer l cross-attends to the
// matching encoder layer's output.
struct EncoderResult {
  std::vector<Mat> layer_out;
};

enum class Branch { kQuestionAnswer, kEvidence };

namespace detail {

inline Mat embed(const MatView& tok_emb, const MatView& pos, std::span<const int> tokens,
                 int vocab_size, int max_len) {
  const int L = static_cast<int>(tokens.size());
  if (L == 0) throw DataError("empty token sequence");
  if (L > max_len)
    throw DataError("sequence length " + std::to_string(L) + " exceeds limit " +
                    std::to_string(max_len));
  Mat x(L, tok_emb.cols);
  for (int i = 0; i < L; ++i) {
    if (tokens[i] < 0 || tokens[i] >= vocab_size)
      throw DataError("token id out of range: " + std::to_string(tokens[i]));
    const double* te = tok_emb.row(tokens[i]);
    const double* pe = pos.row(i);
    double* xi = x.row(i);
    for (int j = 0; j < tok_emb.cols; ++j) xi[j] = te[j] + pe[j];
  }
  return x;
}

inline EncoderResult encoder_forward(const std::vector<EncLayerParams>& layers,
                                     const Mat& emb, int heads, double drop_rate,
                                     Rng* rng, EncoderCache* cache) {
  EncoderResult res;
  Mat x = emb;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    EncLayerCache local;
    EncLayerCache& c = cache ? (cache->layers.emplace_back(), cache->layers.back()) : local;
    Mat a = attention_forward(layers[l].attn, x, x, heads, /*causal=*/false, c.attn);
    dropout_forward(a, drop_rate, rng, c.drop1);
    add_inplace(a, x);
    Mat x1 = layernorm_forward(layers[l].ln1, a, c.ln1);
    Mat f = ffn_forward(layers[l].ffn, x1, c.ffn);
    dropout_forward(f, drop_rate, rng, c.drop2);
    add_inplace(f, x1);
    x = layernorm_forward(layers[l].ln2, f, c.ln2);
    res.layer_out.push_back(x);
  }
  return res;
}

// d_inject[l] is the gradient flowing into layer l's output from the decoder;
// returns the gradient at the embedding.
inline Mat encoder_backward(const std::vector<EncLayerParams>& layers,
                            const std::vector<EncLayerParams>& grads,
                            const EncoderCache& cache, int heads,
                            const std::vector<Mat>& d_inject) {
  const int n = static_cast<int>(layers.size());
  Mat d = d_inject[n - 1];
  for (int l = n - 1; l >= 0; --l) {
    const EncLayerCache& c = cache.layers[l];
    Mat d_sum2 = layernorm_backward(layers[l].ln2, grads[l].ln2, c.ln2, d);
    Mat d_f = d_sum2;
    dropout_backward(d_f, c.drop2);
    Mat d_x1 = ffn_backward(layers[l].ffn, grads[l].ffn, c.ffn, d_f);
    add_inplace(d_x1, d_sum2);  // residual
    Mat d_sum1 = layernorm_backward(layers[l].ln1, grads[l].ln1, c.ln1, d_x1);
    Mat d_a = d_sum1;
    dropout_backward(d_a, c.drop1);
    Mat d_x(d_sum1.rows, d_sum1.cols);
    attention_backward(layers[l].attn, grads[l].attn, c.attn, d_a, heads, d_x, d_x);
    add_inplace(d_x, d_sum1);  // residual
    d = std::move(d_x);
    if (l > 0) add_inplace(d, d_inject[l - 1]);
  }
  return d;
}

inline void embed_backward(const MatView& d_tok_emb, const MatView& d_pos,
                           std::span<const int> tokens, const Mat& d_emb) {
  for (int i = 0; i < d_emb.rows; ++i) {
    const double* di = d_emb.row(i);
    double* te = d_tok_emb.row(tokens[i]);
    double* pe = d_pos.row(i);
    for (int j = 0; j < d_emb.cols; ++j) {
      te[j] += di[j];
      pe[j] += di[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

struct DecLayerCache {
  AttnCache self;
  DropCache drop_self;
  LnCache ln_self;
  AttnCache cqa;
  DropCache drop_qa;
  LnCache ln_qa;
  std::vector<AttnCache> cev;  // one per evidence paragraph
  DropCache drop_ev;
  LnCache ln_ev;
  FfnCache ffn;
  DropCache drop_ffn;
  LnCache ln_ffn;
};

struct DecoderCache {
  std::vector<int> in_tokens;
  std::vector<DecLayerCache> layers;
  Mat final_h;
  Mat probs;
};

// Per-position next-token distributions plus the probability the decoder
// assigns to a given target sequence.
struct DecoderOutput {
  Mat probs;                         // T x V, each row sums to 1
  std::vector<double> target_probs;  // probability of target[m] at position m
  std::vector<Mat> hidden;           // decoder layer outputs
  double ce_sum = 0.0;               // -sum log target_probs (floored)
};

class Backbone {
 public:
  Backbone(const ModelConfig& cfg, double* params) : cfg_(cfg), view_(model_view(params, cfg)) {}
  Backbone(const ModelConfig& cfg, std::vector<double>& params)
      : Backbone(cfg, params.data()) {}

  const ModelConfig& config() const { return cfg_; }
  const ModelView& view() const { return view_; }

  EncoderResult encode(std::span<const int> tokens, Branch branch,
                       EncoderCache* cache = nullptr, Rng* drop_rng = nullptr) const {
    const bool qa = branch == Branch::kQuestionAnswer;
    Mat emb = detail::embed(view_.tok_emb, qa ? view_.pos_x : view_.pos_ev, tokens,
                            cfg_.vocab_size, qa ? cfg_.max_len_x : cfg_.max_len_ev);
    if (cache) cache->tokens.assign(tokens.begin(), tokens.end());
    const double rate = drop_rng ? cfg_.dropout : 0.0;
    return detail::encoder_forward(qa ? view_.qa_layers : view_.ev_layers, emb,
                                   cfg_.num_heads, rate, drop_rng, cache);
  }

  // Full decoder forward over an input prefix (BOS followed by previously
  // emitted / ground-truth tokens). Row m of the result is the distribution
  // of the token following position m.
  Mat decode_probs(const EncoderResult& qa, const std::vector<EncoderResult>& evs,
                   std::span<const double> z, std::span<const int> in_tokens,
                   DecoderCache* cache = nullptr, Rng* drop_rng = nullptr,
                   std::vector<Mat>* hidden_out = nullptr) const {
    if (evs.size() != z.size()) throw UsageError("evidence count does not match |z|");
    if (evs.empty()) throw UsageError("decoder requires at least one evidence paragraph");
    for (const auto& e : evs)
      if (static_cast<int>(e.layer_out.size()) != cfg_.num_layers)
        throw UsageError("evidence encoding layer count mismatch");
    if (static_cast<int>(qa.layer_out.size()) != cfg_.num_layers)
      throw UsageError("question-answer encoding layer count mismatch");

    const double rate = drop_rng ? cfg_.dropout : 0.0;
    Mat h = detail::embed(view_.tok_emb, view_.pos_dec, in_tokens, cfg_.vocab_size,
                          cfg_.max_len_dec);
    if (cache) cache->in_tokens.assign(in_tokens.begin(), in_tokens.end());
    for (int l = 0; l < cfg_.num_layers; ++l) {
      DecLayerCache local;
      DecLayerCache& c = cache ? (cache->layers.emplace_back(), cache->layers.back()) : local;
      const DecLayerParams& p = view_.dec_layers[l];

      Mat sa = attention_forward(p.self_attn, h, h, cfg_.num_heads, /*causal=*/true, c.self);
      dropout_forward(sa, rate, drop_rng, c.drop_self);
      add_inplace(sa, h);
      Mat h1 = layernorm_forward(p.ln_self, sa, c.ln_self);

      Mat ca = attention_forward(p.cross_qa, h1, qa.layer_out[l], cfg_.num_heads,
                                 /*causal=*/false, c.cqa);
      dropout_forward(ca, rate, drop_rng, c.drop_qa);
      add_inplace(ca, h1);
      Mat h2 = layernorm_forward(p.ln_qa, ca, c.ln_qa);

      // Evidence fusion: convex combination of per-paragraph cross-attention.
      c.cev.assign(evs.size(), AttnCache());
      Mat fused(h2.rows, h2.cols);
      for (std::size_t j = 0; j < evs.size(); ++j) {
        Mat oj = attention_forward(p.cross_ev, h2, evs[j].layer_out[l], cfg_.num_heads,
                                   /*causal=*/false, c.cev[j]);
        add_scaled_inplace(fused, oj, z[j]);
      }
      dropout_forward(fused, rate, drop_rng, c.drop_ev);
      add_inplace(fused, h2);
      Mat h3 = layernorm_forward(p.ln_ev, fused, c.ln_ev);

      Mat f = ffn_forward(p.ffn, h3, c.ffn);
      dropout_forward(f, rate, drop_rng, c.drop_ffn);
      add_inplace(f, h3);
      h = layernorm_forward(p.ln_ffn, f, c.ln_ffn);
      if (hidden_out) hidden_out->push_back(h);
    }
    Mat logits = linear(h, view_.w_out, view_.b_out);
    for (int i = 0; i < logits.rows; ++i) softmax_row_inplace(logits.row(i), logits.cols);
    if (cache) {
      cache->final_h = h;
      cache->probs = logits;
    }
    return logits;
  }

  // Teacher forcing over a target sequence (explanation tokens + EOS): the
  // decoder input is BOS followed by the target without its last token.
  DecoderOutput decode_teacher_forced(const EncoderResult& qa,
                                      const std::vector<EncoderResult>& evs,
                                      std::span<const double> z, std::span<const int> target,
                                      DecoderCache* cache = nullptr,
                                      Rng* drop_rng = nullptr) const {
    if (target.empty()) throw DataError("empty target sequence");
    std::vector<int> in_tokens(target.size());
    in_tokens[0] = Vocabulary::kBos;
    for (std::size_t i = 1; i < target.size(); ++i) in_tokens[i] = target[i - 1];
    DecoderOutput out;
    out.probs = decode_probs(qa, evs, z, in_tokens, cache, drop_rng, &out.hidden);
    out.target_probs.resize(target.size());
    for (std::size_t m = 0; m < target.size(); ++m) {
      const double pm = out.probs(static_cast<int>(m), target[m]);
      out.target_probs[m] = pm;
      out.ce_sum -= std::log(std::max(pm, kProbFloor));
    }
    return out;
  }

  // Backward pass for the teacher-forced cross-entropy of one instance.
  // d_logit scale: d(loss)/d(logit) = scale * (p - onehot).
  // Accumulates into grads (same layout as the parameter vector).
  void backward_teacher_forced(const EncoderCache& qa_cache, const EncoderResult& qa,
                               const std::vector<EncoderCache>& ev_caches,
                               const std::vector<EncoderResult>& evs,
                               std::span<const double> z, std::span<const int> target,
                               const DecoderCache& dec_cache, double scale,
                               double* grads) const {
    ModelView g = model_view(grads, cfg_);
    const int T = static_cast<int>(target.size());
    const int V = cfg_.vocab_size;
    Mat d_logits(T, V);
    for (int m = 0; m < T; ++m) {
      const double* pr = dec_cache.probs.row(m);
      double* dl = d_logits.row(m);
      for (int j = 0; j < V; ++j) dl[j] = scale * pr[j];
      dl[target[m]] -= scale;
    }

    // Output projection.
    Mat d_h = linear_backward(dec_cache.final_h, view_.w_out, d_logits, g.w_out, g.b_out);

    // Gradient buckets for encoder layer outputs.
    std::vector<Mat> d_qa(cfg_.num_layers);
    std::vector<std::vector<Mat>> d_ev(evs.size(), std::vector<Mat>(cfg_.num_layers));
    for (int l = 0; l < cfg_.num_layers; ++l) {
      d_qa[l] = Mat(qa.layer_out[l].rows, qa.layer_out[l].cols);
      for (std::size_t j = 0; j < evs.size(); ++j)
        d_ev[j][l] = Mat(evs[j].layer_out[l].rows, evs[j].layer_out[l].cols);
    }

    for (int l = cfg_.num_layers - 1; l >= 0; --l) {
      const DecLayerCache& c = dec_cache.layers[l];
      const DecLayerParams& p = view_.dec_layers[l];
      const DecLayerParams& pg = g.dec_layers[l];

      Mat d_sumF = layernorm_backward(p.ln_ffn, pg.ln_ffn, c.ln_ffn, d_h);
      Mat d_f = d_sumF;
      dropout_backward(d_f, c.drop_ffn);
      Mat d_h3 = ffn_backward(p.ffn, pg.ffn, c.ffn, d_f);
      add_inplace(d_h3, d_sumF);

      Mat d_sumE = layernorm_backward(p.ln_ev, pg.ln_ev, c.ln_ev, d_h3);
      Mat d_fused = d_sumE;
      dropout_backward(d_fused, c.drop_ev);
      Mat d_h2 = d_sumE;  // residual
      for (std::size_t j = 0; j < evs.size(); ++j) {
        if (z[j] == 0.0) continue;
        Mat d_oj(d_fused.rows, d_fused.cols);
        for (std::size_t t = 0; t < d_oj.a.size(); ++t) d_oj.a[t] = z[j] * d_fused.a[t];
        attention_backward(p.cross_ev, pg.cross_ev, c.cev[j], d_oj, cfg_.num_heads, d_h2,
                           d_ev[j][l]);
      }

      Mat d_sumQ = layernorm_backward(p.ln_qa, pg.ln_qa, c.ln_qa, d_h2);
      Mat d_ca = d_sumQ;
      dropout_backward(d_ca, c.drop_qa);
      Mat d_h1 = d_sumQ;  // residual
      attention_backward(p.cross_qa, pg.cross_qa, c.cqa, d_ca, cfg_.num_heads, d_h1, d_qa[l]);

      Mat d_sumS = layernorm_backward(p.ln_self, pg.ln_self, c.ln_self, d_h1);
      Mat d_sa = d_sumS;
      dropout_backward(d_sa, c.drop_self);
      Mat d_h0 = d_sumS;  // residual
      attention_backward(p.self_attn, pg.self_attn, c.self, d_sa, cfg_.num_heads, d_h0, d_h0);
      d_h = std::move(d_h0);
    }
    detail::embed_backward(g.tok_emb, g.pos_dec, dec_cache.in_tokens, d_h);

    // Encoders.
    Mat d_qa_emb =
        detail::encoder_backward(view_.qa_layers, g.qa_layers, qa_cache, cfg_.num_heads, d_qa);
    detail::embed_backward(g.tok_emb, g.pos_x, qa_cache.tokens, d_qa_emb);
    for (std::size_t j = 0; j < evs.size(); ++j) {
      Mat d_ev_emb = detail::encoder_backward(view_.ev_layers, g.ev_layers, ev_caches[j],
                                              cfg_.num_heads, d_ev[j]);
      detail::embed_backward(g.tok_emb, g.pos_ev, ev_caches[j].tokens, d_ev_emb);
    }
  }

 private:
  ModelConfig cfg_;
  ModelView view_;
};

// ---------------------------------------------------------------------------
// Batched loss and gradients (Eq.-style teacher-forced cross entropy)
// ---------------------------------------------------------------------------

struct TokenizedInstance {
  std::string id;
  std::vector<int> qa;                     // question + answer token ids
  std::vector<std::vector<int>> evidence;  // per-paragraph token ids
  std::vector<int> target;                 // explanation token ids + EOS
  int planted_index = -1;                  // -1 when unknown
};

// Whitespace-tokenized model input; over-length fields are tail-truncated
// with a warning recorded in *warnings.
inline TokenizedInstance tokenize_instance(const QAEInstance& inst, const Vocabulary& vocab,
                                           const ModelConfig& cfg,
                                           std::vector<std::string>* warnings = nullptr) {
  TokenizedInstance t;
  t.id = inst.id;
  auto truncate = [&](std::vector<int>& v, int limit, const char* field) {
    if (static_cast<int>(v.size()) > limit) {
      v.resize(limit);
      if (warnings)
        warnings->push_back(inst.id + ": " + field + " truncated to " +
                            std::to_string(limit) + " tokens");
    }
  };
  t.qa = vocab.encode_text(inst.question);
  const auto ans = vocab.encode_text(inst.answer);
  t.qa.insert(t.qa.end(), ans.begin(), ans.end());
  truncate(t.qa, cfg.max_len_x, "question+answer");
  for (const auto& e : inst.evidence) {
    t.evidence.push_back(vocab.encode_text(e));
    truncate(t.evidence.back(), cfg.max_len_ev, "evidence");
  }
  if (!inst.explanation.empty()) {
    t.target = vocab.encode_text(inst.explanation);
    truncate(t.target, cfg.max_len_dec - 1, "explanation");
  }
  t.target.push_back(Vocabulary::kEos);
  if (inst.planted_index) t.planted_index = *inst.planted_index;
  return t;
}

struct LossGrad {
  double loss = 0.0;  // mean per-token cross entropy
  std::vector<double> grad;
};

// z is treated as a constant (the EM latent receives no gradient).
inline LossGrad loss_and_gradients(const ModelConfig& cfg, std::vector<double>& params,
                                   std::span<const TokenizedInstance* const> batch,
                                   std::span<const std::vector<double>* const> z_batch,
                                   Rng* drop_rng = nullptr) {
  if (batch.empty()) throw UsageError("empty batch");
  if (batch.size() != z_batch.size()) throw UsageError("batch/z size mismatch");
  Backbone model(cfg, params);
  LossGrad out;
  out.grad.assign(params.size(), 0.0);

  std::size_t total_tokens = 0;
  for (const auto* inst : batch) total_tokens += inst->target.size();
  const double scale = 1.0 / static_cast<double>(total_tokens);

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const TokenizedInstance& inst = *batch[b];
    const std::vector<double>& z = *z_batch[b];
    if (inst.evidence.size() != z.size()) throw UsageError("instance/z length mismatch");
    EncoderCache qa_cache;
    EncoderResult qa = model.encode(inst.qa, Branch::kQuestionAnswer, &qa_cache, drop_rng);
    std::vector<EncoderCache> ev_caches(inst.evidence.size());
    std::vector<EncoderResult> evs;
    for (std::size_t j = 0; j < inst.evidence.size(); ++j)
      evs.push_back(model.encode(inst.evidence[j], Branch::kEvidence, &ev_caches[j], drop_rng));
    DecoderCache dec_cache;
    DecoderOutput dec =
        model.decode_teacher_forced(qa, evs, z, inst.target, &dec_cache, drop_rng);
    out.loss += dec.ce_sum * scale;
    model.backward_teacher_forced(qa_cache, qa, ev_caches, evs, z, inst.target, dec_cache,
                                  scale, out.grad.data());
  }
  return out;
}

// Forward-only companion used by the finite-difference oracle.
inline double loss_forward(const ModelConfig& cfg, std::vector<double>& params,
                           std::span<const TokenizedInstance* const> batch,
                           std::span<const std::vector<double>* const> z_batch) {
  if (batch.empty()) throw UsageError("empty batch");
  Backbone model(cfg, params);
  double loss = 0.0;
  std::size_t total_tokens = 0;
  for (const auto* inst : batch) total_tokens += inst->target.size();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const TokenizedInstance& inst = *batch[b];
    EncoderResult qa = model.encode(inst.qa, Branch::kQuestionAnswer);
    std::vector<EncoderResult> evs;
    for (const auto& e : inst.evidence) evs.push_back(model.encode(e, Branch::kEvidence));
    DecoderOutput dec = model.decode_teacher_forced(qa, evs, *z_batch[b], inst.target);
    loss += dec.ce_sum;
  }
  return loss / static_cast<double>(total_tokens);
}

}  // namespace emin
