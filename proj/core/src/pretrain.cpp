#include "caprese/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "caprese/errors.hpp"
#include "caprese/rng.hpp"
#include "double_math.hpp"

namespace caprese {

namespace {

using detail::dsilu_d;
using detail::embed_rows_d;
using detail::rmsnorm_backward_d;
using detail::rmsnorm_d;
using detail::rope_rows_d;
using detail::silu_d;

MatrixD widen_gain(const std::vector<float>& gain) {
    MatrixD m(1, gain.size());
    for (size_t j = 0; j < gain.size(); ++j) m.data[j] = double(gain[j]);
    return m;
}

std::vector<float> narrow_gain(const MatrixD& gain) {
    std::vector<float> out(gain.cols);
    for (size_t j = 0; j < gain.cols; ++j) out[j] = float(gain.data[j]);
    return out;
}

void add_into(MatrixD& dst, const MatrixD& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

// dgain_j += sum_i dy_ij x_ij inv_i; the gain-side rmsnorm pullback.
void rmsnorm_gain_grad(const MatrixD& x, const std::vector<double>& inv, const MatrixD& dy,
                       MatrixD& dgain) {
    double* dg = dgain.row(0);
    for (size_t i = 0; i < x.rows; ++i) {
        const double* xr = x.row(i);
        const double* dyr = dy.row(i);
        for (size_t j = 0; j < x.cols; ++j) dg[j] += dyr[j] * xr[j] * inv[i];
    }
}

// Docs that yield predictions, validated against the model's limits.
std::vector<const TokenSequence*> usable_docs(const ModelConfig& cfg,
                                              const std::vector<TokenSequence>& docs) {
    std::vector<const TokenSequence*> out;
    for (const TokenSequence& doc : docs) {
        for (Token t : doc)
            if (size_t(t) >= cfg.vocab_size)
                throw DomainError("pretrain: token id out of vocab range");
        if (doc.size() < 2) continue;
        if (doc.size() - 1 > cfg.max_seq)
            throw CapacityError("pretrain: document exceeds max_seq");
        out.push_back(&doc);
    }
    if (out.empty()) throw DomainError("pretrain: corpus has no next-token positions");
    return out;
}

// Everything backward needs from one decoder layer's forward pass.
struct BlockCtx {
    MatrixD x_attn_in;
    MatrixD norm_a;
    std::vector<double> inv_a;
    MatrixD q, k, v;             // post-rope q/k
    std::vector<MatrixD> probs;  // per head, S x S (lower triangle)
    MatrixD attn_cat;
    MatrixD x_ffn_in;
    MatrixD norm_f;
    std::vector<double> inv_f;
    MatrixD s_lin;     // f W_g
    MatrixD u_lin;     // f W_1
    MatrixD gate_act;  // silu(s)
    MatrixD z;
};

// Full decoder forward in double over the context tokens; returns the final
// post-norm embedding. ctxs/x_final/inv_final may be null for loss-only runs.
MatrixD forward_doc(const ModelConfig& cfg, const ModelParams& p, const TokenSequence& ctx_tokens,
                    std::vector<BlockCtx>* ctxs, MatrixD* x_final_out,
                    std::vector<double>* inv_final_out) {
    const size_t s_len = ctx_tokens.size();
    const size_t hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(double(hd));
    MatrixD x = embed_rows_d(ctx_tokens, p.embedding);
    if (ctxs) ctxs->assign(cfg.n_layers, BlockCtx{});

    for (size_t l = 0; l < cfg.n_layers; ++l) {
        const ModelParams::Layer& pl = p.layers[l];
        BlockCtx local;
        BlockCtx& ctx = ctxs ? (*ctxs)[l] : local;
        ctx.x_attn_in = x;
        ctx.norm_a = rmsnorm_d(x, pl.attn_norm.row(0), &ctx.inv_a);
        ctx.q = matmul(ctx.norm_a, pl.wq);
        ctx.k = matmul(ctx.norm_a, pl.wk);
        ctx.v = matmul(ctx.norm_a, pl.wv);
        rope_rows_d(ctx.q, hd, 0, 1.0);
        rope_rows_d(ctx.k, hd, 0, 1.0);

        ctx.attn_cat = MatrixD(s_len, cfg.d_model);
        ctx.probs.assign(cfg.n_heads, MatrixD(s_len, s_len));
        for (size_t h = 0; h < cfg.n_heads; ++h) {
            const size_t off = h * hd;
            MatrixD& prob_mat = ctx.probs[h];
            for (size_t i = 0; i < s_len; ++i) {
                double max_score = -1e300;
                std::vector<double> scores(i + 1);
                for (size_t j = 0; j <= i; ++j) {
                    double dot = 0.0;
                    const double* qi = ctx.q.row(i) + off;
                    const double* kj = ctx.k.row(j) + off;
                    for (size_t c = 0; c < hd; ++c) dot += qi[c] * kj[c];
                    scores[j] = dot * scale;
                    max_score = std::max(max_score, scores[j]);
                }
                double denom = 0.0;
                for (size_t j = 0; j <= i; ++j) {
                    scores[j] = std::exp(scores[j] - max_score);
                    denom += scores[j];
                }
                double* out = ctx.attn_cat.row(i) + off;
                std::fill(out, out + hd, 0.0);
                for (size_t j = 0; j <= i; ++j) {
                    const double prob = scores[j] / denom;
                    prob_mat.at(i, j) = prob;
                    const double* vj = ctx.v.row(j) + off;
                    for (size_t c = 0; c < hd; ++c) out[c] += prob * vj[c];
                }
            }
        }
        const MatrixD attn_out = matmul(ctx.attn_cat, pl.wo);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += attn_out.data[i];

        ctx.x_ffn_in = x;
        ctx.norm_f = rmsnorm_d(x, pl.ffn_norm.row(0), &ctx.inv_f);
        ctx.s_lin = matmul(ctx.norm_f, pl.w_gate);
        ctx.u_lin = matmul(ctx.norm_f, pl.w_in);
        ctx.gate_act = MatrixD(ctx.s_lin.rows, ctx.s_lin.cols);
        ctx.z = MatrixD(ctx.s_lin.rows, ctx.s_lin.cols);
        for (size_t i = 0; i < ctx.s_lin.size(); ++i) {
            const double g = silu_d(ctx.s_lin.data[i]);
            ctx.gate_act.data[i] = g;
            ctx.z.data[i] = g * ctx.u_lin.data[i];
        }
        const MatrixD y = matmul(ctx.z, pl.w_out);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += y.data[i];
    }
    std::vector<double> inv_final;
    MatrixD e = rmsnorm_d(x, p.final_norm.row(0), &inv_final);
    if (x_final_out) *x_final_out = std::move(x);
    if (inv_final_out) *inv_final_out = std::move(inv_final);
    return e;
}

// Accumulates gradients for every parameter given de, the gradient at the
// final embedding.
void backward_doc(const ModelConfig& cfg, const ModelParams& p, const TokenSequence& ctx_tokens,
                  const std::vector<BlockCtx>& ctxs, const MatrixD& x_final,
                  const std::vector<double>& inv_final, const MatrixD& de, ModelParams& g) {
    const size_t s_len = x_final.rows;
    const size_t hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(double(hd));

    MatrixD dx(s_len, cfg.d_model);
    rmsnorm_gain_grad(x_final, inv_final, de, g.final_norm);
    rmsnorm_backward_d(x_final, p.final_norm.row(0), inv_final, de, dx);

    for (size_t li = cfg.n_layers; li > 0; --li) {
        const size_t l = li - 1;
        const BlockCtx& ctx = ctxs[l];
        const ModelParams::Layer& pl = p.layers[l];
        ModelParams::Layer& gl = g.layers[l];

        // FFN sublayer: x_next = x_ffn_in + z(norm_f) W_2.
        const MatrixD& dy = dx;
        add_into(gl.w_out, matmul(transpose(ctx.z), dy));
        MatrixD dz = matmul(dy, transpose(pl.w_out));
        MatrixD ds(dz.rows, dz.cols);
        MatrixD du(dz.rows, dz.cols);
        for (size_t i = 0; i < dz.size(); ++i) {
            du.data[i] = ctx.gate_act.data[i] * dz.data[i];
            ds.data[i] = dsilu_d(ctx.s_lin.data[i]) * ctx.u_lin.data[i] * dz.data[i];
        }
        add_into(gl.w_gate, matmul(transpose(ctx.norm_f), ds));
        add_into(gl.w_in, matmul(transpose(ctx.norm_f), du));
        MatrixD df = matmul(ds, transpose(pl.w_gate));
        add_into(df, matmul(du, transpose(pl.w_in)));

        MatrixD dx_mid = dx;  // residual connection
        rmsnorm_gain_grad(ctx.x_ffn_in, ctx.inv_f, df, gl.ffn_norm);
        rmsnorm_backward_d(ctx.x_ffn_in, pl.ffn_norm.row(0), ctx.inv_f, df, dx_mid);

        // Attention sublayer: x_mid = x_attn_in + Wo(attn(norm_a)).
        add_into(gl.wo, matmul(transpose(ctx.attn_cat), dx_mid));
        const MatrixD dattn = matmul(dx_mid, transpose(pl.wo));
        MatrixD dq(s_len, cfg.d_model), dk(s_len, cfg.d_model), dv(s_len, cfg.d_model);
        for (size_t h = 0; h < cfg.n_heads; ++h) {
            const size_t off = h * hd;
            const MatrixD& prob_mat = ctx.probs[h];
            for (size_t i = 0; i < s_len; ++i) {
                const double* da_i = dattn.row(i) + off;
                std::vector<double> dp(i + 1);
                double dot_pp = 0.0;
                for (size_t j = 0; j <= i; ++j) {
                    double dot = 0.0;
                    const double* vj = ctx.v.row(j) + off;
                    for (size_t c = 0; c < hd; ++c) dot += da_i[c] * vj[c];
                    dp[j] = dot;
                    dot_pp += dot * prob_mat.at(i, j);
                    double* dvj = dv.row(j) + off;
                    const double prob = prob_mat.at(i, j);
                    for (size_t c = 0; c < hd; ++c) dvj[c] += prob * da_i[c];
                }
                for (size_t j = 0; j <= i; ++j) {
                    const double dscore = prob_mat.at(i, j) * (dp[j] - dot_pp) * scale;
                    double* dqi = dq.row(i) + off;
                    double* dkj = dk.row(j) + off;
                    const double* kj = ctx.k.row(j) + off;
                    const double* qi = ctx.q.row(i) + off;
                    for (size_t c = 0; c < hd; ++c) {
                        dqi[c] += dscore * kj[c];
                        dkj[c] += dscore * qi[c];
                    }
                }
            }
        }
        rope_rows_d(dq, hd, 0, -1.0);
        rope_rows_d(dk, hd, 0, -1.0);
        add_into(gl.wq, matmul(transpose(ctx.norm_a), dq));
        add_into(gl.wk, matmul(transpose(ctx.norm_a), dk));
        add_into(gl.wv, matmul(transpose(ctx.norm_a), dv));
        MatrixD da = matmul(dq, transpose(pl.wq));
        add_into(da, matmul(dk, transpose(pl.wk)));
        add_into(da, matmul(dv, transpose(pl.wv)));

        MatrixD dx_prev = dx_mid;  // residual connection
        rmsnorm_gain_grad(ctx.x_attn_in, ctx.inv_a, da, gl.attn_norm);
        rmsnorm_backward_d(ctx.x_attn_in, pl.attn_norm.row(0), ctx.inv_a, da, dx_prev);
        dx = std::move(dx_prev);
    }

    for (size_t i = 0; i < s_len; ++i) {
        double* erow = g.embedding.row(size_t(ctx_tokens[i]));
        const double* dxr = dx.row(i);
        for (size_t c = 0; c < cfg.d_model; ++c) erow[c] += dxr[c];
    }
}

// Mean cross-entropy over the given docs, gradients optional. The head is
// the transposed embedding, so its pullback lands there too.
double loss_grads_impl(const ModelConfig& cfg, const ModelParams& p,
                       const std::vector<const TokenSequence*>& docs, ModelParams* grads) {
    size_t n_positions = 0;
    for (const TokenSequence* doc : docs) n_positions += doc->size() - 1;
    const double inv_n = 1.0 / double(n_positions);

    const MatrixD& emb = p.embedding;
    const size_t vocab = emb.rows;
    double loss_sum = 0.0;
    std::vector<double> logits(vocab);

    for (const TokenSequence* doc : docs) {
        const TokenSequence ctx_tokens(doc->begin(), doc->end() - 1);
        const size_t t_len = ctx_tokens.size();
        std::vector<BlockCtx> ctxs;
        MatrixD x_final;
        std::vector<double> inv_final;
        const MatrixD h = forward_doc(cfg, p, ctx_tokens, grads ? &ctxs : nullptr,
                                      grads ? &x_final : nullptr, grads ? &inv_final : nullptr);

        MatrixD dh;
        if (grads) dh = MatrixD(t_len, cfg.d_model);
        for (size_t i = 0; i < t_len; ++i) {
            const double* hi = h.row(i);
            const size_t target = size_t((*doc)[i + 1]);
            double max_logit = -1e300;
            for (size_t v = 0; v < vocab; ++v) {
                double dot = 0.0;
                const double* ev = emb.row(v);
                for (size_t c = 0; c < cfg.d_model; ++c) dot += hi[c] * ev[c];
                logits[v] = dot;
                max_logit = std::max(max_logit, dot);
            }
            double denom = 0.0;
            for (size_t v = 0; v < vocab; ++v) denom += std::exp(logits[v] - max_logit);
            loss_sum -= logits[target] - max_logit - std::log(denom);
            if (!grads) continue;
            double* dhi = dh.row(i);
            for (size_t v = 0; v < vocab; ++v) {
                double dlogit = std::exp(logits[v] - max_logit) / denom;
                if (v == target) dlogit -= 1.0;
                dlogit *= inv_n;
                const double* ev = emb.row(v);
                double* gv = grads->embedding.row(v);
                for (size_t c = 0; c < cfg.d_model; ++c) {
                    dhi[c] += dlogit * ev[c];
                    gv[c] += dlogit * hi[c];
                }
            }
        }
        if (grads) backward_doc(cfg, p, ctx_tokens, ctxs, x_final, inv_final, dh, *grads);
    }
    return loss_sum * inv_n;
}

}  // namespace

std::vector<MatrixD*> ModelParams::tensors() {
    std::vector<MatrixD*> out;
    out.push_back(&embedding);
    for (Layer& l : layers)
        for (MatrixD* m :
             {&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w_gate, &l.w_in, &l.w_out})
            out.push_back(m);
    out.push_back(&final_norm);
    return out;
}

std::vector<const MatrixD*> ModelParams::tensors() const {
    auto mutable_list = const_cast<ModelParams*>(this)->tensors();
    return std::vector<const MatrixD*>(mutable_list.begin(), mutable_list.end());
}

ModelParams widen_params(const ModelWeights& w) {
    ModelParams p;
    p.embedding = widen(w.embedding);
    p.layers.reserve(w.layers.size());
    for (const LayerWeights& l : w.layers)
        p.layers.push_back({widen_gain(l.attn_norm), widen(l.attn.wq), widen(l.attn.wk),
                            widen(l.attn.wv), widen(l.attn.wo), widen_gain(l.ffn_norm),
                            widen(l.ffn.w_gate), widen(l.ffn.w_in), widen(l.ffn.w_out)});
    p.final_norm = widen_gain(w.final_norm);
    return p;
}

ModelWeights narrow_params(const ModelParams& p, const ModelConfig& config) {
    ModelWeights w;
    w.config = config;
    w.embedding = narrow(p.embedding);
    w.layers.resize(p.layers.size());
    for (size_t l = 0; l < p.layers.size(); ++l) {
        const ModelParams::Layer& pl = p.layers[l];
        LayerWeights& lw = w.layers[l];
        lw.attn = {narrow(pl.wq), narrow(pl.wk), narrow(pl.wv), narrow(pl.wo)};
        lw.ffn = {narrow(pl.w_gate), narrow(pl.w_in), narrow(pl.w_out)};
        lw.attn_norm = narrow_gain(pl.attn_norm);
        lw.ffn_norm = narrow_gain(pl.ffn_norm);
    }
    w.final_norm = narrow_gain(p.final_norm);
    return w;
}

ModelParams zeros_like(const ModelParams& p) {
    ModelParams z;
    z.embedding = MatrixD(p.embedding.rows, p.embedding.cols);
    z.layers.resize(p.layers.size());
    for (size_t l = 0; l < p.layers.size(); ++l) {
        const ModelParams::Layer& pl = p.layers[l];
        ModelParams::Layer& zl = z.layers[l];
        zl.attn_norm = MatrixD(pl.attn_norm.rows, pl.attn_norm.cols);
        zl.wq = MatrixD(pl.wq.rows, pl.wq.cols);
        zl.wk = MatrixD(pl.wk.rows, pl.wk.cols);
        zl.wv = MatrixD(pl.wv.rows, pl.wv.cols);
        zl.wo = MatrixD(pl.wo.rows, pl.wo.cols);
        zl.ffn_norm = MatrixD(pl.ffn_norm.rows, pl.ffn_norm.cols);
        zl.w_gate = MatrixD(pl.w_gate.rows, pl.w_gate.cols);
        zl.w_in = MatrixD(pl.w_in.rows, pl.w_in.cols);
        zl.w_out = MatrixD(pl.w_out.rows, pl.w_out.cols);
    }
    z.final_norm = MatrixD(p.final_norm.rows, p.final_norm.cols);
    return z;
}

double next_token_loss_grads(const ModelConfig& config, const ModelParams& params,
                             const std::vector<TokenSequence>& docs, ModelParams* grads) {
    config.validate();
    return loss_grads_impl(config, params, usable_docs(config, docs), grads);
}

double next_token_loss(const ModelWeights& weights, const std::vector<TokenSequence>& docs) {
    return next_token_loss_grads(weights.config, widen_params(weights), docs, nullptr);
}

TrainConfig pretrain_defaults() {
    TrainConfig cfg;
    cfg.lr = 3e-4;
    cfg.batch_size = 8;
    cfg.epochs = 4;
    return cfg;
}

ModelWeights pretrain(const ModelConfig& config, const std::vector<TokenSequence>& docs,
                      const TrainConfig& cfg, const TrainLogger& logger) {
    config.validate();
    cfg.validate();
    const std::vector<const TokenSequence*> all_docs = usable_docs(config, docs);
    const size_t n_docs = all_docs.size();
    const size_t steps_per_epoch = (n_docs + cfg.batch_size - 1) / cfg.batch_size;
    const size_t total_steps = steps_per_epoch * cfg.epochs;

    ModelParams params = widen_params(init_random_weights(config));
    ModelParams grads = zeros_like(params);
    const std::vector<MatrixD*> param_list = params.tensors();
    const std::vector<MatrixD*> grad_list = grads.tensors();
    std::vector<AdamState> states(param_list.size());

    ModelParams best = params;
    double best_loss = loss_grads_impl(config, params, all_docs, nullptr);

    Rng rng(cfg.seed ^ 0x3a9cb5e1ULL);
    std::vector<size_t> order(n_docs);
    size_t global_step = 0;
    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (size_t i = 0; i < n_docs; ++i) order[i] = i;
        Rng erng = rng.fork(epoch + 1);
        for (size_t i = n_docs; i > 1; --i) std::swap(order[i - 1], order[erng.below(i)]);

        for (size_t start = 0; start < n_docs; start += cfg.batch_size) {
            const size_t stop = std::min(start + cfg.batch_size, n_docs);
            std::vector<const TokenSequence*> batch;
            batch.reserve(stop - start);
            for (size_t i = start; i < stop; ++i) batch.push_back(all_docs[order[i]]);

            for (MatrixD* g : grad_list) std::fill(g->data.begin(), g->data.end(), 0.0);
            const double loss = loss_grads_impl(config, params, batch, &grads);
            if (!std::isfinite(loss))
                throw NumericError("pretraining diverged; reduce the learning rate");
            const double lr = scheduled_lr(cfg, global_step, total_steps);
            for (size_t t = 0; t < param_list.size(); ++t)
                adam_step(*param_list[t], *grad_list[t], states[t], lr, cfg);
            if (logger) logger(TrainRecord{global_step, size_t(-1), loss, loss, lr});
            ++global_step;
        }

        const double epoch_loss = loss_grads_impl(config, params, all_docs, nullptr);
        if (!std::isfinite(epoch_loss))
            throw NumericError("pretraining diverged; reduce the learning rate");
        if (epoch_loss < best_loss) {
            best_loss = epoch_loss;
            best = params;
        }
    }
    return narrow_params(best, config);
}

}  // namespace caprese
