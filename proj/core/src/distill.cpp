#include "caprese/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <mutex>
#include <thread>
#include <utility>

#include "caprese/errors.hpp"
#include "caprese/linalg.hpp"
#include "double_math.hpp"

namespace caprese {

namespace {

using detail::dsilu_d;
using detail::embed_rows_d;
using detail::rmsnorm_backward_d;
using detail::rmsnorm_d;
using detail::rope_rows_d;
using detail::silu_d;

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
    MatrixD s_lin;               // f W_g
    MatrixD u_lin;               // f W_1
    MatrixD gate_act;            // silu(s), pre-threshold
    std::vector<uint8_t> keep;   // cats keep mask over s_lin entries
    MatrixD z;
    MatrixD t_res;               // f L
};

struct DoubleLayer {
    MatrixD wq, wk, wv, wo;
};

struct DoubleWeights {
    MatrixD embedding;
    std::vector<DoubleLayer> layers;
};

DoubleWeights widen_weights(const ModelWeights& w) {
    DoubleWeights dw;
    dw.embedding = widen(w.embedding);
    dw.layers.reserve(w.layers.size());
    for (const LayerWeights& l : w.layers)
        dw.layers.push_back({widen(l.attn.wq), widen(l.attn.wk), widen(l.attn.wv),
                             widen(l.attn.wo)});
    return dw;
}

// Student decoder forward in double; `l`/`r` entries may be null for layers
// without a residual. Returns the final post-norm embedding.
MatrixD student_forward(const ModelWeights& w, const DoubleWeights& dw,
                        const std::vector<StudentBlock>& blocks,
                        const std::vector<const MatrixD*>& l_mats,
                        const std::vector<const MatrixD*>& r_mats, const TokenSequence& tokens,
                        std::vector<BlockCtx>* ctxs, MatrixD* x_final_out,
                        std::vector<double>* inv_final_out) {
    const ModelConfig& cfg = w.config;
    const size_t s_len = tokens.size();
    const size_t hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(double(hd));
    MatrixD x = embed_rows_d(tokens, dw.embedding);
    if (ctxs) ctxs->assign(cfg.n_layers, BlockCtx{});

    for (size_t l = 0; l < cfg.n_layers; ++l) {
        const DoubleLayer& dl = dw.layers[l];
        BlockCtx local;
        BlockCtx& ctx = ctxs ? (*ctxs)[l] : local;
        ctx.x_attn_in = x;
        ctx.norm_a = rmsnorm_d(x, w.layers[l].attn_norm.data(), &ctx.inv_a);
        ctx.q = matmul(ctx.norm_a, dl.wq);
        ctx.k = matmul(ctx.norm_a, dl.wk);
        ctx.v = matmul(ctx.norm_a, dl.wv);
        rope_rows_d(ctx.q, hd, 0, 1.0);
        rope_rows_d(ctx.k, hd, 0, 1.0);

        ctx.attn_cat = MatrixD(s_len, cfg.d_model);
        ctx.probs.assign(cfg.n_heads, MatrixD(s_len, s_len));
        for (size_t h = 0; h < cfg.n_heads; ++h) {
            const size_t off = h * hd;
            MatrixD& p = ctx.probs[h];
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
                    p.at(i, j) = prob;
                    const double* vj = ctx.v.row(j) + off;
                    for (size_t c = 0; c < hd; ++c) out[c] += prob * vj[c];
                }
            }
        }
        const MatrixD attn_out = matmul(ctx.attn_cat, dl.wo);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += attn_out.data[i];

        ctx.x_ffn_in = x;
        ctx.norm_f = rmsnorm_d(x, w.layers[l].ffn_norm.data(), &ctx.inv_f);
        const StudentBlock& blk = blocks[l];
        ctx.s_lin = matmul(ctx.norm_f, blk.w_gate);
        ctx.u_lin = matmul(ctx.norm_f, blk.w_in);
        ctx.gate_act = MatrixD(ctx.s_lin.rows, ctx.s_lin.cols);
        ctx.z = MatrixD(ctx.s_lin.rows, ctx.s_lin.cols);
        ctx.keep.assign(ctx.s_lin.size(), 1);
        for (size_t i = 0; i < ctx.s_lin.size(); ++i) {
            const double g = silu_d(ctx.s_lin.data[i]);
            ctx.gate_act.data[i] = g;
            if (blk.tau && std::fabs(g) <= *blk.tau) {
                ctx.keep[i] = 0;
                ctx.z.data[i] = 0.0;
            } else {
                ctx.z.data[i] = g * ctx.u_lin.data[i];
            }
        }
        MatrixD y = matmul(ctx.z, blk.w_out);
        if (blk.has_residual) {
            ctx.t_res = matmul(ctx.norm_f, *l_mats[l]);
            const MatrixD res = matmul(ctx.t_res, *r_mats[l]);
            for (size_t i = 0; i < y.size(); ++i) y.data[i] += res.data[i];
        }
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += y.data[i];
    }
    std::vector<double> inv_final;
    MatrixD e = rmsnorm_d(x, w.final_norm.data(), &inv_final);
    if (x_final_out) *x_final_out = std::move(x);
    if (inv_final_out) *inv_final_out = std::move(inv_final);
    return e;
}

// Accumulates dL/dL_l and dL/dR_l for upstream de (gradient at the final
// embedding); frozen weights only ever appear transposed.
void student_backward(const ModelWeights& w, const DoubleWeights& dw,
                      const std::vector<StudentBlock>& blocks,
                      const std::vector<const MatrixD*>& l_mats,
                      const std::vector<const MatrixD*>& r_mats,
                      const std::vector<BlockCtx>& ctxs, const MatrixD& x_final,
                      const std::vector<double>& inv_final, const MatrixD& de,
                      std::vector<MatrixD>& grad_l, std::vector<MatrixD>& grad_r) {
    const ModelConfig& cfg = w.config;
    const size_t s_len = x_final.rows;
    const size_t hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(double(hd));

    MatrixD dx(s_len, cfg.d_model);
    rmsnorm_backward_d(x_final, w.final_norm.data(), inv_final, de, dx);

    for (size_t li = cfg.n_layers; li > 0; --li) {
        const size_t l = li - 1;
        const BlockCtx& ctx = ctxs[l];
        const StudentBlock& blk = blocks[l];
        const DoubleLayer& dl = dw.layers[l];

        // FFN sublayer: x_next = x_ffn_in + y(norm_f).
        const MatrixD& dy = dx;
        MatrixD df(s_len, cfg.d_model);
        if (blk.has_residual) {
            const MatrixD& lm = *l_mats[l];
            const MatrixD& rm = *r_mats[l];
            // y_res = (f L) R
            const MatrixD dt = matmul(dy, transpose(rm));
            const MatrixD gr = matmul(transpose(ctx.t_res), dy);
            for (size_t i = 0; i < gr.size(); ++i) grad_r[l].data[i] += gr.data[i];
            const MatrixD gl = matmul(transpose(ctx.norm_f), dt);
            for (size_t i = 0; i < gl.size(); ++i) grad_l[l].data[i] += gl.data[i];
            const MatrixD df_res = matmul(dt, transpose(lm));
            for (size_t i = 0; i < df.size(); ++i) df.data[i] += df_res.data[i];
        }
        MatrixD dz = matmul(dy, transpose(blk.w_out));
        MatrixD ds(dz.rows, dz.cols);
        MatrixD du(dz.rows, dz.cols);
        for (size_t i = 0; i < dz.size(); ++i) {
            if (!ctx.keep[i]) {
                ds.data[i] = 0.0;
                du.data[i] = 0.0;
                continue;
            }
            du.data[i] = ctx.gate_act.data[i] * dz.data[i];
            ds.data[i] = dsilu_d(ctx.s_lin.data[i]) * ctx.u_lin.data[i] * dz.data[i];
        }
        const MatrixD df_u = matmul(du, transpose(blk.w_in));
        const MatrixD df_s = matmul(ds, transpose(blk.w_gate));
        for (size_t i = 0; i < df.size(); ++i) df.data[i] += df_u.data[i] + df_s.data[i];

        MatrixD dx_mid = dx;  // residual connection
        rmsnorm_backward_d(ctx.x_ffn_in, w.layers[l].ffn_norm.data(), ctx.inv_f, df, dx_mid);

        // Attention sublayer: x_mid = x_attn_in + Wo(attn(norm_a)).
        const MatrixD dattn = matmul(dx_mid, transpose(dl.wo));
        MatrixD dq(s_len, cfg.d_model), dk(s_len, cfg.d_model), dv(s_len, cfg.d_model);
        for (size_t h = 0; h < cfg.n_heads; ++h) {
            const size_t off = h * hd;
            const MatrixD& p = ctx.probs[h];
            for (size_t i = 0; i < s_len; ++i) {
                const double* da_i = dattn.row(i) + off;
                std::vector<double> dp(i + 1);
                double dot_pp = 0.0;
                for (size_t j = 0; j <= i; ++j) {
                    double dot = 0.0;
                    const double* vj = ctx.v.row(j) + off;
                    for (size_t c = 0; c < hd; ++c) dot += da_i[c] * vj[c];
                    dp[j] = dot;
                    dot_pp += dot * p.at(i, j);
                    double* dvj = dv.row(j) + off;
                    const double prob = p.at(i, j);
                    for (size_t c = 0; c < hd; ++c) dvj[c] += prob * da_i[c];
                }
                for (size_t j = 0; j <= i; ++j) {
                    const double dscore = p.at(i, j) * (dp[j] - dot_pp) * scale;
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
        MatrixD da = matmul(dq, transpose(dl.wq));
        const MatrixD da_k = matmul(dk, transpose(dl.wk));
        const MatrixD da_v = matmul(dv, transpose(dl.wv));
        for (size_t i = 0; i < da.size(); ++i) da.data[i] += da_k.data[i] + da_v.data[i];

        MatrixD dx_prev = dx_mid;  // residual connection
        rmsnorm_backward_d(ctx.x_attn_in, w.layers[l].attn_norm.data(), ctx.inv_a, da, dx_prev);
        dx = std::move(dx_prev);
    }
}

std::vector<float> pooled_layer_gate(const std::vector<std::vector<FfnTrace>>& traces,
                                     size_t layer) {
    std::vector<float> flat;
    for (const auto& sample : traces) {
        const Matrix& g = sample[layer].gate;
        flat.insert(flat.end(), g.data.begin(), g.data.end());
    }
    return flat;
}

// Original-model traces per sample, plus per-layer CATS thresholds calibrated
// on the pooled gate activations.
struct CaptureState {
    std::vector<std::vector<FfnTrace>> traces;  // [sample][layer]
    std::vector<CatsThreshold> cats;            // per layer, cats specs only
};

CaptureState run_capture(const ModelWeights& model, const CompressionSpec& spec,
                         const std::vector<DistillSample>& samples) {
    spec.validate();
    if (samples.empty()) throw DomainError("capture: no samples");
    CaptureState st;
    FullFfnBackend full(model);
    st.traces.resize(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        KvCache cache(model.config);
        model_forward(samples[i].tokens, model, cache, full, &st.traces[i]);
    }
    if (spec.variant == CompressionVariant::cats) {
        const LayerRange range = spec.resolve_range(model.config.n_layers);
        st.cats.resize(model.config.n_layers);
        for (size_t l = range.begin; l < range.end; ++l) {
            const std::vector<float> flat = pooled_layer_gate(st.traces, l);
            Matrix g(1, flat.size(), flat);
            st.cats[l] = cats_calibrate(g, spec.sparsity, l);
        }
    }
    return st;
}

// The compressed forward F̂F for one layer of one sample, from its trace.
Matrix compressed_rows_for(const ModelWeights& model, const CompressionSpec& spec,
                           const CaptureState& st, size_t sample, size_t layer) {
    const FfnTrace& tr = st.traces[sample][layer];
    const GatedFfnWeights& w = model.layers[layer].ffn;
    switch (spec.variant) {
        case CompressionVariant::griffin: {
            const size_t k = griffin_k(spec.sparsity, model.config.d_ff);
            const GriffinFfn g = griffin_compress(w, griffin_metric(tr.z), k, layer);
            return griffin_forward_rows(tr.x, g);
        }
        case CompressionVariant::cats:
            return cats_forward_rows(tr.x, w, st.cats[layer].tau);
        case CompressionVariant::quant: {
            const QuantizedFfn q = quantize_ffn(w, spec.bits);
            GatedFfnWeights dq;
            dq.w_gate = dequantize_matrix(q.w_gate);
            dq.w_in = dequantize_matrix(q.w_in);
            dq.w_out = dequantize_matrix(q.w_out);
            return ffn_forward_rows(tr.x, dq);
        }
        case CompressionVariant::none:
            return tr.y;
    }
    throw ConfigError("capture: unknown variant");
}

struct ShuffledBatches {
    std::vector<size_t> order;
    size_t batch_size;
    size_t count() const { return (order.size() + batch_size - 1) / batch_size; }
};

ShuffledBatches shuffle_epoch(size_t n, size_t batch_size, Rng& rng) {
    ShuffledBatches b;
    b.order.resize(n);
    for (size_t i = 0; i < n; ++i) b.order[i] = i;
    for (size_t i = n; i > 1; --i) std::swap(b.order[i - 1], b.order[rng.below(i)]);
    b.batch_size = batch_size;
    return b;
}

}  // namespace

std::vector<DistillSample> make_distill_samples(const std::vector<std::string>& texts,
                                                const std::string& instruction_prefix,
                                                const ModelConfig& config) {
    std::vector<DistillSample> out;
    out.reserve(texts.size());
    for (const std::string& t : texts) {
        DistillSample s;
        s.tokens = encode_bytes(instruction_prefix + t);
        if (s.tokens.empty()) throw DomainError("distill sample: empty after encoding");
        if (s.tokens.size() > config.max_seq)
            throw CapacityError("distill sample: longer than max_seq");
        out.push_back(std::move(s));
    }
    return out;
}

LayerDataset capture_layer_data(const ModelWeights& model, const CompressionSpec& spec,
                                const std::vector<DistillSample>& samples) {
    const CaptureState st = run_capture(model, spec, samples);
    const size_t n_layers = model.config.n_layers;
    const LayerRange range = spec.resolve_range(n_layers);
    size_t total = 0;
    for (const auto& tr : st.traces) total += tr[0].x.rows;

    LayerDataset data;
    data.x.assign(n_layers, Matrix());
    data.y.assign(n_layers, Matrix());
    for (size_t l = 0; l < n_layers; ++l) {
        Matrix x(total, model.config.d_model);
        Matrix y(total, model.config.d_model);
        size_t row = 0;
        for (size_t s = 0; s < samples.size(); ++s) {
            const FfnTrace& tr = st.traces[s][l];
            std::copy(tr.x.data.begin(), tr.x.data.end(), x.row(row));
            if (range.contains(l) && spec.variant != CompressionVariant::none) {
                const Matrix approx = compressed_rows_for(model, spec, st, s, l);
                for (size_t i = 0; i < tr.y.size(); ++i)
                    y.data[row * y.cols + i] = tr.y.data[i] - approx.data[i];
            }  // outside the range the residual is identically zero
            row += tr.x.rows;
        }
        data.x[l] = std::move(x);
        data.y[l] = std::move(y);
    }
    return data;
}

CapreseLayer rrr_oracle(const Matrix& x, const Matrix& y, size_t rank, double ridge) {
    if (x.rows != y.rows) throw ShapeError("rrr_oracle: row mismatch");
    if (rank < 1 || rank > std::min(x.cols, y.cols))
        throw ShapeError("rrr_oracle: rank out of range");
    const MatrixD xd = widen(x);
    const MatrixD yd = widen(y);
    const MatrixD xtx = matmul(transpose(xd), xd);
    const MatrixD xty = matmul(transpose(xd), yd);

    MatrixD b_ols;
    if (ridge < 0.0) {
        try {
            b_ols = solve_spd(xtx, xty, 0.0);
        } catch (const NumericError&) {
            double trace = 0.0;
            for (size_t i = 0; i < xtx.rows; ++i) trace += xtx.at(i, i);
            b_ols = solve_spd(xtx, xty, 1e-6 * trace / double(xtx.rows));
        }
    } else if (ridge == 0.0) {
        try {
            b_ols = solve_spd(xtx, xty, 0.0);
        } catch (const NumericError&) {
            throw NumericError("rrr_oracle: singular X^T X; pass a positive ridge");
        }
    } else {
        b_ols = solve_spd(xtx, xty, ridge);
    }

    MatrixD b_r;
    if (rank >= std::min(y.cols, b_ols.rows)) {
        b_r = b_ols;  // full-rank limit: plain least squares
    } else {
        const MatrixD xb = matmul(xd, b_ols);
        const SvdResultD svd = truncated_svd(xb, rank);
        // B_r = B_ols V_r V_r^T.
        b_r = matmul(matmul(b_ols, svd.v), transpose(svd.v));
    }

    // Any rank-r factorization works; take it from the SVD of B_r.
    const SvdResultD fac = truncated_svd(b_r, rank);
    CapreseLayer layer;
    layer.l = Matrix(b_r.rows, rank);
    layer.r = Matrix(rank, b_r.cols);
    for (size_t i = 0; i < b_r.rows; ++i)
        for (size_t j = 0; j < rank; ++j)
            layer.l.at(i, j) = float(fac.u.at(i, j) * fac.singular_values[j]);
    for (size_t j = 0; j < rank; ++j)
        for (size_t c = 0; c < b_r.cols; ++c) layer.r.at(j, c) = float(fac.v.at(c, j));
    return layer;
}

double residual_mse(const Matrix& x, const Matrix& y, const CapreseLayer& layer) {
    if (x.rows != y.rows) throw ShapeError("residual_mse: row mismatch");
    const MatrixD pred = matmul(matmul(widen(x), widen(layer.l)), widen(layer.r));
    double sum = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const double d = pred.data[i] - double(y.data[i]);
        sum += d * d;
    }
    return sum / (double(y.rows) * double(y.cols));
}

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
    if (batch_size == 0) throw ConfigError("train: batch size must be positive");
    if (epochs == 0) throw ConfigError("train: epochs must be positive");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
        throw ConfigError("train: warmup fraction in [0, 1)");
    if (workers == 0) throw ConfigError("train: workers must be positive");
}

double scheduled_lr(const TrainConfig& cfg, size_t step, size_t total_steps) {
    const size_t warmup = std::max<size_t>(1, size_t(std::ceil(cfg.warmup_fraction *
                                                               double(total_steps))));
    if (step < warmup) return cfg.lr * double(step + 1) / double(warmup);
    if (total_steps <= warmup) return cfg.lr;
    return cfg.lr * double(total_steps - step) / double(total_steps - warmup);
}

void adam_step(MatrixD& param, const MatrixD& grad, AdamState& state, double lr,
               const TrainConfig& cfg) {
    if (!param.same_shape(grad)) throw ShapeError("adam: gradient shape mismatch");
    if (state.m.size() == 0) {
        state.m = MatrixD(param.rows, param.cols);
        state.v = MatrixD(param.rows, param.cols);
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
    for (size_t i = 0; i < param.size(); ++i) {
        const double g = grad.data[i];
        state.m.data[i] = cfg.beta1 * state.m.data[i] + (1.0 - cfg.beta1) * g;
        state.v.data[i] = cfg.beta2 * state.v.data[i] + (1.0 - cfg.beta2) * g * g;
        const double mh = state.m.data[i] / bc1;
        const double vh = state.v.data[i] / bc2;
        param.data[i] -= lr * mh / (std::sqrt(vh) + cfg.eps);
    }
}

namespace {

// Adam on one block's (L, R) against its captured residuals. Keeps the best
// epoch-end parameters so the returned loss never regresses past init.
CapreseLayer train_one_block(const Matrix& x, const Matrix& y, size_t rank,
                             const TrainConfig& cfg, size_t layer, const TrainLogger& logger,
                             std::mutex* log_mutex) {
    const size_t n = x.rows;
    const size_t d_in = x.cols;
    const size_t d_out = y.cols;
    Rng rng(cfg.seed ^ (0x1a2b3c4dULL + layer));
    Rng init_rng = rng.fork(0);
    CapreseLayer seed_layer = init_caprese_layer(d_in, rank, init_rng);
    MatrixD l = widen(seed_layer.l);
    MatrixD r = widen(seed_layer.r);  // zero
    const MatrixD xd = widen(x);
    const MatrixD yd = widen(y);

    AdamState st_l, st_r;
    const size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const size_t total_steps = cfg.epochs * steps_per_epoch;

    auto full_loss = [&](const MatrixD& lm, const MatrixD& rm) {
        const MatrixD pred = matmul(matmul(xd, lm), rm);
        double sum = 0.0;
        for (size_t i = 0; i < pred.size(); ++i) {
            const double d = pred.data[i] - yd.data[i];
            sum += d * d;
        }
        return sum / (double(n) * double(d_out));
    };

    double best_loss = full_loss(l, r);
    MatrixD best_l = l, best_r = r;
    size_t step = 0;
    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng erng = rng.fork(epoch + 1);
        const ShuffledBatches batches = shuffle_epoch(n, cfg.batch_size, erng);
        for (size_t b = 0; b < batches.count(); ++b) {
            const size_t lo = b * cfg.batch_size;
            const size_t hi = std::min(n, lo + cfg.batch_size);
            const size_t nb = hi - lo;
            MatrixD xb(nb, d_in), yb(nb, d_out);
            for (size_t i = 0; i < nb; ++i) {
                const size_t src = batches.order[lo + i];
                std::copy(xd.row(src), xd.row(src) + d_in, xb.row(i));
                std::copy(yd.row(src), yd.row(src) + d_out, yb.row(i));
            }
            const MatrixD t = matmul(xb, l);
            MatrixD err = matmul(t, r);
            double loss = 0.0;
            for (size_t i = 0; i < err.size(); ++i) {
                err.data[i] -= yb.data[i];
                loss += err.data[i] * err.data[i];
            }
            const double inv_n = 2.0 / (double(nb) * double(d_out));
            loss /= double(nb) * double(d_out);
            if (!std::isfinite(loss))
                throw NumericError("layer-wise training diverged; reduce the learning rate");
            MatrixD grad_r = matmul(transpose(t), err);
            MatrixD grad_l = matmul(transpose(xb), matmul(err, transpose(r)));
            for (double& g : grad_r.data) g *= inv_n;
            for (double& g : grad_l.data) g *= inv_n;
            const double lr = scheduled_lr(cfg, step, total_steps);
            adam_step(l, grad_l, st_l, lr, cfg);
            adam_step(r, grad_r, st_r, lr, cfg);
            ++step;
        }
        const double epoch_loss = full_loss(l, r);
        if (!std::isfinite(epoch_loss))
            throw NumericError("layer-wise training diverged; reduce the learning rate");
        if (epoch_loss < best_loss) {
            best_loss = epoch_loss;
            best_l = l;
            best_r = r;
        }
        if (logger) {
            TrainRecord rec{step, layer, epoch_loss, epoch_loss * double(d_out),
                            scheduled_lr(cfg, step ? step - 1 : 0, total_steps)};
            if (log_mutex) {
                std::lock_guard<std::mutex> lock(*log_mutex);
                logger(rec);
            } else {
                logger(rec);
            }
        }
    }
    CapreseLayer out;
    out.l = narrow(best_l);
    out.r = narrow(best_r);
    return out;
}

}  // namespace

std::vector<CapreseLayer> layerwise_distill_dataset(const LayerDataset& data, size_t rank,
                                                    const TrainConfig& cfg,
                                                    const TrainLogger& logger) {
    cfg.validate();
    if (data.layer_count() == 0) throw DomainError("layerwise distill: empty dataset");
    const size_t n_layers = data.layer_count();
    std::vector<CapreseLayer> out(n_layers);
    std::mutex log_mutex;
    std::exception_ptr first_error;
    std::mutex error_mutex;

    auto run_range = [&](size_t begin, size_t stride) {
        for (size_t l = begin; l < n_layers; l += stride) {
            try {
                out[l] = train_one_block(data.x[l], data.y[l], rank, cfg, l, logger,
                                         cfg.workers > 1 ? &log_mutex : nullptr);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    const size_t workers = std::min(cfg.workers, n_layers);
    if (workers <= 1) {
        run_range(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (size_t t = 0; t < workers; ++t) pool.emplace_back(run_range, t, workers);
        for (std::thread& t : pool) t.join();
    }
    if (first_error) std::rethrow_exception(first_error);
    return out;
}

std::vector<CapreseLayer> layerwise_distill(const ModelWeights& model, const CompressionSpec& spec,
                                            size_t rank, const std::vector<DistillSample>& samples,
                                            const TrainConfig& cfg, const TrainLogger& logger) {
    const LayerDataset data = capture_layer_data(model, spec, samples);
    return layerwise_distill_dataset(data, rank, cfg, logger);
}

std::vector<TeacherSignals> prepare_teacher_signals(const ModelWeights& model,
                                                    const CompressionSpec& spec,
                                                    const std::vector<DistillSample>& samples) {
    const CaptureState st = run_capture(model, spec, samples);
    const LayerRange range = spec.resolve_range(model.config.n_layers);
    const DoubleWeights dw = widen_weights(model);

    // Shared full/dequantized triples are widened once.
    std::vector<MatrixD> full_gate(model.config.n_layers), full_in(model.config.n_layers),
        full_out(model.config.n_layers);
    for (size_t l = 0; l < model.config.n_layers; ++l) {
        const GatedFfnWeights* w = &model.layers[l].ffn;
        GatedFfnWeights dq;
        if (spec.variant == CompressionVariant::quant && range.contains(l)) {
            const QuantizedFfn q = quantize_ffn(*w, spec.bits);
            dq.w_gate = dequantize_matrix(q.w_gate);
            dq.w_in = dequantize_matrix(q.w_in);
            dq.w_out = dequantize_matrix(q.w_out);
            w = &dq;
        }
        full_gate[l] = widen(w->w_gate);
        full_in[l] = widen(w->w_in);
        full_out[l] = widen(w->w_out);
    }

    std::vector<TeacherSignals> out(samples.size());
    std::vector<StudentBlock> teacher_blocks(model.config.n_layers);
    for (size_t l = 0; l < model.config.n_layers; ++l) {
        teacher_blocks[l].variant = CompressionVariant::none;
        if (spec.variant == CompressionVariant::quant && range.contains(l)) {
            // The teacher is always the original model.
            teacher_blocks[l].w_gate = widen(model.layers[l].ffn.w_gate);
            teacher_blocks[l].w_in = widen(model.layers[l].ffn.w_in);
            teacher_blocks[l].w_out = widen(model.layers[l].ffn.w_out);
        } else {
            teacher_blocks[l].w_gate = full_gate[l];
            teacher_blocks[l].w_in = full_in[l];
            teacher_blocks[l].w_out = full_out[l];
        }
    }

    for (size_t s = 0; s < samples.size(); ++s) {
        out[s].embedding = student_forward(model, dw, teacher_blocks, {}, {},
                                           samples[s].tokens, nullptr, nullptr, nullptr);
        out[s].blocks.resize(model.config.n_layers);
        for (size_t l = 0; l < model.config.n_layers; ++l) {
            StudentBlock& blk = out[s].blocks[l];
            blk.variant = CompressionVariant::none;
            blk.has_residual = false;
            if (range.contains(l) && spec.variant != CompressionVariant::none) {
                blk.variant = spec.variant;
                blk.has_residual = true;
            }
            if (blk.variant == CompressionVariant::griffin) {
                const size_t k = griffin_k(spec.sparsity, model.config.d_ff);
                const GriffinFfn g = griffin_compress(model.layers[l].ffn,
                                                      griffin_metric(st.traces[s][l].z), k, l);
                blk.w_gate = widen(g.gathered.w_gate);
                blk.w_in = widen(g.gathered.w_in);
                blk.w_out = widen(g.gathered.w_out);
            } else {
                blk.w_gate = full_gate[l];
                blk.w_in = full_in[l];
                blk.w_out = full_out[l];
                if (blk.variant == CompressionVariant::cats)
                    blk.tau = double(st.cats[l].tau);
            }
        }
    }
    return out;
}

double e2e_loss_and_grads(const ModelWeights& model, const std::vector<DistillSample>& samples,
                          const std::vector<TeacherSignals>& teacher,
                          const std::vector<MatrixD>& l, const std::vector<MatrixD>& r,
                          std::vector<MatrixD>* grad_l, std::vector<MatrixD>* grad_r) {
    if (samples.size() != teacher.size()) throw ShapeError("e2e: teacher/sample count mismatch");
    const size_t n_layers = model.config.n_layers;
    if (l.size() != n_layers || r.size() != n_layers)
        throw ShapeError("e2e: one (L, R) pair per layer required");
    const DoubleWeights dw = widen_weights(model);

    size_t total_positions = 0;
    for (const DistillSample& s : samples) total_positions += s.tokens.size();
    const double inv_norm = 1.0 / (double(total_positions) * double(model.config.d_model));

    if (grad_l) {
        grad_l->assign(n_layers, MatrixD());
        grad_r->assign(n_layers, MatrixD());
        for (size_t i = 0; i < n_layers; ++i) {
            (*grad_l)[i] = MatrixD(l[i].rows, l[i].cols);
            (*grad_r)[i] = MatrixD(r[i].rows, r[i].cols);
        }
    }

    std::vector<const MatrixD*> l_ptr(n_layers), r_ptr(n_layers);
    for (size_t i = 0; i < n_layers; ++i) {
        l_ptr[i] = &l[i];
        r_ptr[i] = &r[i];
    }

    double loss = 0.0;
    for (size_t s = 0; s < samples.size(); ++s) {
        std::vector<BlockCtx> ctxs;
        MatrixD x_final;
        std::vector<double> inv_final;
        const MatrixD e = student_forward(model, dw, teacher[s].blocks, l_ptr, r_ptr,
                                          samples[s].tokens, grad_l ? &ctxs : nullptr,
                                          grad_l ? &x_final : nullptr,
                                          grad_l ? &inv_final : nullptr);
        MatrixD de(e.rows, e.cols);
        const MatrixD& target = teacher[s].embedding;
        for (size_t i = 0; i < e.size(); ++i) {
            const double diff = e.data[i] - target.data[i];
            loss += diff * diff;
            de.data[i] = 2.0 * diff * inv_norm;
        }
        if (grad_l)
            student_backward(model, dw, teacher[s].blocks, l_ptr, r_ptr, ctxs, x_final,
                             inv_final, de, *grad_l, *grad_r);
    }
    return loss * inv_norm;
}

std::vector<CapreseLayer> e2e_distill(const ModelWeights& model, const CompressionSpec& spec,
                                      const std::vector<CapreseLayer>& init_layers,
                                      const std::vector<DistillSample>& samples,
                                      const TrainConfig& cfg, const TrainLogger& logger) {
    cfg.validate();
    if (init_layers.size() != model.config.n_layers)
        throw ShapeError("e2e: one init layer per block required");
    const std::vector<TeacherSignals> teacher = prepare_teacher_signals(model, spec, samples);

    std::vector<MatrixD> l(model.config.n_layers), r(model.config.n_layers);
    for (size_t i = 0; i < init_layers.size(); ++i) {
        l[i] = widen(init_layers[i].l);
        r[i] = widen(init_layers[i].r);
    }
    std::vector<AdamState> st_l(l.size()), st_r(r.size());
    Rng rng(cfg.seed ^ 0x50e2eULL);

    const size_t n = samples.size();
    const size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const size_t total_steps = cfg.epochs * steps_per_epoch;

    auto full_loss = [&]() {
        return e2e_loss_and_grads(model, samples, teacher, l, r, nullptr, nullptr);
    };

    double best_loss = full_loss();
    std::vector<MatrixD> best_l = l, best_r = r;
    size_t step = 0;
    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng erng = rng.fork(epoch + 1);
        const ShuffledBatches batches = shuffle_epoch(n, cfg.batch_size, erng);
        for (size_t b = 0; b < batches.count(); ++b) {
            const size_t lo = b * cfg.batch_size;
            const size_t hi = std::min(n, lo + cfg.batch_size);
            std::vector<DistillSample> batch_samples;
            std::vector<TeacherSignals> batch_teacher;
            for (size_t i = lo; i < hi; ++i) {
                batch_samples.push_back(samples[batches.order[i]]);
                batch_teacher.push_back(teacher[batches.order[i]]);
            }
            std::vector<MatrixD> gl, gr;
            const double loss =
                e2e_loss_and_grads(model, batch_samples, batch_teacher, l, r, &gl, &gr);
            if (!std::isfinite(loss))
                throw NumericError("e2e training diverged; reduce the learning rate");
            const double lr = scheduled_lr(cfg, step, total_steps);
            for (size_t i = 0; i < l.size(); ++i) {
                if (gl[i].size() == 0) continue;
                adam_step(l[i], gl[i], st_l[i], lr, cfg);
                adam_step(r[i], gr[i], st_r[i], lr, cfg);
            }
            ++step;
            if (logger) logger(TrainRecord{step, size_t(-1), loss,
                                           loss * double(model.config.d_model), lr});
        }
        const double epoch_loss = full_loss();
        if (!std::isfinite(epoch_loss))
            throw NumericError("e2e training diverged; reduce the learning rate");
        if (epoch_loss < best_loss) {
            best_loss = epoch_loss;
            best_l = l;
            best_r = r;
        }
    }
    std::vector<CapreseLayer> out(l.size());
    for (size_t i = 0; i < l.size(); ++i) {
        out[i].l = narrow(best_l[i]);
        out[i].r = narrow(best_r[i]);
    }
    return out;
}

double grad_check(const std::function<double()>& loss, std::vector<MatrixD*> params,
                  const std::vector<const MatrixD*>& analytic, double step, size_t max_coords,
                  uint64_t seed) {
    if (params.size() != analytic.size()) throw ShapeError("grad_check: param/grad mismatch");
    size_t total = 0;
    for (size_t p = 0; p < params.size(); ++p) {
        if (!params[p]->same_shape(*analytic[p]))
            throw ShapeError("grad_check: gradient shape mismatch");
        total += params[p]->size();
    }
    std::vector<size_t> coords(total);
    for (size_t i = 0; i < total; ++i) coords[i] = i;
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    const size_t n_check = std::min(total, max_coords);
    for (size_t i = 0; i < n_check; ++i)
        std::swap(coords[i], coords[i + rng.below(total - i)]);

    double max_rel = 0.0;
    for (size_t i = 0; i < n_check; ++i) {
        size_t c = coords[i];
        size_t p = 0;
        while (c >= params[p]->size()) c -= params[p++]->size();
        double& slot = params[p]->data[c];
        const double saved = slot;
        slot = saved + step;
        const double up = loss();
        slot = saved - step;
        const double down = loss();
        slot = saved;
        const double fd = (up - down) / (2.0 * step);
        const double g = analytic[p]->data[c];
        const double rel = std::fabs(fd - g) / std::max({std::fabs(fd), std::fabs(g), 1e-8});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

uint64_t model_weights_hash(const ModelWeights& w) {
    uint64_t h = hash_bytes("model", 5);
    auto mix_mat = [&h](const Matrix& m) {
        h = hash_combine(h, hash_bytes(m.data.data(), m.data.size() * sizeof(float)));
    };
    auto mix_vec = [&h](const std::vector<float>& v) {
        h = hash_combine(h, hash_bytes(v.data(), v.size() * sizeof(float)));
    };
    mix_mat(w.embedding);
    for (const LayerWeights& l : w.layers) {
        mix_mat(l.attn.wq);
        mix_mat(l.attn.wk);
        mix_mat(l.attn.wv);
        mix_mat(l.attn.wo);
        mix_mat(l.ffn.w_gate);
        mix_mat(l.ffn.w_in);
        mix_mat(l.ffn.w_out);
        mix_vec(l.attn_norm);
        mix_vec(l.ffn_norm);
    }
    mix_vec(w.final_norm);
    return h;
}

}  // namespace caprese
