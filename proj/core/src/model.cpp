#include "caprese/model.hpp"

#include <cmath>

#include "caprese/errors.hpp"
#include "caprese/rng.hpp"

namespace caprese {

void ModelConfig::validate() const {
    if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
    if (d_model == 0 || d_ff == 0) throw ConfigError("d_model and d_ff must be positive");
    if (n_layers == 0) throw ConfigError("n_layers must be positive");
    if (n_heads == 0 || d_model % n_heads != 0)
        throw ConfigError("d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) throw ConfigError("head dim must be even for rotary pairs");
    if (d_ff < d_model) throw ConfigError("d_ff must be at least d_model");
    if (max_seq == 0) throw ConfigError("max_seq must be positive");
}

ModelWeights init_random_weights(const ModelConfig& config) {
    config.validate();
    ModelWeights w;
    w.config = config;
    Rng base(config.rng_seed);

    const double attn_scale = 1.0 / std::sqrt(double(config.d_model));
    const double ffn_in_scale = 1.0 / std::sqrt(double(config.d_model));
    const double ffn_out_scale = 1.0 / std::sqrt(double(config.d_ff));

    Rng embed_rng = base.fork(0);
    w.embedding = Matrix(config.vocab_size, config.d_model);
    fill_normal(w.embedding, embed_rng, 1.0);

    w.layers.resize(config.n_layers);
    for (size_t l = 0; l < config.n_layers; ++l) {
        Rng rng = base.fork(l + 1);
        LayerWeights& layer = w.layers[l];
        for (Matrix* m : {&layer.attn.wq, &layer.attn.wk, &layer.attn.wv, &layer.attn.wo}) {
            *m = Matrix(config.d_model, config.d_model);
            fill_normal(*m, rng, attn_scale);
        }
        layer.ffn.w_gate = Matrix(config.d_model, config.d_ff);
        layer.ffn.w_in = Matrix(config.d_model, config.d_ff);
        layer.ffn.w_out = Matrix(config.d_ff, config.d_model);
        fill_normal(layer.ffn.w_gate, rng, ffn_in_scale);
        fill_normal(layer.ffn.w_in, rng, ffn_in_scale);
        fill_normal(layer.ffn.w_out, rng, ffn_out_scale);
        layer.attn_norm.assign(config.d_model, 1.0f);
        layer.ffn_norm.assign(config.d_model, 1.0f);
    }
    w.final_norm.assign(config.d_model, 1.0f);
    return w;
}

void KvCache::advance(size_t new_len) {
    if (new_len < len_) throw StateError("kv cache length may not shrink");
    if (new_len > max_seq_) throw CapacityError("kv cache full: sequence exceeds max_seq");
    len_ = new_len;
}

Matrix rmsnorm_rows(const Matrix& x, const std::vector<float>& gain) {
    if (gain.size() != x.cols) throw ShapeError("rmsnorm: gain length != width");
    Matrix out(x.rows, x.cols);
    for (size_t i = 0; i < x.rows; ++i) {
        const float* row = x.row(i);
        double mean_sq = 0.0;
        for (size_t j = 0; j < x.cols; ++j) mean_sq += double(row[j]) * double(row[j]);
        mean_sq /= double(x.cols);
        const double inv = 1.0 / std::sqrt(mean_sq + 1e-5);
        float* orow = out.row(i);
        for (size_t j = 0; j < x.cols; ++j)
            orow[j] = float(double(row[j]) * inv * double(gain[j]));
    }
    return out;
}

namespace {

inline float silu(float v) { return v / (1.0f + std::exp(-v)); }

// Rotates adjacent pairs of q/k lanes by pos-dependent angles, base 10000.
void apply_rope(float* vec, size_t d_model, size_t head_dim, size_t pos) {
    const size_t half = head_dim / 2;
    for (size_t start = 0; start < d_model; start += head_dim) {
        for (size_t i = 0; i < half; ++i) {
            const double angle =
                double(pos) * std::pow(10000.0, -2.0 * double(i) / double(head_dim));
            const float c = float(std::cos(angle));
            const float s = float(std::sin(angle));
            float& a = vec[start + 2 * i];
            float& b = vec[start + 2 * i + 1];
            const float a0 = a, b0 = b;
            a = a0 * c - b0 * s;
            b = a0 * s + b0 * c;
        }
    }
}

// row * W for one row vector; accumulation widens in verification mode.
void row_matmul(const float* row, const Matrix& w, float* out) {
    if (verification_mode()) {
        for (size_t j = 0; j < w.cols; ++j) out[j] = 0.0f;
        std::vector<double> acc(w.cols, 0.0);
        for (size_t k = 0; k < w.rows; ++k) {
            const double r = row[k];
            const float* wrow = w.row(k);
            for (size_t j = 0; j < w.cols; ++j) acc[j] += r * double(wrow[j]);
        }
        for (size_t j = 0; j < w.cols; ++j) out[j] = float(acc[j]);
        return;
    }
    for (size_t j = 0; j < w.cols; ++j) out[j] = 0.0f;
    for (size_t k = 0; k < w.rows; ++k) {
        const float r = row[k];
        const float* wrow = w.row(k);
        for (size_t j = 0; j < w.cols; ++j) out[j] += r * wrow[j];
    }
}

}  // namespace

Matrix ffn_forward_rows(const Matrix& x, const GatedFfnWeights& w, FfnTrace* trace) {
    if (x.cols != w.w_gate.rows) throw ShapeError("ffn: input width != D");
    if (w.w_in.rows != w.w_gate.rows || w.w_in.cols != w.w_gate.cols ||
        w.w_out.rows != w.w_gate.cols || w.w_out.cols != w.w_gate.rows)
        throw ShapeError("ffn: weight shapes inconsistent");
    Matrix gate = matmul(x, w.w_gate);
    for (float& v : gate.data) v = silu(v);
    Matrix z = matmul(x, w.w_in);
    for (size_t i = 0; i < z.size(); ++i) z.data[i] *= gate.data[i];
    Matrix y = matmul(z, w.w_out);
    if (trace) {
        trace->x = x;
        trace->gate = gate;
        trace->z = z;
        trace->y = y;
        trace->zero_fraction = 0.0;
    }
    return y;
}

std::vector<float> ffn_forward(const std::vector<float>& x, const GatedFfnWeights& w) {
    Matrix m(1, x.size(), x);
    return ffn_forward_rows(m, w, nullptr).data;
}

Matrix FullFfnBackend::forward(size_t layer, const Matrix& x, FfnTrace* trace) {
    if (layer >= weights_->layers.size()) throw ShapeError("ffn backend: layer out of range");
    return ffn_forward_rows(x, weights_->layers[layer].ffn, trace);
}

namespace {

// Shared causal pass; returns hidden states after the final norm (S x D).
Matrix forward_states(const TokenSequence& tokens, const ModelWeights& weights, KvCache& cache,
                      FfnBackend& ffn, std::vector<FfnTrace>* capture, size_t start_pos) {
    const ModelConfig& cfg = weights.config;
    if (tokens.empty()) throw DomainError("model_forward: empty token chunk");
    for (Token t : tokens)
        if (t < 0 || size_t(t) >= cfg.vocab_size)
            throw DomainError("model_forward: token id outside vocabulary");
    if (start_pos == kAppendPos) start_pos = cache.len();
    if (start_pos > cache.len())
        throw StateError("model_forward: start_pos would leave a cache gap");
    const size_t s = tokens.size();
    if (start_pos + s > cache.max_seq())
        throw CapacityError("model_forward: sequence exceeds max_seq");
    if (ffn.layer_count() != cfg.n_layers)
        throw ShapeError("model_forward: backend layer count != model layers");
    if (capture) {
        capture->clear();
        capture->resize(cfg.n_layers);
    }

    const size_t d = cfg.d_model;
    const size_t hd = cfg.head_dim();
    const float inv_sqrt_hd = 1.0f / std::sqrt(float(hd));

    Matrix x(s, d);
    for (size_t i = 0; i < s; ++i) {
        const float* erow = weights.embedding.row(size_t(tokens[i]));
        std::copy(erow, erow + d, x.row(i));
    }

    std::vector<float> q(d), scores, head_out(d);
    for (size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& layer = weights.layers[l];
        Matrix normed = rmsnorm_rows(x, layer.attn_norm);

        // Phase 1: project and cache K/V for every chunk row.
        for (size_t i = 0; i < s; ++i) {
            const size_t pos = start_pos + i;
            float* krow = cache.key_row(l, pos);
            float* vrow = cache.value_row(l, pos);
            row_matmul(normed.row(i), layer.attn.wk, krow);
            row_matmul(normed.row(i), layer.attn.wv, vrow);
            apply_rope(krow, d, hd, pos);
        }
        // Phase 2: causal attention per chunk row.
        for (size_t i = 0; i < s; ++i) {
            const size_t pos = start_pos + i;
            row_matmul(normed.row(i), layer.attn.wq, q.data());
            apply_rope(q.data(), d, hd, pos);
            for (size_t h = 0; h < cfg.n_heads; ++h) {
                const size_t off = h * hd;
                scores.assign(pos + 1, 0.0f);
                float max_score = -1e30f;
                for (size_t j = 0; j <= pos; ++j) {
                    const float* krow = cache.key_row(l, j) + off;
                    float dot = 0.0f;
                    for (size_t k = 0; k < hd; ++k) dot += q[off + k] * krow[k];
                    scores[j] = dot * inv_sqrt_hd;
                    max_score = std::max(max_score, scores[j]);
                }
                double denom = 0.0;
                for (size_t j = 0; j <= pos; ++j) {
                    scores[j] = std::exp(scores[j] - max_score);
                    denom += scores[j];
                }
                const float inv_denom = float(1.0 / denom);
                for (size_t k = 0; k < hd; ++k) head_out[off + k] = 0.0f;
                for (size_t j = 0; j <= pos; ++j) {
                    const float wgt = scores[j] * inv_denom;
                    const float* vrow = cache.value_row(l, j) + off;
                    for (size_t k = 0; k < hd; ++k) head_out[off + k] += wgt * vrow[k];
                }
            }
            std::vector<float> proj(d);
            row_matmul(head_out.data(), layer.attn.wo, proj.data());
            float* xrow = x.row(i);
            for (size_t k = 0; k < d; ++k) xrow[k] += proj[k];
        }

        Matrix ffn_in = rmsnorm_rows(x, layer.ffn_norm);
        FfnTrace* trace = capture ? &(*capture)[l] : nullptr;
        Matrix y = ffn.forward(l, ffn_in, trace);
        if (y.rows != s || y.cols != d) throw ShapeError("ffn backend returned bad shape");
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += y.data[i];
    }

    cache.advance(start_pos + s);
    return rmsnorm_rows(x, weights.final_norm);
}

}  // namespace

Matrix model_forward(const TokenSequence& tokens, const ModelWeights& weights, KvCache& cache,
                     FfnBackend& ffn, std::vector<FfnTrace>* capture, size_t start_pos) {
    Matrix states = forward_states(tokens, weights, cache, ffn, capture, start_pos);
    return matmul(states, transpose(weights.embedding));
}

Matrix final_embedding(const TokenSequence& tokens, const ModelWeights& weights, FfnBackend& ffn,
                       std::vector<FfnTrace>* capture) {
    KvCache cache(weights.config);
    return forward_states(tokens, weights, cache, ffn, capture, kAppendPos);
}

}  // namespace caprese
