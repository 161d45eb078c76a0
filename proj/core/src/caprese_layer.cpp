#include "caprese/caprese_layer.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "caprese/errors.hpp"

namespace caprese {

CapreseLayer init_caprese_layer(size_t d_model, size_t rank, Rng& rng) {
    if (d_model == 0 || rank == 0) throw ShapeError("init_caprese_layer: zero dimension");
    CapreseLayer layer;
    layer.l = Matrix(d_model, rank);
    layer.r = Matrix(rank, d_model);  // stays zero: a fresh corrector is a no-op
    fill_normal(layer.l, rng, 1.0 / std::sqrt(double(d_model)));
    return layer;
}

Matrix residual_term_rows(const Matrix& x, const CapreseLayer& layer) {
    return matmul(matmul(x, layer.l), layer.r);
}

CompressedFfn compress_none(const GatedFfnWeights& w) {
    CompressedFfn f;
    f.variant = CompressionVariant::none;
    f.weights = w;
    return f;
}

CompressedFfn compress_griffin(const GatedFfnWeights& w, const std::vector<float>& metric,
                               size_t k, size_t layer) {
    GriffinFfn g = griffin_compress(w, metric, k, layer);
    CompressedFfn f;
    f.variant = CompressionVariant::griffin;
    f.weights = std::move(g.gathered);
    f.selection = std::move(g.selection);
    return f;
}

CompressedFfn compress_cats(const GatedFfnWeights& w, CatsThreshold threshold) {
    if (threshold.tau < 0.0f) throw DomainError("compress_cats: negative threshold");
    CompressedFfn f;
    f.variant = CompressionVariant::cats;
    f.weights = w;
    f.threshold = threshold;
    return f;
}

CompressedFfn compress_quant(const GatedFfnWeights& w, int bits) {
    QuantizedFfn q = quantize_ffn(w, bits);
    CompressedFfn f;
    f.variant = CompressionVariant::quant;
    f.weights.w_gate = dequantize_matrix(q.w_gate);
    f.weights.w_in = dequantize_matrix(q.w_in);
    f.weights.w_out = dequantize_matrix(q.w_out);
    return f;
}

Matrix compressed_forward_rows(const Matrix& x, const CompressedFfn& f, FfnTrace* trace) {
    if (f.variant == CompressionVariant::cats) {
        if (!f.threshold) throw StateError("compressed_forward: cats block without threshold");
        return cats_forward_rows(x, f.weights, f.threshold->tau, trace);
    }
    return ffn_forward_rows(x, f.weights, trace);
}

std::vector<float> compressed_forward(const std::vector<float>& x, const CompressedFfn& f) {
    Matrix row(1, x.size());
    row.data = x;
    Matrix y = compressed_forward_rows(row, f);
    return y.data;
}

MergedFfn merge_weights(CompressedFfn& compressed, const CapreseLayer& layer) {
    if (compressed.merged) throw StateError("merge_weights: block already merged");
    if (compressed.variant == CompressionVariant::quant)
        throw StateError("merge_weights: quantized blocks keep the residual unmerged");
    const GatedFfnWeights& w = compressed.weights;
    const size_t d = w.w_in.rows;
    const size_t k = w.w_in.cols;
    const size_t r = layer.rank();
    if (layer.l.rows != d || layer.r.cols != w.w_out.cols || layer.r.rows != r)
        throw ShapeError("merge_weights: residual factors do not match the block");

    MergedFfn m;
    m.rank = r;
    if (compressed.threshold) m.cats_tau = compressed.threshold->tau;
    m.w_gate = w.w_gate;
    m.w_in_plus = Matrix(d, k + r);
    for (size_t i = 0; i < d; ++i) {
        float* dst = m.w_in_plus.row(i);
        const float* src = k > 0 ? w.w_in.row(i) : nullptr;
        for (size_t j = 0; j < k; ++j) dst[j] = src[j];
        const float* lrow = layer.l.row(i);
        for (size_t j = 0; j < r; ++j) dst[k + j] = lrow[j];
    }
    m.w_out_plus = Matrix(k + r, w.w_out.cols);
    for (size_t j = 0; j < k; ++j) {
        const float* src = w.w_out.row(j);
        float* dst = m.w_out_plus.row(j);
        for (size_t c = 0; c < w.w_out.cols; ++c) dst[c] = src[c];
    }
    for (size_t j = 0; j < r; ++j) {
        const float* src = layer.r.row(j);
        float* dst = m.w_out_plus.row(k + j);
        for (size_t c = 0; c < layer.r.cols; ++c) dst[c] = src[c];
    }
    compressed.merged = true;
    return m;
}

Matrix merged_forward_rows(const Matrix& x, const MergedFfn& m, FfnTrace* trace) {
    const size_t k = m.w_gate.cols;
    const size_t r = m.rank;
    if (m.w_in_plus.cols != k + r || m.w_out_plus.rows != k + r)
        throw ShapeError("merged_forward: inconsistent merged block");
    Matrix gate_lin = matmul(x, m.w_gate);
    Matrix z = matmul(x, m.w_in_plus);  // appended lanes already hold x L
    for (float& g : gate_lin.data) g = g / (1.0f + std::exp(-g));
    // Residual lanes pass through ungated: the identity gate is applied by
    // leaving x L in place, never by materializing a ones block. The cats
    // branch stays out of the element loop; it costs decode latency.
    size_t zeroed = 0;
    if (m.cats_tau) {
        const float tau = *m.cats_tau;
        for (size_t i = 0; i < x.rows; ++i) {
            float* grow = gate_lin.row(i);
            float* zrow = z.row(i);
            for (size_t j = 0; j < k; ++j) {
                if (std::fabs(grow[j]) <= tau) {
                    grow[j] = 0.0f;
                    zrow[j] = 0.0f;
                    ++zeroed;
                } else {
                    zrow[j] *= grow[j];
                }
            }
        }
    } else {
        for (size_t i = 0; i < x.rows; ++i) {
            float* grow = gate_lin.row(i);
            float* zrow = z.row(i);
            for (size_t j = 0; j < k; ++j) zrow[j] *= grow[j];
        }
    }
    Matrix y = matmul(z, m.w_out_plus);
    if (trace) {
        trace->x = x;
        trace->gate = std::move(gate_lin);
        trace->z = z;
        trace->y = y;
        trace->zero_fraction = k > 0 ? double(zeroed) / (double(x.rows) * double(k)) : 0.0;
    }
    return y;
}

std::vector<float> merged_forward(const std::vector<float>& x, const MergedFfn& m) {
    Matrix row(1, x.size());
    row.data = x;
    return merged_forward_rows(row, m).data;
}

Matrix caprese_forward_rows(const Matrix& x, const CompressedFfn& compressed,
                            const CapreseLayer& layer) {
    if (compressed.variant == CompressionVariant::quant) {
        Matrix y = compressed_forward_rows(x, compressed);
        Matrix res = residual_term_rows(x, layer);
        for (size_t i = 0; i < y.size(); ++i) y.data[i] += res.data[i];
        return y;
    }
    CompressedFfn scratch = compressed;  // keep the caller's merge state untouched
    scratch.merged = false;
    MergedFfn m = merge_weights(scratch, layer);
    return merged_forward_rows(x, m);
}

std::vector<float> caprese_forward(const std::vector<float>& x, const CompressedFfn& compressed,
                                   const CapreseLayer& layer) {
    Matrix row(1, x.size());
    row.data = x;
    return caprese_forward_rows(row, compressed, layer).data;
}

// ---- LoRA comparison block ----------------------------------------------------

LoraFfnParams init_lora_params(size_t d_model, size_t d_ff, size_t rank, Rng& rng) {
    if (d_model == 0 || d_ff == 0 || rank == 0) throw ShapeError("init_lora_params: zero dimension");
    LoraFfnParams p;
    p.a_gate = Matrix(d_model, rank);
    p.a_in = Matrix(d_model, rank);
    p.b_gate = Matrix(rank, d_ff);  // B factors start zero so adapters begin neutral
    p.b_in = Matrix(rank, d_ff);
    p.a_out = Matrix(d_ff, rank);
    p.b_out = Matrix(rank, d_model);
    const double sigma = 1.0 / std::sqrt(double(d_model));
    fill_normal(p.a_gate, rng, sigma);
    fill_normal(p.a_in, rng, sigma);
    fill_normal(p.a_out, rng, 1.0 / std::sqrt(double(d_ff)));
    return p;
}

size_t lora_rank_for_matched_params(size_t d_model, size_t d_ff, size_t caprese_rank) {
    // 6 adapters: 2 of D x r_l, 2 of r_l x D_FF, one D_FF x r_l, one r_l x D.
    const double matched =
        double(2 * d_model * caprese_rank) / (3.0 * double(d_model + d_ff));
    size_t r = size_t(std::llround(matched));
    return r > 0 ? r : 1;
}

Matrix lora_ffn_forward_rows(const Matrix& x, const GatedFfnWeights& masked,
                             const LoraFfnParams& lora) {
    const size_t d_ff = masked.w_gate.cols;
    if (lora.a_gate.rows != masked.w_gate.rows || lora.b_gate.cols != d_ff ||
        lora.a_out.rows != d_ff || lora.b_out.cols != masked.w_out.cols)
        throw ShapeError("lora_ffn_forward: adapter shapes do not match the block");
    // Each adapted matrix is applied as two sequential thin products; the
    // adapter outputs are dense over the full intermediate width, which is
    // what keeps this block from profiting from sparsity.
    Matrix gate_lin = matmul(x, masked.w_gate);
    Matrix gate_adapt = matmul(matmul(x, lora.a_gate), lora.b_gate);
    Matrix in_lin = matmul(x, masked.w_in);
    Matrix in_adapt = matmul(matmul(x, lora.a_in), lora.b_in);
    Matrix z(x.rows, d_ff);
    for (size_t i = 0; i < z.size(); ++i) {
        float g = gate_lin.data[i] + gate_adapt.data[i];
        g = g / (1.0f + std::exp(-g));
        z.data[i] = g * (in_lin.data[i] + in_adapt.data[i]);
    }
    Matrix y = matmul(z, masked.w_out);
    Matrix y_adapt = matmul(matmul(z, lora.a_out), lora.b_out);
    for (size_t i = 0; i < y.size(); ++i) y.data[i] += y_adapt.data[i];
    return y;
}

std::vector<float> lora_ffn_forward(const std::vector<float>& x, const GatedFfnWeights& masked,
                                    const LoraFfnParams& lora) {
    Matrix row(1, x.size());
    row.data = x;
    return lora_ffn_forward_rows(row, masked, lora).data;
}

// ---- model-facing backend -------------------------------------------------------

void CapreseFfnBackend::set_merged(size_t layer, MergedFfn merged) {
    if (layer >= merged_.size()) throw ShapeError("CapreseFfnBackend: layer out of range");
    merged_[layer] = std::move(merged);
    two_term_[layer].reset();
}

void CapreseFfnBackend::set_two_term(size_t layer, CompressedFfn compressed,
                                     CapreseLayer residual) {
    if (layer >= two_term_.size()) throw ShapeError("CapreseFfnBackend: layer out of range");
    two_term_[layer] = TwoTerm{std::move(compressed), std::move(residual)};
    merged_[layer].reset();
}

void CapreseFfnBackend::clear_layer(size_t layer) {
    if (layer >= merged_.size()) throw ShapeError("CapreseFfnBackend: layer out of range");
    merged_[layer].reset();
    two_term_[layer].reset();
}

const MergedFfn* CapreseFfnBackend::merged(size_t layer) const {
    if (layer >= merged_.size()) throw ShapeError("CapreseFfnBackend: layer out of range");
    return merged_[layer] ? &*merged_[layer] : nullptr;
}

Matrix CapreseFfnBackend::forward(size_t layer, const Matrix& x, FfnTrace* trace) {
    if (layer >= merged_.size()) throw ShapeError("CapreseFfnBackend: layer out of range");
    if (merged_[layer]) return merged_forward_rows(x, *merged_[layer], trace);
    if (two_term_[layer]) {
        const TwoTerm& t = *two_term_[layer];
        Matrix y = compressed_forward_rows(x, t.compressed, trace);
        Matrix res = residual_term_rows(x, t.residual);
        for (size_t i = 0; i < y.size(); ++i) y.data[i] += res.data[i];
        if (trace) trace->y = y;
        return y;
    }
    return ffn_forward_rows(x, weights_->layers[layer].ffn, trace);
}

}  // namespace caprese
