#include "caprese/compress.hpp"

#include <algorithm>
#include <cmath>

#include "caprese/errors.hpp"
#include "caprese/linalg.hpp"

namespace caprese {

// ---- compression plan -------------------------------------------------------

void CompressionSpec::validate() const {
    switch (variant) {
        case CompressionVariant::none:
            break;
        case CompressionVariant::griffin:
        case CompressionVariant::cats:
            if (!(sparsity > 0.0 && sparsity < 1.0))
                throw ConfigError("compression: sparsity must be in (0, 1)");
            break;
        case CompressionVariant::quant:
            if (bits != 4 && bits != 8) throw ConfigError("compression: bits must be 4 or 8");
            break;
    }
    if (layer_range && layer_range->begin > layer_range->end)
        throw ConfigError("compression: layer range begin > end");
}

LayerRange CompressionSpec::resolve_range(size_t n_layers) const {
    if (layer_range) {
        if (layer_range->end > n_layers)
            throw ConfigError("compression: layer range exceeds layer count");
        return *layer_range;
    }
    if (variant == CompressionVariant::griffin) return {0, n_layers / 2};
    if (variant == CompressionVariant::none) return {0, 0};
    return {0, n_layers};
}

const char* variant_name(CompressionVariant variant) {
    switch (variant) {
        case CompressionVariant::none: return "none";
        case CompressionVariant::griffin: return "griffin";
        case CompressionVariant::cats: return "cats";
        case CompressionVariant::quant: return "quant";
    }
    return "none";
}

CompressionVariant variant_from_name(const std::string& name) {
    if (name == "none") return CompressionVariant::none;
    if (name == "griffin") return CompressionVariant::griffin;
    if (name == "cats") return CompressionVariant::cats;
    if (name == "quant") return CompressionVariant::quant;
    throw ConfigError("compression: unknown variant '" + name + "'");
}

size_t griffin_k(double sparsity, size_t d_ff) {
    if (!(sparsity > 0.0 && sparsity < 1.0))
        throw ConfigError("compression: sparsity must be in (0, 1)");
    const auto kept = size_t(std::llround((1.0 - sparsity) * double(d_ff)));
    return std::clamp<size_t>(kept, 1, d_ff);
}

// ---- GRIFFIN ----------------------------------------------------------------

std::vector<float> griffin_metric(const Matrix& z) {
    std::vector<double> acc(z.cols, 0.0);
    for (size_t i = 0; i < z.rows; ++i) {
        const float* row = z.row(i);
        double norm_sq = 0.0;
        for (size_t j = 0; j < z.cols; ++j) norm_sq += double(row[j]) * double(row[j]);
        if (norm_sq == 0.0) continue;  // 0/0 := 0, the row adds nothing
        for (size_t j = 0; j < z.cols; ++j) {
            const double zbar = double(row[j]) * double(row[j]) / norm_sq;
            acc[j] += zbar;  // |z|^2 / ||row||^2 accumulates the squared column terms
        }
    }
    std::vector<float> s(z.cols);
    for (size_t j = 0; j < z.cols; ++j) s[j] = float(std::sqrt(acc[j]));
    return s;
}

GriffinFfn griffin_compress(const GatedFfnWeights& w, const std::vector<float>& metric, size_t k,
                            size_t layer) {
    const size_t d_ff = w.w_gate.cols;
    if (metric.size() != d_ff) throw ShapeError("griffin: metric length != D_FF");
    if (k < 1 || k > d_ff) throw ShapeError("griffin: k out of range");

    GriffinFfn out;
    out.selection.layer = layer;
    out.selection.metric = metric;
    out.selection.indices = topk_indices(metric, k);

    const size_t d = w.w_gate.rows;
    out.gathered.w_gate = Matrix(d, k);
    out.gathered.w_in = Matrix(d, k);
    out.gathered.w_out = Matrix(k, d);
    for (size_t c = 0; c < k; ++c) {
        const size_t j = out.selection.indices[c];
        for (size_t r = 0; r < d; ++r) {
            out.gathered.w_gate.at(r, c) = w.w_gate.at(r, j);
            out.gathered.w_in.at(r, c) = w.w_in.at(r, j);
        }
        const float* src = w.w_out.row(j);
        std::copy(src, src + d, out.gathered.w_out.row(c));
    }
    return out;
}

Matrix griffin_forward_rows(const Matrix& x, const GriffinFfn& g, FfnTrace* trace) {
    return ffn_forward_rows(x, g.gathered, trace);
}

std::vector<float> griffin_forward(const std::vector<float>& x, const GriffinFfn& g) {
    Matrix m(1, x.size(), x);
    return griffin_forward_rows(m, g, nullptr).data;
}

// ---- CATS ---------------------------------------------------------------------

CatsThreshold cats_calibrate(const Matrix& gate_activations, double sparsity, size_t layer) {
    if (gate_activations.empty()) throw DomainError("cats_calibrate: empty activations");
    std::vector<float> mags(gate_activations.size());
    for (size_t i = 0; i < mags.size(); ++i) mags[i] = std::fabs(gate_activations.data[i]);
    CatsThreshold t;
    t.layer = layer;
    t.tau = percentile(std::move(mags), sparsity);
    t.target_sparsity = sparsity;
    return t;
}

Matrix cats_forward_rows(const Matrix& x, const GatedFfnWeights& w, float tau, FfnTrace* trace) {
    if (tau < 0.0f) throw DomainError("cats: tau must be non-negative");
    if (x.cols != w.w_gate.rows) throw ShapeError("cats: input width != D");
    const size_t d = w.w_gate.rows;
    const size_t d_ff = w.w_gate.cols;

    // The gate is always computed in full; thresholding then skips the x W_1
    // columns and W_2 rows at suppressed positions via an index gather.
    Matrix gate = matmul(x, w.w_gate);
    for (float& v : gate.data) v = v / (1.0f + std::exp(-v));

    Matrix y(x.rows, d);
    Matrix z_kept(x.rows, d_ff);  // thresholded intermediate, zeros where masked
    size_t zeroed = 0;
    std::vector<size_t> live;
    live.reserve(d_ff);
    for (size_t i = 0; i < x.rows; ++i) {
        live.clear();
        const float* grow = gate.row(i);
        for (size_t j = 0; j < d_ff; ++j) {
            if (std::fabs(grow[j]) <= tau)
                ++zeroed;
            else
                live.push_back(j);
        }
        const float* xrow = x.row(i);
        float* yrow = y.row(i);
        float* zrow = z_kept.row(i);
        for (size_t j : live) {
            float dot = 0.0f;
            for (size_t c = 0; c < d; ++c) dot += xrow[c] * w.w_in.at(c, j);
            const float zj = grow[j] * dot;
            zrow[j] = zj;
            const float* w2row = w.w_out.row(j);
            for (size_t c = 0; c < d; ++c) yrow[c] += zj * w2row[c];
        }
    }
    if (trace) {
        trace->x = x;
        trace->gate = gate;
        trace->z = std::move(z_kept);
        trace->y = y;
        trace->zero_fraction = double(zeroed) / double(x.rows * d_ff);
    }
    return y;
}

std::vector<float> cats_forward(const std::vector<float>& x, const GatedFfnWeights& w, float tau) {
    Matrix m(1, x.size(), x);
    return cats_forward_rows(m, w, tau, nullptr).data;
}

// ---- quantization ---------------------------------------------------------------

namespace {

int quant_max(int bits) {
    if (bits == 4) return 7;
    if (bits == 8) return 127;
    throw ConfigError("quantize: bits must be 4 or 8");
}

}  // namespace

QuantizedMatrix quantize_matrix(const Matrix& w, int bits) {
    const int qmax = quant_max(bits);
    QuantizedMatrix q;
    q.rows = w.rows;
    q.cols = w.cols;
    q.bits = bits;
    q.scales.assign(w.cols, 0.0f);
    for (size_t j = 0; j < w.cols; ++j) {
        float peak = 0.0f;
        for (size_t i = 0; i < w.rows; ++i) peak = std::max(peak, std::fabs(w.at(i, j)));
        q.scales[j] = peak / float(qmax);
    }
    const size_t n = w.rows * w.cols;
    auto code_at = [&](size_t flat) -> uint8_t {
        const size_t j = flat % w.cols;
        const float scale = q.scales[j];
        int code = 0;
        if (scale > 0.0f) {
            code = int(std::lround(double(w.data[flat]) / double(scale)));
            code = std::clamp(code, -qmax, qmax);
        }
        return uint8_t(code + qmax);
    };
    if (bits == 4) {
        q.codes.assign((n + 1) / 2, 0);
        for (size_t f = 0; f < n; ++f) {
            const uint8_t c = code_at(f);
            if (f % 2 == 0)
                q.codes[f / 2] = c;
            else
                q.codes[f / 2] |= uint8_t(c << 4);
        }
    } else {
        q.codes.resize(n);
        for (size_t f = 0; f < n; ++f) q.codes[f] = code_at(f);
    }
    return q;
}

Matrix dequantize_matrix(const QuantizedMatrix& q) {
    const int qmax = quant_max(q.bits);
    Matrix w(q.rows, q.cols);
    const size_t n = q.rows * q.cols;
    for (size_t f = 0; f < n; ++f) {
        int code;
        if (q.bits == 4)
            code = (f % 2 == 0) ? (q.codes[f / 2] & 0x0F) : (q.codes[f / 2] >> 4);
        else
            code = q.codes[f];
        w.data[f] = float(code - qmax) * q.scales[f % q.cols];
    }
    return w;
}

QuantizedFfn quantize_ffn(const GatedFfnWeights& w, int bits) {
    QuantizedFfn q;
    q.bits = bits;
    q.w_gate = quantize_matrix(w.w_gate, bits);
    q.w_in = quantize_matrix(w.w_in, bits);
    q.w_out = quantize_matrix(w.w_out, bits);
    return q;
}

std::vector<float> quant_forward(const std::vector<float>& x, const QuantizedFfn& q) {
    GatedFfnWeights w;
    w.w_gate = dequantize_matrix(q.w_gate);
    w.w_in = dequantize_matrix(q.w_in);
    w.w_out = dequantize_matrix(q.w_out);
    return ffn_forward(x, w);
}

// ---- model-facing backends --------------------------------------------------------

void GriffinFfnBackend::set_layer(size_t layer, GriffinFfn ffn) {
    if (layer >= compressed_.size()) throw ShapeError("griffin backend: layer out of range");
    compressed_[layer] = std::move(ffn);
}

const GriffinFfn* GriffinFfnBackend::selection(size_t layer) const {
    if (layer >= compressed_.size()) throw ShapeError("griffin backend: layer out of range");
    return compressed_[layer] ? &*compressed_[layer] : nullptr;
}

Matrix GriffinFfnBackend::forward(size_t layer, const Matrix& x, FfnTrace* trace) {
    if (layer >= compressed_.size()) throw ShapeError("griffin backend: layer out of range");
    if (compressed_[layer]) return griffin_forward_rows(x, *compressed_[layer], trace);
    return ffn_forward_rows(x, weights_->layers[layer].ffn, trace);
}

void CatsFfnBackend::set_layer(size_t layer, CatsThreshold threshold) {
    if (layer >= thresholds_.size()) throw ShapeError("cats backend: layer out of range");
    thresholds_[layer] = threshold;
}

const CatsThreshold* CatsFfnBackend::threshold(size_t layer) const {
    if (layer >= thresholds_.size()) throw ShapeError("cats backend: layer out of range");
    return thresholds_[layer] ? &*thresholds_[layer] : nullptr;
}

Matrix CatsFfnBackend::forward(size_t layer, const Matrix& x, FfnTrace* trace) {
    if (layer >= thresholds_.size()) throw ShapeError("cats backend: layer out of range");
    if (thresholds_[layer])
        return cats_forward_rows(x, weights_->layers[layer].ffn, thresholds_[layer]->tau, trace);
    return ffn_forward_rows(x, weights_->layers[layer].ffn, trace);
}

QuantFfnBackend::QuantFfnBackend(const ModelWeights& weights, int bits, LayerRange range)
    : weights_(&weights), dequantized_(weights.layers.size()) {
    if (range.end > weights.layers.size())
        throw ShapeError("quant backend: layer range exceeds layer count");
    for (size_t l = range.begin; l < range.end; ++l) {
        const QuantizedFfn q = quantize_ffn(weights.layers[l].ffn, bits);
        GatedFfnWeights deq;
        deq.w_gate = dequantize_matrix(q.w_gate);
        deq.w_in = dequantize_matrix(q.w_in);
        deq.w_out = dequantize_matrix(q.w_out);
        dequantized_[l] = std::move(deq);
    }
}

const GatedFfnWeights& QuantFfnBackend::effective_weights(size_t layer) const {
    if (layer >= dequantized_.size()) throw ShapeError("quant backend: layer out of range");
    return dequantized_[layer] ? *dequantized_[layer] : weights_->layers[layer].ffn;
}

Matrix QuantFfnBackend::forward(size_t layer, const Matrix& x, FfnTrace* trace) {
    return ffn_forward_rows(x, effective_weights(layer), trace);
}

// ---- parameter accounting -----------------------------------------------------------

ParamShape ParamShape::from_config(const ModelConfig& config) {
    ParamShape s;
    s.vocab = config.vocab_size;
    s.d_model = config.d_model;
    s.d_ff = config.d_ff;
    s.n_layers = config.n_layers;
    s.n_heads = config.n_heads;
    s.n_kv_heads = config.n_heads;  // the toy model has no grouped KV
    s.head_dim = config.head_dim();
    s.tied_embeddings = true;
    return s;
}

size_t ParamShape::attn_params_per_layer() const {
    const size_t q = d_model * n_heads * head_dim;
    const size_t kv = 2 * d_model * n_kv_heads * head_dim;
    const size_t o = n_heads * head_dim * d_model;
    return q + kv + o;
}

size_t ParamShape::ffn_params_per_layer() const { return 3 * d_model * d_ff; }

size_t ParamShape::embed_params() const {
    return vocab * d_model * (tied_embeddings ? 1 : 2);
}

size_t ParamShape::total_params() const {
    return embed_params() + d_model /* final norm */ +
           n_layers * (attn_params_per_layer() + ffn_params_per_layer() +
                       norm_params_per_layer());
}

double active_param_fraction(const CompressionSpec& spec, const ParamShape& shape,
                             size_t caprese_rank) {
    spec.validate();
    const double total = double(shape.total_params());
    const LayerRange range = spec.resolve_range(shape.n_layers);
    double active = total;
    for (size_t l = range.begin; l < range.end; ++l) {
        const double ffn = double(shape.ffn_params_per_layer());
        switch (spec.variant) {
            case CompressionVariant::none:
                break;
            case CompressionVariant::griffin: {
                const size_t k = griffin_k(spec.sparsity, shape.d_ff);
                active -= ffn;
                active += 3.0 * double(shape.d_model) * double(k);
                break;
            }
            case CompressionVariant::cats: {
                // The gate product is always dense; W_1 columns and W_2 rows
                // are touched only at surviving positions.
                const double live = 1.0 - spec.sparsity;
                active -= ffn;
                active += double(shape.d_model) * double(shape.d_ff) * (1.0 + 2.0 * live);
                break;
            }
            case CompressionVariant::quant:
                break;  // every parameter still participates
        }
        if (caprese_rank > 0) active += 2.0 * double(shape.d_model) * double(caprese_rank);
    }
    return active / total;
}

double active_param_fraction(const CompressionSpec& spec, const ModelConfig& config,
                             size_t caprese_rank) {
    return active_param_fraction(spec, ParamShape::from_config(config), caprese_rank);
}

}  // namespace caprese
