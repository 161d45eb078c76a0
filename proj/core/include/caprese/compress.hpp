#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "caprese/model.hpp"

namespace caprese {

// ---- compression plan -------------------------------------------------------

enum class CompressionVariant { none, griffin, cats, quant };

// Half-open layer interval [begin, end).
struct LayerRange {
    size_t begin = 0;
    size_t end = 0;
    bool contains(size_t layer) const { return layer >= begin && layer < end; }
    size_t count() const { return end - begin; }
};

struct CompressionSpec {
    CompressionVariant variant = CompressionVariant::none;
    double sparsity = 0.5;  // griffin / cats, fraction of intermediate features dropped
    int bits = 4;           // quant
    std::optional<LayerRange> layer_range;  // default: griffin first half, others all

    void validate() const;  // throws ConfigError
    LayerRange resolve_range(size_t n_layers) const;
};

const char* variant_name(CompressionVariant variant);
CompressionVariant variant_from_name(const std::string& name);  // ConfigError on unknown

// Number of kept intermediate features for a sparsity target.
size_t griffin_k(double sparsity, size_t d_ff);

// ---- GRIFFIN ----------------------------------------------------------------

struct GriffinSelection {
    size_t layer = 0;
    std::vector<size_t> indices;  // strictly ascending, unique, == topk(metric, k)
    std::vector<float> metric;    // s, length D_FF
};

// Selection plus the gathered weight triple (D x k, D x k, k x D).
struct GriffinFfn {
    GriffinSelection selection;
    GatedFfnWeights gathered;
};

// Row-normalized column aggregation: s_j = || |Z_i|/||Z_i||_2 ||_2 over rows i.
// All-zero rows contribute zero (0/0 := 0).
std::vector<float> griffin_metric(const Matrix& z);

GriffinFfn griffin_compress(const GatedFfnWeights& w, const std::vector<float>& metric, size_t k,
                            size_t layer = 0);

std::vector<float> griffin_forward(const std::vector<float>& x, const GriffinFfn& g);
Matrix griffin_forward_rows(const Matrix& x, const GriffinFfn& g, FfnTrace* trace = nullptr);

// ---- CATS ---------------------------------------------------------------------

struct CatsThreshold {
    size_t layer = 0;
    float tau = 0.0f;  // T_tau zeroes gate entries with |value| <= tau
    double target_sparsity = 0.5;
};

// tau = nearest-rank percentile of |gate_activations| flattened.
CatsThreshold cats_calibrate(const Matrix& gate_activations, double sparsity, size_t layer = 0);

std::vector<float> cats_forward(const std::vector<float>& x, const GatedFfnWeights& w, float tau);
Matrix cats_forward_rows(const Matrix& x, const GatedFfnWeights& w, float tau,
                         FfnTrace* trace = nullptr);

// ---- quantization ---------------------------------------------------------------

// Symmetric uniform codes with one scale per output channel (column).
// 4-bit codes pack two per byte, low nibble first.
struct QuantizedMatrix {
    size_t rows = 0;
    size_t cols = 0;
    int bits = 4;
    std::vector<float> scales;   // length cols; scale = max|column| / (2^(bits-1) - 1)
    std::vector<uint8_t> codes;  // biased by 2^(bits-1) - 1
};

struct QuantizedFfn {
    int bits = 4;
    QuantizedMatrix w_gate, w_in, w_out;
};

QuantizedMatrix quantize_matrix(const Matrix& w, int bits);
Matrix dequantize_matrix(const QuantizedMatrix& q);

QuantizedFfn quantize_ffn(const GatedFfnWeights& w, int bits = 4);
std::vector<float> quant_forward(const std::vector<float>& x, const QuantizedFfn& q);

// ---- model-facing backends --------------------------------------------------------

// Full FFN everywhere until set_layer installs a selection; reselection
// replaces selections mid-generation.
class GriffinFfnBackend : public FfnBackend {
public:
    explicit GriffinFfnBackend(const ModelWeights& weights) : weights_(&weights) {}
    size_t layer_count() const override { return weights_->layers.size(); }
    void set_layer(size_t layer, GriffinFfn ffn);
    const GriffinFfn* selection(size_t layer) const;
    Matrix forward(size_t layer, const Matrix& x, FfnTrace* trace) override;

private:
    const ModelWeights* weights_;
    std::vector<std::optional<GriffinFfn>> compressed_ =
        std::vector<std::optional<GriffinFfn>>(weights_->layers.size());
};

class CatsFfnBackend : public FfnBackend {
public:
    explicit CatsFfnBackend(const ModelWeights& weights) : weights_(&weights) {}
    size_t layer_count() const override { return weights_->layers.size(); }
    void set_layer(size_t layer, CatsThreshold threshold);
    const CatsThreshold* threshold(size_t layer) const;
    Matrix forward(size_t layer, const Matrix& x, FfnTrace* trace) override;

private:
    const ModelWeights* weights_;
    std::vector<std::optional<CatsThreshold>> thresholds_ =
        std::vector<std::optional<CatsThreshold>>(weights_->layers.size());
};

// Quantizes the FFN weights of the spec's layer range up front and serves
// forwards from the dequantized copies.
class QuantFfnBackend : public FfnBackend {
public:
    QuantFfnBackend(const ModelWeights& weights, int bits, LayerRange range);
    size_t layer_count() const override { return weights_->layers.size(); }
    bool is_quantized(size_t layer) const { return dequantized_[layer].has_value(); }
    const GatedFfnWeights& effective_weights(size_t layer) const;
    Matrix forward(size_t layer, const Matrix& x, FfnTrace* trace) override;

private:
    const ModelWeights* weights_;
    std::vector<std::optional<GatedFfnWeights>> dequantized_;
};

// ---- parameter accounting -----------------------------------------------------------

// Shape summary for parameter counting; covers grouped-query attention and
// untied heads so published model dimensions can be plugged in directly.
struct ParamShape {
    size_t vocab = 0;
    size_t d_model = 0;
    size_t d_ff = 0;
    size_t n_layers = 0;
    size_t n_heads = 1;
    size_t n_kv_heads = 1;
    size_t head_dim = 0;
    bool tied_embeddings = true;

    static ParamShape from_config(const ModelConfig& config);
    size_t attn_params_per_layer() const;
    size_t ffn_params_per_layer() const;
    size_t norm_params_per_layer() const { return 2 * d_model; }
    size_t embed_params() const;
    size_t total_params() const;
};

// Fraction of the original parameter count touched per decoded token.
// caprese_rank > 0 adds 2 * D * r for every layer in the spec's range; the
// denominator stays the original total, so quantized-plus-residual configs
// may exceed 1.
double active_param_fraction(const CompressionSpec& spec, const ParamShape& shape,
                             size_t caprese_rank = 0);
double active_param_fraction(const CompressionSpec& spec, const ModelConfig& config,
                             size_t caprese_rank = 0);

}  // namespace caprese
