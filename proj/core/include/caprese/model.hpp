#pragma once

#include <cstdint>
#include <vector>

#include "caprese/matrix.hpp"
#include "caprese/tokenizer.hpp"

namespace caprese {

struct ModelConfig {
    size_t vocab_size = kByteVocabSize;
    size_t d_model = 128;
    size_t d_ff = 512;
    size_t n_layers = 4;
    size_t n_heads = 4;
    size_t max_seq = 512;
    uint64_t rng_seed = 1;

    size_t head_dim() const { return d_model / n_heads; }
    void validate() const;  // throws ConfigError
};

// Gated feedforward block, biases omitted:
//   FF(x) = (silu(x W_g) ⊙ x W_1) W_2
struct GatedFfnWeights {
    Matrix w_gate;  // D x D_FF
    Matrix w_in;    // D x D_FF
    Matrix w_out;   // D_FF x D
};

struct AttnWeights {
    Matrix wq, wk, wv, wo;  // each D x D
};

struct LayerWeights {
    AttnWeights attn;
    GatedFfnWeights ffn;
    std::vector<float> attn_norm;  // RMS-norm gain, length D
    std::vector<float> ffn_norm;   // RMS-norm gain, length D
};

// Frozen after construction or checkpoint load; the engine never mutates a
// ModelWeights in place. The output head is the transposed embedding.
struct ModelWeights {
    ModelConfig config;
    Matrix embedding;  // vocab x D
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm;  // length D
};

ModelWeights init_random_weights(const ModelConfig& config);

// Per-layer key/value rows. Length is monotone nondecreasing within a
// session; reselection overwrites rows below len() without shrinking it.
class KvCache {
public:
    explicit KvCache(const ModelConfig& config)
        : max_seq_(config.max_seq),
          keys_(config.n_layers, Matrix(config.max_seq, config.d_model)),
          values_(config.n_layers, Matrix(config.max_seq, config.d_model)) {}

    size_t len() const { return len_; }
    size_t max_seq() const { return max_seq_; }

    float* key_row(size_t layer, size_t pos) { return keys_[layer].row(pos); }
    float* value_row(size_t layer, size_t pos) { return values_[layer].row(pos); }
    const float* key_row(size_t layer, size_t pos) const { return keys_[layer].row(pos); }
    const float* value_row(size_t layer, size_t pos) const { return values_[layer].row(pos); }

    void advance(size_t new_len);  // StateError on shrink, CapacityError past max_seq

private:
    size_t max_seq_ = 0;
    size_t len_ = 0;
    std::vector<Matrix> keys_;    // per layer, max_seq x D
    std::vector<Matrix> values_;  // per layer, max_seq x D
};

// Optional per-layer capture of the tensors distillation and compression
// calibration consume. Widths follow the backend (a pruned backend reports
// its compressed intermediate width).
struct FfnTrace {
    Matrix x;     // rows entering the FFN, post-norm (S x D)
    Matrix gate;  // silu(x W_g) before any thresholding (S x width)
    Matrix z;     // gated intermediate (S x width)
    Matrix y;     // FFN output rows (S x D)
    double zero_fraction = 0.0;  // realized sparsity of z
};

// Per-layer FFN evaluation strategy: full, pruned, thresholded, quantized,
// or merged with a residual corrector. Implementations must be pure with
// respect to x (no cross-call state besides fixed weights).
class FfnBackend {
public:
    virtual ~FfnBackend() = default;
    virtual size_t layer_count() const = 0;
    virtual Matrix forward(size_t layer, const Matrix& x, FfnTrace* trace) = 0;
};

// Uncompressed reference backend over the model's own weights.
class FullFfnBackend : public FfnBackend {
public:
    explicit FullFfnBackend(const ModelWeights& weights) : weights_(&weights) {}
    size_t layer_count() const override { return weights_->layers.size(); }
    Matrix forward(size_t layer, const Matrix& x, FfnTrace* trace) override;

private:
    const ModelWeights* weights_;
};

// FF(x) on a single row; the spec-level op. Batched rows below.
std::vector<float> ffn_forward(const std::vector<float>& x, const GatedFfnWeights& w);
Matrix ffn_forward_rows(const Matrix& x, const GatedFfnWeights& w, FfnTrace* trace = nullptr);

// RMS-norm with gain, eps 1e-5, mean accumulated in double.
Matrix rmsnorm_rows(const Matrix& x, const std::vector<float>& gain);

// Causal forward over the token chunk starting at absolute position
// `start_pos` (default: cache.len(), i.e. append). start_pos below cache.len()
// re-runs those positions and overwrites their cached K/V rows; the cache
// never shrinks. Returns logits for the chunk positions (S x vocab).
// capture, when non-null, is resized to n_layers and filled per layer.
constexpr size_t kAppendPos = size_t(-1);
Matrix model_forward(const TokenSequence& tokens, const ModelWeights& weights, KvCache& cache,
                     FfnBackend& ffn, std::vector<FfnTrace>* capture = nullptr,
                     size_t start_pos = kAppendPos);

// Hidden states after the final norm, before the output head (S x D); the
// end-to-end distillation target. Runs over a fresh cache.
Matrix final_embedding(const TokenSequence& tokens, const ModelWeights& weights, FfnBackend& ffn,
                       std::vector<FfnTrace>* capture = nullptr);

}  // namespace caprese
