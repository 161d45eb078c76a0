#pragma once

#include <optional>
#include <vector>

#include "caprese/compress.hpp"
#include "caprese/model.hpp"
#include "caprese/rng.hpp"

namespace caprese {

// Low-rank residual corrector for one FFN block. A fresh layer has R = 0
// exactly, so it is output-neutral until distilled.
struct CapreseLayer {
    Matrix l;  // D x r
    Matrix r;  // r x D
    size_t rank() const { return l.cols; }
};

// L ~lora N(0, 1/sqrt(D)), R = 0.
CapreseLayer init_caprese_layer(size_t d_model, size_t rank, Rng& rng);

// x L R for a batch of rows; the two-term reference path.
Matrix residual_term_rows(const Matrix& x, const CapreseLayer& layer);

// One FFN block in the evaluable form generation uses: the weight triple
// actually multiplied (gathered for GRIFFIN, full for CATS/none, dequantized
// for quant) plus variant bookkeeping. `merged` flips once merge_weights has
// consumed the block; merging twice is a defect.
struct CompressedFfn {
    CompressionVariant variant = CompressionVariant::none;
    GatedFfnWeights weights;
    std::optional<GriffinSelection> selection;  // griffin only
    std::optional<CatsThreshold> threshold;     // cats only
    bool merged = false;
};

CompressedFfn compress_none(const GatedFfnWeights& w);
CompressedFfn compress_griffin(const GatedFfnWeights& w, const std::vector<float>& metric,
                               size_t k, size_t layer = 0);
CompressedFfn compress_cats(const GatedFfnWeights& w, CatsThreshold threshold);
CompressedFfn compress_quant(const GatedFfnWeights& w, int bits);

Matrix compressed_forward_rows(const Matrix& x, const CompressedFfn& f,
                               FfnTrace* trace = nullptr);
std::vector<float> compressed_forward(const std::vector<float>& x, const CompressedFfn& f);

// Weight-merged parallel form: residual factors concatenated into the up and
// down projections. The appended lanes are identity-gated by direct
// assignment; no ones-vector is materialized.
struct MergedFfn {
    Matrix w_gate;      // D x k, unchanged
    Matrix w_in_plus;   // D x (k + r)
    Matrix w_out_plus;  // (k + r) x D
    size_t rank = 0;
    std::optional<float> cats_tau;  // thresholds the original lanes only
};

// Throws StateError when the block was already merged or is quantized (the
// quantized path keeps the residual unmerged in full precision).
MergedFfn merge_weights(CompressedFfn& compressed, const CapreseLayer& layer);

Matrix merged_forward_rows(const Matrix& x, const MergedFfn& m, FfnTrace* trace = nullptr);
std::vector<float> merged_forward(const std::vector<float>& x, const MergedFfn& m);

// Residual-corrected forward: compressed_forward(x) + x L R, evaluated via
// the concatenated form for sparse variants and the two-term path for
// quantized blocks. Does not mutate `compressed`.
Matrix caprese_forward_rows(const Matrix& x, const CompressedFfn& compressed,
                            const CapreseLayer& layer);
std::vector<float> caprese_forward(const std::vector<float>& x, const CompressedFfn& compressed,
                                   const CapreseLayer& layer);

// ---- LoRA comparison block ----------------------------------------------------

// Adapter pair per projection; the down-projection adapter is shape-forced to
// A_out: D_FF x r, B_out: r x D.
struct LoraFfnParams {
    Matrix a_gate, a_in;  // D x r
    Matrix b_gate, b_in;  // r x D_FF
    Matrix a_out;         // D_FF x r
    Matrix b_out;         // r x D
};

LoraFfnParams init_lora_params(size_t d_model, size_t d_ff, size_t rank, Rng& rng);

// Adapter rank giving the same added-parameter count as a rank-r residual
// layer: 6 adapter matrices totalling 3 r_l (D + D_FF) vs 2 D r.
size_t lora_rank_for_matched_params(size_t d_model, size_t d_ff, size_t caprese_rank);

// The sparse-plus-LoRA block evaluated literally: masked full-width weights
// with each adapter applied as two sequential products.
Matrix lora_ffn_forward_rows(const Matrix& x, const GatedFfnWeights& masked,
                             const LoraFfnParams& lora);
std::vector<float> lora_ffn_forward(const std::vector<float>& x, const GatedFfnWeights& masked,
                                    const LoraFfnParams& lora);

// ---- model-facing backend -------------------------------------------------------

// Serves merged residual-corrected blocks where installed, the unmerged
// two-term path for quantized blocks, and the full FFN elsewhere.
class CapreseFfnBackend : public FfnBackend {
public:
    explicit CapreseFfnBackend(const ModelWeights& weights) : weights_(&weights) {}
    size_t layer_count() const override { return weights_->layers.size(); }

    void set_merged(size_t layer, MergedFfn merged);
    void set_two_term(size_t layer, CompressedFfn compressed, CapreseLayer residual);
    void clear_layer(size_t layer);
    const MergedFfn* merged(size_t layer) const;

    Matrix forward(size_t layer, const Matrix& x, FfnTrace* trace) override;

private:
    struct TwoTerm {
        CompressedFfn compressed;
        CapreseLayer residual;
    };
    const ModelWeights* weights_;
    std::vector<std::optional<MergedFfn>> merged_ =
        std::vector<std::optional<MergedFfn>>(weights_->layers.size());
    std::vector<std::optional<TwoTerm>> two_term_ =
        std::vector<std::optional<TwoTerm>>(weights_->layers.size());
};

}  // namespace caprese
