#pragma once

#include <vector>

#include "caprese/distill.hpp"
#include "caprese/model.hpp"
#include "caprese/tokenizer.hpp"

namespace caprese {

// Every trainable tensor of the toy model in double precision; the same
// shape doubles as the gradient holder.
struct ModelParams {
    struct Layer {
        MatrixD attn_norm;       // 1 x D gain
        MatrixD wq, wk, wv, wo;  // D x D
        MatrixD ffn_norm;        // 1 x D gain
        MatrixD w_gate, w_in;    // D x D_FF
        MatrixD w_out;           // D_FF x D
    };
    MatrixD embedding;  // vocab x D
    std::vector<Layer> layers;
    MatrixD final_norm;  // 1 x D gain

    // Pointers to every tensor in a fixed order; gradient holders enumerate
    // identically, so the lists stay parallel.
    std::vector<MatrixD*> tensors();
    std::vector<const MatrixD*> tensors() const;
};

ModelParams widen_params(const ModelWeights& weights);
ModelWeights narrow_params(const ModelParams& params, const ModelConfig& config);
ModelParams zeros_like(const ModelParams& params);

// Mean next-token cross-entropy (nats per predicted token) over docs.
// Position i predicts token i+1; documents shorter than two tokens
// contribute nothing. When grads is non-null it must be zeros_like-shaped
// and accumulates d loss / d tensor for every parameter, the tied embedding
// collecting both its input-row and output-head terms. Throws DomainError
// when no document yields a prediction or a token is out of vocab range,
// CapacityError when a context exceeds config.max_seq.
double next_token_loss_grads(const ModelConfig& config, const ModelParams& params,
                             const std::vector<TokenSequence>& docs, ModelParams* grads);

// Same loss on engine weights; the float-to-double boundary sits at entry.
double next_token_loss(const ModelWeights& weights, const std::vector<TokenSequence>& docs);

// Defaults for the toy next-token trainer; sized so a desk-scale corpus
// trains in seconds rather than minutes.
TrainConfig pretrain_defaults();

// Trains every parameter of a freshly initialized model (tied embedding,
// attention, norm gains, FFN) with Adam and the shared warmup/decay
// schedule, batching over documents. Single-owner and deterministic for a
// fixed config; cfg.workers is ignored. Returns the epoch-end checkpoint
// with the lowest full-corpus loss (the fresh init counts as a candidate).
// Records carry layer = -1 cast and loss_sum_d == loss: cross-entropy is
// already a per-token scalar, so the /D distinction does not apply.
// Throws NumericError when the loss stops being finite.
ModelWeights pretrain(const ModelConfig& config, const std::vector<TokenSequence>& docs,
                      const TrainConfig& cfg, const TrainLogger& logger = {});

}  // namespace caprese
