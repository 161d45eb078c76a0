#pragma once

#include <string>
#include <vector>

#include "caprese/caprese_layer.hpp"
#include "caprese/compress.hpp"
#include "caprese/model.hpp"
#include "caprese/rng.hpp"
#include "caprese/sampler.hpp"

namespace caprese {

// Reselection period rho = infinity: never reselect.
constexpr size_t kNoReselect = size_t(-1);

// Elementwise sqrt(s^2 + s_G^2): the l2 composition law, so folding a window
// equals the metric over the row-concatenated normalized activations.
std::vector<float> reselect_update(const std::vector<float>& s, const std::vector<float>& s_g);

// Prompt-selection metrics plus the verification-window bookkeeping.
struct ReselectionState {
    std::vector<std::vector<float>> s;    // per layer, length D_FF, entries >= 0
    std::vector<std::vector<float>> s_g;  // latest verified window's metric per layer
    size_t window_start = 0;              // absolute position of the first unverified token
    size_t tokens_since_reselect = 0;
    size_t period = kNoReselect;
};

struct SessionEvent {
    enum class Kind { step, reselect };
    Kind kind = Kind::step;
    size_t step = 0;                    // decode step index within the session
    Token token = 0;                    // chosen token (step events)
    std::vector<float> layer_sparsity;  // realized z sparsity of the producing forward
    std::vector<float> metric_delta;    // per layer ||s_new - s||_2 (reselect events)
};

std::string format_event(const SessionEvent& event);

// Single-owner compressed generation session. Prefill always runs the
// original model: it fills the KV cache, captures per-layer activations,
// selects or calibrates the compression, and merges the residual layers.
struct GenerationSession {
    const ModelWeights* model = nullptr;
    CompressionSpec spec;
    SamplerConfig sampler;
    std::vector<CapreseLayer> layers;  // one per model layer; rank 0 when absent
    std::vector<GriffinSelection> selections;  // current gather per pruned layer
    KvCache cache;
    CapreseFfnBackend backend;
    ReselectionState resel;
    Rng rng;  // one sampling stream per session; reselection never draws
    size_t prompt_len = 0;
    TokenSequence generated;  // every token sampled by this session
    std::vector<SessionEvent> events;
    Matrix last_logits;                    // logits at the latest fed position
    std::vector<FfnTrace> last_traces;     // capture of the latest forward
    std::vector<float> last_sparsity;      // per-layer z sparsity of that forward

    explicit GenerationSession(const ModelWeights& weights)
        : model(&weights), cache(weights.config), backend(weights), rng(0) {}
};

// Full-model prefill, metric/threshold selection from the captured
// activations, weight gather and residual merge. layers, when given, must
// hold one entry per model layer. Throws DomainError on an empty prompt,
// CapacityError past max_seq.
GenerationSession prefill_select(const TokenSequence& prompt, const ModelWeights& model,
                                 const CompressionSpec& spec, const SamplerConfig& sampler = {},
                                 const std::vector<CapreseLayer>* layers = nullptr);

// Decodes up to `steps` tokens, reselecting every `period` fed tokens: the
// tokens generated since the last reselection run through the full model
// (reusing cached keys/values for earlier positions), their KV rows are
// overwritten, s is folded with the window metric, and the pruned weights
// are re-gathered and re-merged. period 0 is rejected (run the full model
// instead); finite periods require the griffin variant. Returns only this
// call's continuation; sessions resume across calls.
TokenSequence generate_with_reselection(GenerationSession& session, size_t steps, size_t period);

// Fixed-threshold decode for CATS sessions; realized sparsity is logged per
// step. Thresholds are never recalibrated mid-generation.
TokenSequence cats_generate(GenerationSession& session, size_t steps);

// Mean relative FFN output error of compressed blocks against the original
// weights on the same inputs, averaged over every decode step of every
// prompt. Drives one session per prompt with the given period.
struct DecodeErrorStats {
    std::vector<double> per_layer;  // compressed layers only; others NaN-free zero count
    std::vector<size_t> samples;    // comparisons per layer
    double mean = 0.0;              // over all compared layers and steps
};

DecodeErrorStats decode_ffn_error(const ModelWeights& model, const CompressionSpec& spec,
                                  const std::vector<TokenSequence>& prompts, size_t steps,
                                  const SamplerConfig& sampler, size_t period,
                                  const std::vector<CapreseLayer>* layers = nullptr);

}  // namespace caprese
