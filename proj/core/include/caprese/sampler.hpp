#pragma once

#include <cstdint>
#include <vector>

#include "caprese/model.hpp"
#include "caprese/rng.hpp"

namespace caprese {

struct SamplerConfig {
    float temperature = 0.6f;
    float top_p = 0.95f;
    uint64_t seed = 0;
    bool greedy = false;        // argmax decoding, ignores temperature/top_p
    Token eos = kEosToken;      // negative disables the stop token
    void validate() const;      // throws ConfigError
};

// Softmax probabilities of one logit row, computed in double.
std::vector<double> softmax_probs(const float* logits, size_t n, double temperature = 1.0);

// Nucleus sampling: keep the smallest probability-descending prefix with
// cumulative mass >= top_p (ties toward the lower index), renormalize, draw.
Token sample_token(const float* logits, size_t n, const SamplerConfig& config, Rng& rng);

// Autoregressive decode for at most `steps` tokens; stops after emitting the
// EOS token. Returns only the generated continuation (EOS included when hit).
TokenSequence generate(const TokenSequence& prompt, size_t steps, const ModelWeights& weights,
                       FfnBackend& ffn, const SamplerConfig& sampler);

}  // namespace caprese
