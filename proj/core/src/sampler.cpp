#include "caprese/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "caprese/errors.hpp"

namespace caprese {

void SamplerConfig::validate() const {
    if (!greedy && temperature <= 0.0f)
        throw ConfigError("sampler: temperature must be positive (or use greedy)");
    if (top_p <= 0.0f || top_p > 1.0f) throw ConfigError("sampler: top_p must be in (0, 1]");
}

std::vector<double> softmax_probs(const float* logits, size_t n, double temperature) {
    double max_logit = -1e300;
    for (size_t i = 0; i < n; ++i) max_logit = std::max(max_logit, double(logits[i]));
    std::vector<double> p(n);
    double denom = 0.0;
    for (size_t i = 0; i < n; ++i) {
        p[i] = std::exp((double(logits[i]) - max_logit) / temperature);
        denom += p[i];
    }
    for (double& v : p) v /= denom;
    return p;
}

Token sample_token(const float* logits, size_t n, const SamplerConfig& config, Rng& rng) {
    config.validate();
    if (n == 0) throw ShapeError("sample_token: empty logit row");
    if (config.greedy) {
        size_t best = 0;
        for (size_t i = 1; i < n; ++i)
            if (logits[i] > logits[best]) best = i;
        return Token(best);
    }
    const std::vector<double> p = softmax_probs(logits, n, double(config.temperature));
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t(0));
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (p[a] != p[b]) return p[a] > p[b];
        return a < b;
    });
    double mass = 0.0;
    size_t kept = 0;
    while (kept < n) {
        mass += p[order[kept]];
        ++kept;
        if (mass >= double(config.top_p)) break;
    }
    const double u = rng.uniform() * mass;
    double cum = 0.0;
    for (size_t i = 0; i < kept; ++i) {
        cum += p[order[i]];
        if (u < cum) return Token(order[i]);
    }
    return Token(order[kept - 1]);
}

TokenSequence generate(const TokenSequence& prompt, size_t steps, const ModelWeights& weights,
                       FfnBackend& ffn, const SamplerConfig& sampler) {
    sampler.validate();
    if (steps < 1) throw DomainError("generate: steps must be at least 1");
    if (prompt.empty()) throw DomainError("generate: empty prompt");

    KvCache cache(weights.config);
    Rng rng(sampler.seed);
    TokenSequence out;
    Matrix logits = model_forward(prompt, weights, cache, ffn);
    for (size_t step = 0; step < steps; ++step) {
        const float* row = logits.row(logits.rows - 1);
        const Token next = sample_token(row, weights.config.vocab_size, sampler, rng);
        out.push_back(next);
        if (next == sampler.eos) break;
        if (step + 1 == steps) break;
        logits = model_forward({next}, weights, cache, ffn);
    }
    return out;
}

}  // namespace caprese
