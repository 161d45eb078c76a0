#include "caprese/reselect.hpp"

#include <cmath>
#include <cstdio>
#include <utility>

#include "caprese/errors.hpp"

namespace caprese {

namespace {

float l2_delta(const std::vector<float>& a, const std::vector<float>& b) {
    double sum = 0.0;
    for (size_t j = 0; j < a.size(); ++j) {
        const double d = double(a[j]) - double(b[j]);
        sum += d * d;
    }
    return float(std::sqrt(sum));
}

void append_floats(std::string& out, const std::vector<float>& values) {
    char buf[32];
    for (size_t i = 0; i < values.size(); ++i) {
        std::snprintf(buf, sizeof(buf), i ? ",%.6f" : "%.6f", double(values[i]));
        out += buf;
    }
}

// Re-gathers the layer's pruned weights from the current metric and merges
// the residual factors back in.
void gather_merge_layer(GenerationSession& ses, size_t layer) {
    const GatedFfnWeights& w = ses.model->layers[layer].ffn;
    const size_t k = griffin_k(ses.spec.sparsity, ses.model->config.d_ff);
    CompressedFfn cf = compress_griffin(w, ses.resel.s[layer], k, layer);
    ses.selections[layer] = *cf.selection;
    ses.backend.set_merged(layer, merge_weights(cf, ses.layers[layer]));
}

void feed(GenerationSession& ses, Token token) {
    ses.last_traces.clear();
    ses.last_logits =
        model_forward(TokenSequence{token}, *ses.model, ses.cache, ses.backend, &ses.last_traces);
    for (size_t l = 0; l < ses.last_traces.size(); ++l)
        ses.last_sparsity[l] = float(ses.last_traces[l].zero_fraction);
    ++ses.resel.tokens_since_reselect;
}

// Verification pass: the window tokens run through the full model against
// the cached prefix, overwriting their KV rows; the captured activations
// fold into the metric and the pruned weights are re-gathered.
void do_reselect(GenerationSession& ses) {
    const size_t count = ses.resel.tokens_since_reselect;
    if (count == 0) return;
    const size_t base = ses.resel.window_start;
    const size_t gen_off = base - ses.prompt_len;
    const TokenSequence window(ses.generated.begin() + gen_off,
                               ses.generated.begin() + gen_off + count);

    FullFfnBackend full(*ses.model);
    std::vector<FfnTrace> traces;
    model_forward(window, *ses.model, ses.cache, full, &traces, base);

    SessionEvent ev;
    ev.kind = SessionEvent::Kind::reselect;
    ev.step = ses.generated.size() - 1;
    const size_t n_layers = ses.model->config.n_layers;
    ev.metric_delta.reserve(n_layers);
    for (size_t l = 0; l < n_layers; ++l) {
        ses.resel.s_g[l] = griffin_metric(traces[l].z);
        std::vector<float> updated = reselect_update(ses.resel.s[l], ses.resel.s_g[l]);
        ev.metric_delta.push_back(l2_delta(updated, ses.resel.s[l]));
        ses.resel.s[l] = std::move(updated);
    }
    if (ses.spec.variant == CompressionVariant::griffin) {
        const LayerRange range = ses.spec.resolve_range(n_layers);
        for (size_t l = range.begin; l < range.end; ++l) gather_merge_layer(ses, l);
    }
    ses.resel.window_start = base + count;
    ses.resel.tokens_since_reselect = 0;
    ses.events.push_back(std::move(ev));
}

// Sample, log, feed, reselect on schedule. Every sampled token except EOS is
// fed immediately, so the session resumes cleanly across calls.
TokenSequence decode_loop(GenerationSession& ses, size_t steps) {
    if (steps < 1) throw DomainError("generate: steps must be at least 1");
    const size_t vocab = ses.model->config.vocab_size;
    TokenSequence out;
    for (size_t step = 0; step < steps; ++step) {
        const float* row = ses.last_logits.row(ses.last_logits.rows - 1);
        const Token next = sample_token(row, vocab, ses.sampler, ses.rng);
        out.push_back(next);
        SessionEvent ev;
        ev.kind = SessionEvent::Kind::step;
        ev.step = ses.generated.size();
        ev.token = next;
        ev.layer_sparsity = ses.last_sparsity;
        ses.generated.push_back(next);
        ses.events.push_back(std::move(ev));
        if (next == ses.sampler.eos) break;
        feed(ses, next);
        if (ses.resel.period != kNoReselect &&
            ses.resel.tokens_since_reselect >= ses.resel.period)
            do_reselect(ses);
    }
    return out;
}

}  // namespace

std::vector<float> reselect_update(const std::vector<float>& s, const std::vector<float>& s_g) {
    if (s.size() != s_g.size()) throw ShapeError("reselect_update: metric length mismatch");
    std::vector<float> out(s.size());
    for (size_t j = 0; j < s.size(); ++j)
        out[j] = float(std::sqrt(double(s[j]) * s[j] + double(s_g[j]) * s_g[j]));
    return out;
}

std::string format_event(const SessionEvent& event) {
    char buf[64];
    std::string out;
    if (event.kind == SessionEvent::Kind::step) {
        std::snprintf(buf, sizeof(buf), "step=%zu token=%d sparsity=", event.step,
                      int(event.token));
        out = buf;
        append_floats(out, event.layer_sparsity);
    } else {
        std::snprintf(buf, sizeof(buf), "reselect step=%zu delta=", event.step);
        out = buf;
        append_floats(out, event.metric_delta);
    }
    return out;
}

GenerationSession prefill_select(const TokenSequence& prompt, const ModelWeights& model,
                                 const CompressionSpec& spec, const SamplerConfig& sampler,
                                 const std::vector<CapreseLayer>* layers) {
    if (prompt.empty()) throw DomainError("prefill_select: empty prompt");
    model.config.validate();
    spec.validate();
    sampler.validate();

    GenerationSession ses(model);
    ses.spec = spec;
    ses.sampler = sampler;
    ses.rng = Rng(sampler.seed);
    const ModelConfig& cfg = model.config;
    if (layers) {
        if (layers->size() != cfg.n_layers)
            throw ShapeError("prefill_select: need one residual layer per model layer");
        ses.layers = *layers;
    } else {
        CapreseLayer none;  // rank 0: merged blocks gain no residual lanes
        none.l = Matrix(cfg.d_model, 0);
        none.r = Matrix(0, cfg.d_model);
        ses.layers.assign(cfg.n_layers, none);
    }

    FullFfnBackend full(model);
    std::vector<FfnTrace> traces;
    ses.last_logits = model_forward(prompt, model, ses.cache, full, &traces);
    ses.prompt_len = prompt.size();
    ses.resel.window_start = prompt.size();
    ses.resel.s.resize(cfg.n_layers);
    ses.resel.s_g.resize(cfg.n_layers);
    ses.selections.resize(cfg.n_layers);
    ses.last_sparsity.assign(cfg.n_layers, 0.0f);
    for (size_t l = 0; l < cfg.n_layers; ++l) {
        ses.resel.s[l] = griffin_metric(traces[l].z);
        ses.resel.s_g[l].assign(cfg.d_ff, 0.0f);
        ses.last_sparsity[l] = float(traces[l].zero_fraction);
    }

    const LayerRange range = spec.resolve_range(cfg.n_layers);
    for (size_t l = range.begin; l < range.end; ++l) {
        const GatedFfnWeights& w = model.layers[l].ffn;
        switch (spec.variant) {
            case CompressionVariant::none:
                break;
            case CompressionVariant::griffin:
                gather_merge_layer(ses, l);
                break;
            case CompressionVariant::cats: {
                const CatsThreshold th = cats_calibrate(traces[l].gate, spec.sparsity, l);
                CompressedFfn cf = compress_cats(w, th);
                ses.backend.set_merged(l, merge_weights(cf, ses.layers[l]));
                break;
            }
            case CompressionVariant::quant:
                ses.backend.set_two_term(l, compress_quant(w, spec.bits), ses.layers[l]);
                break;
        }
    }
    ses.last_traces = std::move(traces);
    return ses;
}

TokenSequence generate_with_reselection(GenerationSession& session, size_t steps, size_t period) {
    if (period == 0)
        throw ConfigError(
            "generate_with_reselection: period 0 means the full model; run it uncompressed");
    if (period != kNoReselect && session.spec.variant != CompressionVariant::griffin)
        throw ConfigError("generate_with_reselection: reselection is GRIFFIN-only");
    session.resel.period = period;
    return decode_loop(session, steps);
}

TokenSequence cats_generate(GenerationSession& session, size_t steps) {
    if (session.spec.variant != CompressionVariant::cats)
        throw ConfigError("cats_generate: session is not CATS-compressed");
    session.resel.period = kNoReselect;
    return decode_loop(session, steps);
}

DecodeErrorStats decode_ffn_error(const ModelWeights& model, const CompressionSpec& spec,
                                  const std::vector<TokenSequence>& prompts, size_t steps,
                                  const SamplerConfig& sampler, size_t period,
                                  const std::vector<CapreseLayer>* layers) {
    if (prompts.empty()) throw DomainError("decode_ffn_error: no prompts");
    const size_t n_layers = model.config.n_layers;
    const LayerRange range = spec.resolve_range(n_layers);
    DecodeErrorStats stats;
    stats.per_layer.assign(n_layers, 0.0);
    stats.samples.assign(n_layers, 0);
    double total = 0.0;
    size_t n_total = 0;

    for (const TokenSequence& prompt : prompts) {
        GenerationSession ses = prefill_select(prompt, model, spec, sampler, layers);
        for (size_t i = 0; i < steps; ++i) {
            const size_t before = ses.cache.len();
            generate_with_reselection(ses, 1, period);
            if (ses.cache.len() == before) break;  // EOS sampled, nothing fed
            for (size_t l = range.begin; l < range.end; ++l) {
                const FfnTrace& tr = ses.last_traces[l];
                const Matrix full_y = ffn_forward_rows(tr.x, model.layers[l].ffn);
                const double err = relative_error(tr.y, full_y);
                stats.per_layer[l] += err;
                ++stats.samples[l];
                total += err;
                ++n_total;
            }
        }
    }
    for (size_t l = 0; l < n_layers; ++l)
        if (stats.samples[l]) stats.per_layer[l] /= double(stats.samples[l]);
    stats.mean = n_total ? total / double(n_total) : 0.0;
    return stats;
}

}  // namespace caprese
