#include "caprese/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <thread>

#include "caprese/errors.hpp"
#include "caprese/linalg.hpp"
#include "caprese/rng.hpp"

namespace caprese {

namespace {

double l2_row(const double* p, size_t n) {
    double s = 0.0;
    for (size_t j = 0; j < n; ++j) s += p[j] * p[j];
    return std::sqrt(s);
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

// ---- residual error curve ---------------------------------------------------

double ErrorCurveTable::at(double density, size_t rank) const {
    for (const ErrorCurveRow& row : rows)
        if (row.density == density && row.residual_rank == rank) return row.error;
    throw DomainError("error curve: no row for the requested density and rank");
}

ErrorCurveTable residual_error_curve(const ModelWeights& model,
                                     const std::vector<TokenSequence>& prompts,
                                     const std::vector<double>& densities,
                                     const std::vector<size_t>& ranks, size_t n_tokens,
                                     const SamplerConfig& sampler) {
    if (prompts.empty()) throw DomainError("residual_error_curve: no prompts");
    if (densities.empty()) throw DomainError("residual_error_curve: no densities");
    for (double d : densities)
        if (!(d > 0.0) || d > 1.0)
            throw DomainError("residual_error_curve: densities must lie in (0, 1]");
    if (std::find(ranks.begin(), ranks.end(), size_t(0)) == ranks.end())
        throw DomainError("residual_error_curve: ranks must include 0");
    if (n_tokens == 0) throw DomainError("residual_error_curve: n_tokens must be at least 1");
    model.config.validate();
    sampler.validate();

    const ModelConfig& cfg = model.config;
    const size_t d_ff = cfg.d_ff;
    const size_t max_rank = *std::max_element(ranks.begin(), ranks.end());
    if (max_rank > cfg.d_model)
        throw DomainError("residual_error_curve: rank exceeds the model width");

    // Decode with the unmodified model, collecting the gated activations and
    // FF outputs of every generated token.
    std::vector<std::vector<float>> z_rows(cfg.n_layers), y_rows(cfg.n_layers);
    size_t tokens = 0;
    Rng rng(sampler.seed);
    for (const TokenSequence& prompt : prompts) {
        KvCache cache(cfg);
        FullFfnBackend full(model);
        std::vector<FfnTrace> traces;
        Matrix logits = model_forward(prompt, model, cache, full, &traces);
        for (size_t step = 0; step < n_tokens; ++step) {
            const Token next =
                sample_token(logits.row(logits.rows - 1), cfg.vocab_size, sampler, rng);
            if (next == sampler.eos) break;
            traces.clear();
            logits = model_forward({next}, model, cache, full, &traces);
            for (size_t l = 0; l < cfg.n_layers; ++l) {
                const FfnTrace& tr = traces[l];
                z_rows[l].insert(z_rows[l].end(), tr.z.data.begin(), tr.z.data.end());
                y_rows[l].insert(y_rows[l].end(), tr.y.data.begin(), tr.y.data.end());
            }
            ++tokens;
        }
    }
    if (tokens == 0)
        throw DomainError("residual_error_curve: generation produced no tokens to sample");

    ErrorCurveTable table;
    table.densities = densities;
    table.ranks = ranks;
    std::vector<double> err_sum(densities.size() * ranks.size(), 0.0);

    for (size_t l = 0; l < cfg.n_layers; ++l) {
        const Matrix z(tokens, d_ff, std::move(z_rows[l]));
        const Matrix y(tokens, cfg.d_model, std::move(y_rows[l]));
        const MatrixD yd = widen(y);
        std::vector<double> y_norm(tokens);
        for (size_t t = 0; t < tokens; ++t)
            y_norm[t] = std::max(l2_row(yd.row(t), cfg.d_model), 1e-30);

        for (size_t di = 0; di < densities.size(); ++di) {
            const size_t k =
                size_t(std::clamp<long long>(std::llround(densities[di] * double(d_ff)),
                                             0, (long long)d_ff));
            Matrix zm(tokens, d_ff);
            std::vector<float> mag(d_ff);
            for (size_t t = 0; t < tokens; ++t) {
                const float* src = z.row(t);
                for (size_t j = 0; j < d_ff; ++j) mag[j] = std::fabs(src[j]);
                float* dst = zm.row(t);
                for (size_t j : topk_indices(mag, k)) dst[j] = src[j];
            }
            // Same product the engine runs, so density 1 reproduces y exactly.
            const Matrix ys = matmul(zm, model.layers[l].ffn.w_out);
            MatrixD resid = widen(y);
            const MatrixD ysd = widen(ys);
            for (size_t i = 0; i < resid.size(); ++i) resid.data[i] -= ysd.data[i];

            const size_t svd_cap = std::min({max_rank, tokens, size_t(cfg.d_model)});
            SvdResultD svd;
            if (svd_cap > 0) svd = truncated_svd(resid, svd_cap);

            for (size_t ri = 0; ri < ranks.size(); ++ri) {
                MatrixD err = resid;
                const size_t r = std::min(ranks[ri], svd_cap);
                if (r > 0) {
                    MatrixD vr(cfg.d_model, r);
                    for (size_t i = 0; i < size_t(cfg.d_model); ++i)
                        for (size_t j = 0; j < r; ++j) vr.at(i, j) = svd.v.at(i, j);
                    const MatrixD low = matmul(matmul(resid, vr), transpose(vr));
                    for (size_t i = 0; i < err.size(); ++i) err.data[i] -= low.data[i];
                }
                double sum = 0.0;
                for (size_t t = 0; t < tokens; ++t)
                    sum += l2_row(err.row(t), cfg.d_model) / y_norm[t];
                err_sum[di * ranks.size() + ri] += sum;
            }
        }
    }

    for (size_t di = 0; di < densities.size(); ++di)
        for (size_t ri = 0; ri < ranks.size(); ++ri) {
            ErrorCurveRow row;
            row.density = densities[di];
            row.residual_rank = ranks[ri];
            row.error = err_sum[di * ranks.size() + ri] / double(tokens * cfg.n_layers);
            table.rows.push_back(row);
        }
    return table;
}

// ---- coverage scaling ---------------------------------------------------------

double pass_at_k(size_t pool_size, size_t correct, size_t k) {
    if (k == 0 || k > pool_size)
        throw DomainError("pass_at_k: K must lie in [1, pool size]");
    if (correct > pool_size)
        throw DomainError("pass_at_k: more correct draws than the pool holds");
    if (correct == 0) return 0.0;
    if (pool_size - correct < k) return 1.0;
    double miss = 1.0;
    for (size_t i = 0; i < k; ++i)
        miss *= double(pool_size - correct - i) / double(pool_size - i);
    return 1.0 - miss;
}

void CoverageReport::annotate(double a) {
    compute_units = relative_compute_units(n, a);
    active_fraction = a;
}

CoverageReport coverage_estimate(const std::vector<std::vector<bool>>& outcomes, size_t k_max,
                                 size_t pools, size_t pool_size, uint64_t seed) {
    if (outcomes.empty()) throw DomainError("coverage_estimate: no samples");
    const size_t n = outcomes[0].size();
    for (const std::vector<bool>& row : outcomes)
        if (row.size() != n) throw ShapeError("coverage_estimate: ragged outcome rows");
    if (pool_size == 0 || pool_size > n)
        throw DomainError("coverage_estimate: pool size must lie in [1, draws per sample]");
    if (k_max == 0 || k_max > pool_size)
        throw DomainError("coverage_estimate: K exceeds the pool size");
    if (pools == 0) throw DomainError("coverage_estimate: need at least one pool");

    CoverageReport report;
    report.n = n;
    report.pool_size = pool_size;
    report.pools = pools;
    report.annotate(1.0);

    Rng rng(seed);
    std::vector<std::vector<double>> pool_cov(pools, std::vector<double>(k_max, 0.0));
    std::vector<size_t> idx(n);
    for (size_t p = 0; p < pools; ++p) {
        Rng prng = rng.fork(p + 1);
        for (const std::vector<bool>& row : outcomes) {
            for (size_t i = 0; i < n; ++i) idx[i] = i;
            size_t correct = 0;
            for (size_t i = 0; i < pool_size; ++i) {
                std::swap(idx[i], idx[i + prng.below(n - i)]);
                if (row[idx[i]]) ++correct;
            }
            for (size_t k = 1; k <= k_max; ++k)
                pool_cov[p][k - 1] += pass_at_k(pool_size, correct, k);
        }
        for (size_t k = 0; k < k_max; ++k) pool_cov[p][k] /= double(outcomes.size());
    }

    report.mean.resize(k_max);
    report.stddev.resize(k_max);
    for (size_t k = 0; k < k_max; ++k) {
        double mean = 0.0;
        for (size_t p = 0; p < pools; ++p) mean += pool_cov[p][k];
        mean /= double(pools);
        double var = 0.0;
        for (size_t p = 0; p < pools; ++p) {
            const double d = pool_cov[p][k] - mean;
            var += d * d;
        }
        report.mean[k] = mean;
        report.stddev[k] = pools > 1 ? std::sqrt(var / double(pools - 1)) : 0.0;
    }
    return report;
}

double relative_compute_units(size_t n, double a) {
    if (n == 0) throw DomainError("relative_compute_units: N must be at least 1");
    if (!(a > 0.0) || a > 1.0)
        throw DomainError("relative_compute_units: active fraction must lie in (0, 1]");
    return double(n) * a;
}

// ---- latency -----------------------------------------------------------------

namespace {

// Serves the gathered block with LoRA adapter pairs on the gate, in, and out
// projections applied as sequential thin products per step (the unmergeable
// adapter variant); the full FFN elsewhere.
class AdapterFfnBackend final : public FfnBackend {
public:
    explicit AdapterFfnBackend(const ModelWeights& weights)
        : weights_(&weights), blocks_(weights.layers.size()) {}
    size_t layer_count() const override { return weights_->layers.size(); }
    void set(size_t layer, CompressedFfn compressed, LoraFfnParams lora) {
        blocks_[layer].emplace(Block{std::move(compressed), std::move(lora)});
    }
    Matrix forward(size_t layer, const Matrix& x, FfnTrace* trace) override {
        if (!blocks_[layer]) return ffn_forward_rows(x, weights_->layers[layer].ffn, trace);
        return lora_ffn_forward_rows(x, blocks_[layer]->compressed.weights,
                                     blocks_[layer]->lora);
    }

private:
    struct Block {
        CompressedFfn compressed;
        LoraFfnParams lora;
    };
    const ModelWeights* weights_;
    std::vector<std::optional<Block>> blocks_;
};

std::string read_governor() {
    std::ifstream in("/sys/devices/system/cpu/cpu0/cpufreq/scaling_governor");
    std::string value;
    if (in && std::getline(in, value) && !value.empty()) return "governor " + value;
    return "governor unavailable";
}

}  // namespace

std::string latency_method_name(LatencyMethod method) {
    switch (method) {
        case LatencyMethod::full: return "full";
        case LatencyMethod::griffin: return "griffin";
        case LatencyMethod::griffin_lora: return "griffin-lora";
        case LatencyMethod::caprese: return "caprese";
    }
    throw DomainError("latency_method_name: unknown method");
}

LatencyReport latency_bench(const ModelWeights& model, const CompressionSpec& spec,
                            const LatencyConfig& cfg) {
    if (cfg.reps < 3)
        throw DomainError("latency_bench: need at least 3 timed repetitions");
    if (cfg.prompt_tokens == 0 || cfg.gen_tokens == 0)
        throw DomainError("latency_bench: prompt and generation lengths must be positive");
    if (cfg.methods.empty()) throw DomainError("latency_bench: no methods");
    if (cfg.rank == 0) throw DomainError("latency_bench: residual rank must be positive");
    model.config.validate();
    spec.validate();
    const ModelConfig& mc = model.config;
    if (cfg.prompt_tokens + cfg.gen_tokens > mc.max_seq)
        throw DomainError("latency_bench: prompt plus generation exceeds the model context");

    TokenSequence prompt(cfg.prompt_tokens);
    for (size_t i = 0; i < cfg.prompt_tokens; ++i)
        prompt[i] = Token((i * 37 + 11) % mc.vocab_size);

    SamplerConfig greedy;
    greedy.greedy = true;
    greedy.eos = Token(-1);  // every rep decodes exactly G steps

    const size_t k = griffin_k(spec.sparsity, mc.d_ff);
    const LayerRange range = spec.resolve_range(mc.n_layers);

    LatencyReport report;
    report.cores = std::max(1u, std::thread::hardware_concurrency());
    report.governor_note = read_governor();

    using Clock = std::chrono::steady_clock;
    const auto seconds = [](Clock::time_point a, Clock::time_point b) {
        return std::chrono::duration<double>(b - a).count();
    };

    // Methods interleave within each repetition so clock drift lands on all
    // of them alike; odd reps run in reverse order so a linear drift within a
    // repetition cancels across the pair. Rep 0 is a discarded warmup.
    const size_t nm = cfg.methods.size();
    std::vector<std::vector<double>> e2e(nm), prefill(nm), ttnt(nm);
    for (size_t rep = 0; rep <= cfg.reps; ++rep) {
        for (size_t step = 0; step < nm; ++step) {
            const size_t mi = rep % 2 == 0 ? step : nm - 1 - step;
            const LatencyMethod method = cfg.methods[mi];
            Rng setup_rng(7);
            const auto t0 = Clock::now();
            KvCache cache(mc);
            FullFfnBackend full_backend(model);
            CapreseFfnBackend merged_backend(model);
            AdapterFfnBackend adapter_backend(model);
            FfnBackend* backend = &full_backend;

            std::vector<FfnTrace> traces;
            Matrix logits = model_forward(
                prompt, model, cache, full_backend,
                method == LatencyMethod::full ? nullptr : &traces);

            if (method != LatencyMethod::full) {
                for (size_t l = range.begin; l < range.end; ++l) {
                    const std::vector<float> metric = griffin_metric(traces[l].z);
                    CompressedFfn cf = compress_griffin(model.layers[l].ffn, metric, k, l);
                    if (method == LatencyMethod::griffin_lora) {
                        // Adapter rank matched to the caprese parameter budget
                        // over the gathered width.
                        const size_t rl =
                            lora_rank_for_matched_params(mc.d_model, k, cfg.rank);
                        LoraFfnParams lora =
                            init_lora_params(mc.d_model, k, rl, setup_rng);
                        adapter_backend.set(l, std::move(cf), std::move(lora));
                    } else {
                        CapreseLayer residual;
                        if (method == LatencyMethod::caprese) {
                            residual = init_caprese_layer(mc.d_model, cfg.rank, setup_rng);
                        } else {
                            residual.l = Matrix(mc.d_model, 0);
                            residual.r = Matrix(0, mc.d_model);
                        }
                        merged_backend.set_merged(l, merge_weights(cf, residual));
                    }
                }
                backend = method == LatencyMethod::griffin_lora
                              ? static_cast<FfnBackend*>(&adapter_backend)
                              : static_cast<FfnBackend*>(&merged_backend);
            }
            const auto t1 = Clock::now();

            Rng rng(greedy.seed);
            for (size_t g = 0; g < cfg.gen_tokens; ++g) {
                const Token next =
                    sample_token(logits.row(logits.rows - 1), mc.vocab_size, greedy, rng);
                logits = model_forward({next}, model, cache, *backend);
            }
            const auto t2 = Clock::now();

            if (rep == 0) continue;
            e2e[mi].push_back(seconds(t0, t2));
            prefill[mi].push_back(seconds(t0, t1));
            ttnt[mi].push_back(seconds(t1, t2) / double(cfg.gen_tokens) * 1e3);
        }
    }

    for (size_t mi = 0; mi < cfg.methods.size(); ++mi) {
        LatencyRow row;
        row.method = cfg.methods[mi];
        row.prompt_tokens = cfg.prompt_tokens;
        row.gen_tokens = cfg.gen_tokens;
        row.reps = cfg.reps;
        row.end_to_end_s = median(e2e[mi]);
        row.prefill_s = median(prefill[mi]);
        row.ttnt_ms = median(ttnt[mi]);
        report.rows.push_back(row);
    }
    return report;
}

// ---- response lengths -----------------------------------------------------------

LengthStats response_length_stats(const std::vector<TokenSequence>& logs,
                                  const std::vector<int>& labels) {
    if (logs.empty()) throw DomainError("response_length_stats: no logs");
    if (labels.size() > logs.size())
        throw ShapeError("response_length_stats: more labels than logs");
    for (int label : labels)
        if (label < 0)
            throw DomainError(
                "response_length_stats: labels are nonnegative; -1 is the unlabeled bucket");

    std::map<int, std::pair<size_t, double>> buckets;  // label -> (count, token sum)
    double total = 0.0;
    for (size_t i = 0; i < logs.size(); ++i) {
        const int label = i < labels.size() ? labels[i] : -1;
        auto& [count, sum] = buckets[label];
        ++count;
        sum += double(logs[i].size());
        total += double(logs[i].size());
    }

    LengthStats stats;
    stats.total_logs = logs.size();
    stats.global_mean = total / double(logs.size());
    for (const auto& [label, acc] : buckets) {
        LengthBucket bucket;
        bucket.label = label;
        bucket.count = acc.first;
        bucket.mean_tokens = acc.second / double(acc.first);
        stats.buckets.push_back(bucket);
    }
    return stats;
}

// ---- singular spectra -------------------------------------------------------------

SpectrumReport singular_spectrum(const std::vector<CapreseLayer>& layers) {
    if (layers.empty()) throw DomainError("singular_spectrum: no layers");
    SpectrumReport report;
    size_t longest = 0;
    for (size_t l = 0; l < layers.size(); ++l) {
        SingularSpectrum sp;
        sp.layer = l;
        const size_t d = layers[l].l.rows;
        const size_t keep = std::min(layers[l].rank(), d);
        if (keep == 0) {
            sp.degenerate = true;
            report.layers.push_back(sp);
            continue;
        }
        const MatrixD product = matmul(widen(layers[l].l), widen(layers[l].r));
        const SvdResultD svd = truncated_svd(product, keep);
        if (!(svd.singular_values[0] > 0.0)) {
            sp.degenerate = true;
            report.layers.push_back(sp);
            continue;
        }
        sp.relative.resize(keep);
        for (size_t i = 0; i < keep; ++i)
            sp.relative[i] = svd.singular_values[i] / svd.singular_values[0];
        longest = std::max(longest, keep);
        report.layers.push_back(sp);
    }

    report.mean_curve.assign(longest, 0.0);
    std::vector<size_t> counts(longest, 0);
    for (const SingularSpectrum& sp : report.layers)
        for (size_t i = 0; i < sp.relative.size(); ++i) {
            report.mean_curve[i] += sp.relative[i];
            ++counts[i];
        }
    for (size_t i = 0; i < longest; ++i) report.mean_curve[i] /= double(counts[i]);
    return report;
}

}  // namespace caprese
