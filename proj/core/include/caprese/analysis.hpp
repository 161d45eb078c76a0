#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "caprese/caprese_layer.hpp"
#include "caprese/compress.hpp"
#include "caprese/model.hpp"
#include "caprese/sampler.hpp"

namespace caprese {

// ---- residual error curve ---------------------------------------------------

struct ErrorCurveRow {
    double density = 0.0;
    size_t residual_rank = 0;
    double error = 0.0;  // mean relative FF output error over tokens and layers
};

struct ErrorCurveTable {
    std::vector<double> densities;    // as given
    std::vector<size_t> ranks;        // as given, must contain 0
    std::vector<ErrorCurveRow> rows;  // density-major, rank-minor
    // Exact-key lookup; throws DomainError for a (density, rank) not in the sweep.
    double at(double density, size_t rank) const;
};

// Oracle sparsity sweep over tokens generated by the unmodified model. Per
// token and FFN block, keep the top density*D_FF entries of the gated
// activation magnitudes |sigma(xW_g) .* xW_1|; for rank > 0, add back the best
// rank-r approximation (truncated SVD over the whole token batch) of the
// output residual. Each cell is the mean over tokens and layers of
// ||FF(x) - approx(x)||_2 / ||FF(x)||_2, the norms taken per token.
ErrorCurveTable residual_error_curve(const ModelWeights& model,
                                     const std::vector<TokenSequence>& prompts,
                                     const std::vector<double>& densities,
                                     const std::vector<size_t>& ranks, size_t n_tokens,
                                     const SamplerConfig& sampler = {});

// ---- coverage scaling -------------------------------------------------------

struct CoverageReport {
    size_t n = 0;          // correctness draws available per sample
    size_t pool_size = 0;  // draws per pool
    size_t pools = 0;
    double active_fraction = 1.0;  // A; annotate() overrides the dense default
    double compute_units = 0.0;    // N * A
    std::vector<double> mean;      // index K-1 holds coverage at K
    std::vector<double> stddev;    // sample standard deviation across pools

    // Attach the active-parameter fraction of the generating model.
    void annotate(double a);
};

// Probability that K draws without replacement from a pool with `correct`
// successes contain at least one success: 1 - C(pool-correct, K)/C(pool, K).
double pass_at_k(size_t pool_size, size_t correct, size_t k);

// For each of `pools` pools (drawn per sample without replacement from that
// sample's outcome row), Pass@K averaged over samples; mean and sample
// standard deviation taken across pools for K = 1..k_max.
CoverageReport coverage_estimate(const std::vector<std::vector<bool>>& outcomes, size_t k_max,
                                 size_t pools, size_t pool_size, uint64_t seed);

// N samples generated at active-parameter fraction A cost N * A units.
double relative_compute_units(size_t n, double a);

// ---- latency ---------------------------------------------------------------

// full: uncompressed. griffin: gathered lanes, merged with an empty residual.
// griffin_lora: gathered lanes plus LoRA adapter pairs on the gate, in, and
// out projections, applied as sequential thin products every step, adapter
// rank matched to the caprese parameter budget. caprese: residual factors
// merged into the projections.
enum class LatencyMethod { full, griffin, griffin_lora, caprese };

std::string latency_method_name(LatencyMethod method);

struct LatencyRow {
    LatencyMethod method = LatencyMethod::full;
    size_t prompt_tokens = 0;
    size_t gen_tokens = 0;
    size_t reps = 0;            // timed repetitions; one warmup rep is discarded
    double end_to_end_s = 0.0;  // median over reps, includes prefill and selection
    double prefill_s = 0.0;     // median over reps, everything before decode
    double ttnt_ms = 0.0;       // median over reps of (end_to_end - prefill)/G
};

struct LatencyReport {
    size_t cores = 0;
    std::string governor_note;  // frequency governor, or why it is unknown
    std::vector<LatencyRow> rows;
};

struct LatencyConfig {
    size_t prompt_tokens = 64;  // P
    size_t gen_tokens = 64;     // G
    size_t reps = 3;
    size_t rank = 16;  // caprese residual rank; lora adapters match its budget
    std::vector<LatencyMethod> methods = {LatencyMethod::full, LatencyMethod::griffin,
                                          LatencyMethod::griffin_lora, LatencyMethod::caprese};
};

// Wall-clock decode timings under greedy decoding with the stop token
// disabled, so every method runs exactly G steps. Selection and merging are
// charged to the prefill phase. Numbers are comparable only within one report.
LatencyReport latency_bench(const ModelWeights& model, const CompressionSpec& spec,
                            const LatencyConfig& cfg);

// ---- response lengths --------------------------------------------------------

struct LengthBucket {
    int label = -1;  // difficulty; -1 collects unlabeled logs
    size_t count = 0;
    double mean_tokens = 0.0;
};

struct LengthStats {
    std::vector<LengthBucket> buckets;  // ascending by label, -1 first when present
    double global_mean = 0.0;
    size_t total_logs = 0;
};

// labels[i] tags logs[i]; logs past the end of `labels` fall into the -1
// bucket. Labels must be nonnegative (-1 is reserved for that bucket).
LengthStats response_length_stats(const std::vector<TokenSequence>& logs,
                                  const std::vector<int>& labels);

// ---- singular spectra ---------------------------------------------------------

struct SingularSpectrum {
    size_t layer = 0;
    bool degenerate = false;       // sigma_1 == 0, e.g. an untrained corrector
    std::vector<double> relative;  // sigma_i / sigma_1 descending; empty if degenerate
};

struct SpectrumReport {
    std::vector<SingularSpectrum> layers;
    std::vector<double> mean_curve;  // entrywise mean over non-degenerate layers
};

// Spectra of the residual products L R, min(rank, D) values per layer.
SpectrumReport singular_spectrum(const std::vector<CapreseLayer>& layers);

}  // namespace caprese
