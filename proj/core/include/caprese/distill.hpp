#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "caprese/caprese_layer.hpp"
#include "caprese/compress.hpp"
#include "caprese/model.hpp"

namespace caprese {

// One training text, tokenized with the instruction prefix already applied.
struct DistillSample {
    TokenSequence tokens;
};

// Prefix + encode each text; throws CapacityError past max_seq and
// DomainError on empty results.
std::vector<DistillSample> make_distill_samples(const std::vector<std::string>& texts,
                                                const std::string& instruction_prefix,
                                                const ModelConfig& config);

// Captured FFN inputs and residual targets FF(x) - compressed(x), one pair of
// matrices per block, token positions pooled across samples.
struct LayerDataset {
    std::vector<Matrix> x;  // per layer, n x D
    std::vector<Matrix> y;  // per layer, n x D
    size_t layer_count() const { return x.size(); }
    size_t n_tokens() const { return x.empty() ? 0 : x[0].rows; }
};

// Runs the original model over all samples; earlier blocks always see
// original activations. CATS thresholds are calibrated on the pooled gate
// activations of the capture set itself.
LayerDataset capture_layer_data(const ModelWeights& model, const CompressionSpec& spec,
                                const std::vector<DistillSample>& samples);

// Analytic reduced-rank regression: minimizes ||Y - X B||_F over rank-r B.
// ridge < 0 selects the automatic policy (1e-6 trace(X^T X)/D, applied only
// when the Gram matrix is not positive definite); an explicit ridge of 0 on a
// singular Gram matrix throws NumericError.
CapreseLayer rrr_oracle(const Matrix& x, const Matrix& y, size_t rank, double ridge = -1.0);

// Mean over rows and output coordinates of ||y - x L R||^2.
double residual_mse(const Matrix& x, const Matrix& y, const CapreseLayer& layer);

struct TrainConfig {
    double lr = 1e-3;
    size_t batch_size = 128;
    size_t epochs = 20;
    double warmup_fraction = 0.02;  // of total steps, linear warmup then linear decay
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    uint64_t seed = 0;
    size_t workers = 1;  // layer-wise training only; results are worker-count invariant

    static TrainConfig layerwise_defaults() { return TrainConfig{}; }
    static TrainConfig e2e_defaults() {
        TrainConfig cfg;
        cfg.lr = 2e-5;
        cfg.batch_size = 16;
        cfg.epochs = 3;
        return cfg;
    }
    void validate() const;  // throws ConfigError
};

// Adam accumulators for one tensor.
struct AdamState {
    MatrixD m;
    MatrixD v;
    size_t step = 0;
};

// One Adam update in place; lr is the already-scheduled rate for this step.
void adam_step(MatrixD& param, const MatrixD& grad, AdamState& state, double lr,
               const TrainConfig& cfg);

// Scheduled learning rate for step t of total (linear warmup, linear decay).
double scheduled_lr(const TrainConfig& cfg, size_t step, size_t total_steps);

struct TrainRecord {
    size_t step = 0;
    size_t layer = 0;  // layer index, or -1 cast for e2e records
    double loss = 0.0;       // mean over positions and coordinates
    double loss_sum_d = 0.0;  // same loss without the /D reduction
    double lr = 0.0;
};
using TrainLogger = std::function<void(const TrainRecord&)>;

// Adam on (L, R) per block against the captured residuals. Returns one layer
// per block; blocks outside the compression range have zero targets and stay
// neutral. Throws NumericError on NaN loss (diverged; reduce the rate).
std::vector<CapreseLayer> layerwise_distill(const ModelWeights& model, const CompressionSpec& spec,
                                            size_t rank, const std::vector<DistillSample>& samples,
                                            const TrainConfig& cfg,
                                            const TrainLogger& logger = nullptr);

// Same objective evaluated directly from a dataset, for tests and oracles.
std::vector<CapreseLayer> layerwise_distill_dataset(const LayerDataset& data, size_t rank,
                                                    const TrainConfig& cfg,
                                                    const TrainLogger& logger = nullptr);

// ---- end-to-end distillation ----------------------------------------------------

// Per-layer student block resolved to double precision: the weight triple the
// student multiplies plus variant bookkeeping. GRIFFIN blocks are re-gathered
// per sample from the teacher's prefill statistics.
struct StudentBlock {
    CompressionVariant variant = CompressionVariant::none;
    MatrixD w_gate, w_in, w_out;
    std::optional<double> tau;
    bool has_residual = false;
};

// Teacher-side signals for one sample, computed once per run.
struct TeacherSignals {
    MatrixD embedding;                       // final states, S x D
    std::vector<StudentBlock> blocks;        // per layer
};

std::vector<TeacherSignals> prepare_teacher_signals(const ModelWeights& model,
                                                    const CompressionSpec& spec,
                                                    const std::vector<DistillSample>& samples);

// Mean squared distance between teacher and student final embeddings over the
// given samples, plus gradients w.r.t. every L and R. Pass null gradient
// sinks to evaluate the loss alone.
double e2e_loss_and_grads(const ModelWeights& model, const std::vector<DistillSample>& samples,
                          const std::vector<TeacherSignals>& teacher,
                          const std::vector<MatrixD>& l, const std::vector<MatrixD>& r,
                          std::vector<MatrixD>* grad_l, std::vector<MatrixD>* grad_r);

// Adam on (L, R) only, initialized from the layer-wise result; frozen weights
// are never written. Returns the refined layers.
std::vector<CapreseLayer> e2e_distill(const ModelWeights& model, const CompressionSpec& spec,
                                      const std::vector<CapreseLayer>& init_layers,
                                      const std::vector<DistillSample>& samples,
                                      const TrainConfig& cfg, const TrainLogger& logger = nullptr);

// ---- gradient checking ------------------------------------------------------------

// Central finite differences against analytic gradients over at most
// max_coords coordinates sampled without replacement. Returns the maximum
// relative error max(|fd - g|) / max(|fd|, |g|, 1e-8).
double grad_check(const std::function<double()>& loss, std::vector<MatrixD*> params,
                  const std::vector<const MatrixD*>& analytic, double step = 1e-4,
                  size_t max_coords = 512, uint64_t seed = 0);

// Content hash of all model tensors; distillation must leave it unchanged.
uint64_t model_weights_hash(const ModelWeights& w);

}  // namespace caprese
