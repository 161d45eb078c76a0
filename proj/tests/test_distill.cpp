#include <cmath>
#include <vector>

#include "caprese/caprese_layer.hpp"
#include "caprese/compress.hpp"
#include "caprese/distill.hpp"
#include "caprese/errors.hpp"
#include "caprese/linalg.hpp"
#include "caprese/matrix.hpp"
#include "caprese/model.hpp"
#include "doctest.h"

using namespace caprese;

namespace {

ModelConfig tiny_config(size_t d_model, size_t d_ff, size_t n_layers, size_t n_heads,
                        uint64_t seed) {
    ModelConfig cfg;
    cfg.d_model = d_model;
    cfg.d_ff = d_ff;
    cfg.n_layers = n_layers;
    cfg.n_heads = n_heads;
    cfg.max_seq = 32;
    cfg.rng_seed = seed;
    return cfg;
}

Matrix random_mat(size_t rows, size_t cols, uint64_t seed, double sigma = 1.0) {
    Rng rng(seed);
    Matrix m(rows, cols);
    fill_normal(m, rng, sigma);
    return m;
}

// Structured regression target: Y = X M + noise, so the top-r subspace is
// worth learning and the zero layer is far from optimal.
void structured_target(const Matrix& x, Matrix& y, uint64_t seed, double noise) {
    const Matrix m = random_mat(x.cols, y.cols, seed, 1.0 / std::sqrt(double(x.cols)));
    const Matrix clean = matmul(x, m);
    Rng rng(seed ^ 0xabcdef);
    for (size_t i = 0; i < y.size(); ++i)
        y.data[i] = clean.data[i] + float(noise * rng.normal());
}

std::vector<DistillSample> toy_samples(const ModelConfig& cfg, size_t count, size_t len,
                                       uint64_t seed) {
    Rng rng(seed);
    std::vector<DistillSample> out(count);
    for (auto& s : out) {
        s.tokens.push_back(kBosToken);
        for (size_t i = 1; i < len; ++i) s.tokens.push_back(Token(rng.below(256)));
        REQUIRE(s.tokens.size() <= cfg.max_seq);
    }
    return out;
}

}  // namespace

TEST_CASE("make_distill_samples applies the instruction prefix") {
    ModelConfig cfg = tiny_config(16, 32, 1, 2, 1);
    const std::string prefix = "Please reason step by step.";
    const auto samples = make_distill_samples({"abc", "xy"}, prefix, cfg);
    REQUIRE(samples.size() == 2);
    CHECK(samples[0].tokens == encode_bytes(prefix + "abc"));
    CHECK(samples[1].tokens == encode_bytes(prefix + "xy"));

    const std::string overlong(cfg.max_seq + 1, 'a');
    CHECK_THROWS_AS(make_distill_samples({overlong}, "", cfg), CapacityError);
}

TEST_CASE("capture with no compression yields zero residuals everywhere") {
    const ModelConfig cfg = tiny_config(16, 48, 2, 2, 7);
    const ModelWeights model = init_random_weights(cfg);
    const auto samples = toy_samples(cfg, 3, 6, 71);

    CompressionSpec spec;
    spec.variant = CompressionVariant::none;
    const LayerDataset data = capture_layer_data(model, spec, samples);
    REQUIRE(data.layer_count() == 2);
    CHECK(data.n_tokens() == 18);
    for (size_t l = 0; l < 2; ++l) {
        CHECK(data.x[l].rows == 18);
        for (float v : data.y[l].data) CHECK(v == 0.0f);
    }

    // GRIFFIN with every feature kept is the identity compression; a tiny
    // legal sparsity still rounds up to k = D_FF.
    CompressionSpec full_griffin;
    full_griffin.variant = CompressionVariant::griffin;
    full_griffin.sparsity = 0.005;
    REQUIRE(griffin_k(full_griffin.sparsity, cfg.d_ff) == cfg.d_ff);
    const LayerDataset g = capture_layer_data(model, full_griffin, samples);
    for (float v : g.y[0].data) CHECK(v == 0.0f);
    // Layers outside the first-half range are untouched by construction.
    for (float v : g.y[1].data) CHECK(v == 0.0f);
}

TEST_CASE("capture residuals match a per-token two-forward oracle") {
    const ModelConfig cfg = tiny_config(12, 36, 1, 2, 9);
    const ModelWeights model = init_random_weights(cfg);
    std::vector<DistillSample> samples(1);
    samples[0].tokens = {kBosToken, 65, 66};

    CompressionSpec spec;
    spec.variant = CompressionVariant::cats;
    spec.sparsity = 0.5;
    const LayerDataset data = capture_layer_data(model, spec, samples);
    REQUIRE(data.n_tokens() == 3);

    // Recompute the threshold the way capture defines it: percentile of the
    // pooled |gate| over the capture set itself.
    FullFfnBackend full(model);
    KvCache cache(cfg);
    std::vector<FfnTrace> traces;
    model_forward(samples[0].tokens, model, cache, full, &traces);
    const CatsThreshold tau = cats_calibrate(traces[0].gate, spec.sparsity, 0);

    for (size_t i = 0; i < 3; ++i) {
        std::vector<float> x_row(cfg.d_model);
        for (size_t j = 0; j < cfg.d_model; ++j) x_row[j] = data.x[0].at(i, j);
        const std::vector<float> y_full = ffn_forward(x_row, model.layers[0].ffn);
        const std::vector<float> y_cats = cats_forward(x_row, model.layers[0].ffn, tau.tau);
        for (size_t j = 0; j < cfg.d_model; ++j)
            CHECK(data.y[0].at(i, j) == y_full[j] - y_cats[j]);
    }
}

TEST_CASE("rrr oracle nails realizable targets and the full-rank limit") {
    const Matrix x = random_mat(64, 8, 100);
    const Matrix ml = random_mat(8, 2, 101);
    const Matrix mr = random_mat(2, 8, 102);
    const Matrix y = matmul(x, matmul(ml, mr));

    const CapreseLayer fit = rrr_oracle(x, y, 2);
    const Matrix pred = matmul(matmul(x, fit.l), fit.r);
    CHECK(relative_error(pred, y) <= 1e-6);

    // r = D collapses to ordinary least squares.
    const Matrix y_full = random_mat(64, 8, 103);
    const CapreseLayer ols = rrr_oracle(x, y_full, 8);
    const MatrixD xd = widen(x);
    const MatrixD xtx = matmul(transpose(xd), xd);
    const MatrixD xty = matmul(transpose(xd), widen(y_full));
    const MatrixD b_ols = solve_spd(xtx, xty, 0.0);
    const Matrix product = matmul(ols.l, ols.r);
    CHECK(relative_error(product, narrow(b_ols)) <= 1e-4);

    CHECK_THROWS_AS(rrr_oracle(x, y_full, 0), ShapeError);
    CHECK_THROWS_AS(rrr_oracle(x, y_full, 9), ShapeError);
    CHECK_THROWS_AS(rrr_oracle(random_mat(10, 8, 104), y_full, 2), ShapeError);
}

TEST_CASE("rrr oracle beats random candidates and is monotone in rank") {
    const Matrix x = random_mat(64, 8, 110);
    Matrix y(64, 8);
    structured_target(x, y, 111, 0.2);

    const CapreseLayer fit = rrr_oracle(x, y, 2);
    const double oracle_mse = residual_mse(x, y, fit);

    // 10,000 random rank-2 candidates, each given its optimal output scale.
    Rng rng(112);
    const MatrixD xd = widen(x);
    const MatrixD yd = widen(y);
    double y_sq = 0.0;
    for (double v : yd.data) y_sq += v * v;
    double best_candidate = y_sq / double(y.size());
    for (int trial = 0; trial < 10000; ++trial) {
        Matrix cl(8, 2), cr(2, 8);
        Rng c = rng.fork(trial);
        fill_normal(cl, c, 0.5);
        fill_normal(cr, c, 0.5);
        const MatrixD pred = matmul(matmul(xd, widen(cl)), widen(cr));
        double pp = 0.0, py = 0.0;
        for (size_t i = 0; i < pred.size(); ++i) {
            pp += pred.data[i] * pred.data[i];
            py += pred.data[i] * yd.data[i];
        }
        const double alpha = pp > 0.0 ? py / pp : 0.0;
        const double mse = (y_sq - alpha * py) / double(y.size());
        best_candidate = std::min(best_candidate, mse);
    }
    CHECK(oracle_mse <= best_candidate + 1e-12);

    // Nested hypothesis classes: more rank never hurts.
    double prev = oracle_mse;
    for (size_t r : {4, 8}) {
        const double mse = residual_mse(x, y, rrr_oracle(x, y, r));
        CHECK(mse <= prev + 1e-12);
        prev = mse;
    }
}

TEST_CASE("rrr oracle ridge policy") {
    // Duplicate column makes the Gram matrix exactly singular.
    Matrix x(32, 4);
    Rng rng(120);
    fill_normal(x, rng, 1.0);
    for (size_t i = 0; i < x.rows; ++i) x.at(i, 3) = x.at(i, 2);
    Matrix y(32, 4);
    structured_target(x, y, 121, 0.1);

    CHECK_THROWS_AS(rrr_oracle(x, y, 2, 0.0), NumericError);
    CHECK_NOTHROW(rrr_oracle(x, y, 2));         // automatic ridge
    CHECK_NOTHROW(rrr_oracle(x, y, 2, 1e-3));   // explicit ridge
    const double auto_mse = residual_mse(x, y, rrr_oracle(x, y, 2));
    CHECK(std::isfinite(auto_mse));
}

TEST_CASE("learning rate schedule warms up linearly then decays to zero") {
    TrainConfig cfg;
    cfg.lr = 1.0;
    cfg.warmup_fraction = 0.1;
    const size_t total = 100;
    CHECK(scheduled_lr(cfg, 0, total) == doctest::Approx(0.1));
    CHECK(scheduled_lr(cfg, 9, total) == doctest::Approx(1.0));
    CHECK(scheduled_lr(cfg, 10, total) == doctest::Approx(1.0));
    for (size_t t = 11; t < total; ++t)
        CHECK(scheduled_lr(cfg, t, total) < scheduled_lr(cfg, t - 1, total));
    CHECK(scheduled_lr(cfg, total - 1, total) > 0.0);
}

TEST_CASE("adam converges on a scalar quadratic and starts at lr magnitude") {
    TrainConfig cfg;
    MatrixD p(1, 1);
    p.at(0, 0) = 10.0;
    AdamState st;
    MatrixD g(1, 1);
    g.at(0, 0) = 2.0 * (p.at(0, 0) - 3.0);
    adam_step(p, g, st, 0.1, cfg);
    // First step moves by exactly lr (bias-corrected moments cancel).
    CHECK(p.at(0, 0) == doctest::Approx(9.9).epsilon(1e-9));
    for (int i = 0; i < 800; ++i) {
        g.at(0, 0) = 2.0 * (p.at(0, 0) - 3.0);
        adam_step(p, g, st, 0.1, cfg);
    }
    CHECK(std::fabs(p.at(0, 0) - 3.0) < 0.05);

    MatrixD bad(2, 2);
    CHECK_THROWS_AS(adam_step(p, bad, st, 0.1, cfg), ShapeError);
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.lr = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.warmup_fraction = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.workers = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK(TrainConfig::e2e_defaults().lr == doctest::Approx(2e-5));
    CHECK(TrainConfig::e2e_defaults().batch_size == 16);
    CHECK(TrainConfig::e2e_defaults().epochs == 3);
    CHECK(TrainConfig::layerwise_defaults().lr == doctest::Approx(1e-3));
    CHECK(TrainConfig::layerwise_defaults().batch_size == 128);
    CHECK(TrainConfig::layerwise_defaults().epochs == 20);
}

TEST_CASE("zero targets keep the learned layers exactly neutral") {
    LayerDataset data;
    data.x.push_back(random_mat(40, 8, 130));
    data.y.push_back(Matrix(40, 8));
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.epochs = 5;
    const auto layers = layerwise_distill_dataset(data, 2, cfg);
    REQUIRE(layers.size() == 1);
    const Matrix prod = matmul(layers[0].l, layers[0].r);
    CHECK(frobenius_norm(prod) <= 1e-3);
}

TEST_CASE("layerwise adam lands within 10% of the analytic optimum") {
    LayerDataset data;
    data.x.push_back(random_mat(128, 16, 140));
    Matrix y(128, 16);
    structured_target(data.x[0], y, 141, 0.3);
    data.y.push_back(y);

    TrainConfig cfg;
    cfg.lr = 1e-2;
    cfg.batch_size = 128;
    cfg.epochs = 600;
    cfg.seed = 7;
    const auto layers = layerwise_distill_dataset(data, 2, cfg);
    const double trained = residual_mse(data.x[0], data.y[0], layers[0]);
    const double oracle = residual_mse(data.x[0], data.y[0], rrr_oracle(data.x[0], data.y[0], 2));
    CHECK(trained >= oracle - 1e-8);
    CHECK(trained <= 1.1 * oracle + 1e-8);
}

TEST_CASE("layerwise training is deterministic and worker-count invariant") {
    LayerDataset data;
    for (int l = 0; l < 3; ++l) {
        data.x.push_back(random_mat(64, 8, 150 + l));
        Matrix y(64, 8);
        structured_target(data.x.back(), y, 160 + l, 0.2);
        data.y.push_back(y);
    }
    TrainConfig cfg;
    cfg.lr = 5e-3;
    cfg.batch_size = 32;
    cfg.epochs = 12;
    cfg.seed = 99;
    const auto a = layerwise_distill_dataset(data, 2, cfg);
    const auto b = layerwise_distill_dataset(data, 2, cfg);
    TrainConfig par = cfg;
    par.workers = 3;
    const auto c = layerwise_distill_dataset(data, 2, par);
    for (size_t l = 0; l < 3; ++l) {
        CHECK(a[l].l.data == b[l].l.data);
        CHECK(a[l].r.data == b[l].r.data);
        CHECK(a[l].l.data == c[l].l.data);
        CHECK(a[l].r.data == c[l].r.data);
    }
}

TEST_CASE("exploding learning rate raises a numeric error") {
    LayerDataset data;
    data.x.push_back(random_mat(32, 8, 170));
    Matrix y(32, 8);
    structured_target(data.x[0], y, 171, 0.1);
    data.y.push_back(y);
    TrainConfig cfg;
    cfg.lr = 1e160;
    cfg.batch_size = 16;
    cfg.epochs = 2;
    CHECK_THROWS_AS(layerwise_distill_dataset(data, 2, cfg), NumericError);
}

TEST_CASE("grad_check accepts an exact quadratic gradient") {
    MatrixD p(5, 4);
    Rng rng(180);
    for (double& v : p.data) v = rng.normal();
    auto loss = [&]() {
        double s = 0.0;
        for (double v : p.data) s += v * v;
        return s;
    };
    MatrixD grad(5, 4);
    for (size_t i = 0; i < p.size(); ++i) grad.data[i] = 2.0 * p.data[i];
    const double rel = grad_check(loss, {&p}, {&grad}, 1e-5);
    CHECK(rel <= 1e-6);
}

TEST_CASE("e2e loss is zero for an uncompressed student and stays a no-op") {
    const ModelConfig cfg = tiny_config(16, 32, 2, 2, 190);
    const ModelWeights model = init_random_weights(cfg);
    const auto samples = toy_samples(cfg, 2, 5, 191);
    CompressionSpec spec;
    spec.variant = CompressionVariant::none;

    const auto teacher = prepare_teacher_signals(model, spec, samples);
    std::vector<MatrixD> l, r;
    Rng rng(192);
    std::vector<CapreseLayer> init;
    for (size_t i = 0; i < cfg.n_layers; ++i) {
        init.push_back(init_caprese_layer(cfg.d_model, 2, rng));
        l.push_back(widen(init.back().l));
        r.push_back(widen(init.back().r));
    }
    std::vector<MatrixD> gl, gr;
    const double loss = e2e_loss_and_grads(model, samples, teacher, l, r, &gl, &gr);
    CHECK(loss == 0.0);
    for (const MatrixD& g : gl)
        for (double v : g.data) CHECK(v == 0.0);

    TrainConfig tc = TrainConfig::e2e_defaults();
    tc.epochs = 1;
    const auto refined = e2e_distill(model, spec, init, samples, tc);
    for (size_t i = 0; i < init.size(); ++i) {
        CHECK(refined[i].l.data == init[i].l.data);
        CHECK(refined[i].r.data == init[i].r.data);
    }
}

TEST_CASE("fresh layers reproduce the engine's compressed loss") {
    const ModelConfig cfg = tiny_config(16, 48, 2, 2, 200);
    const ModelWeights model = init_random_weights(cfg);
    const auto samples = toy_samples(cfg, 2, 6, 201);
    CompressionSpec spec;
    spec.variant = CompressionVariant::cats;
    spec.sparsity = 0.5;

    const auto teacher = prepare_teacher_signals(model, spec, samples);
    std::vector<MatrixD> l(cfg.n_layers), r(cfg.n_layers);
    Rng rng(202);
    for (size_t i = 0; i < cfg.n_layers; ++i) {
        const CapreseLayer fresh = init_caprese_layer(cfg.d_model, 2, rng);
        l[i] = widen(fresh.l);
        r[i] = widen(fresh.r);
    }
    const double loss = e2e_loss_and_grads(model, samples, teacher, l, r, nullptr, nullptr);

    // Engine-side reference: float forwards under the CATS backend with the
    // same thresholds the capture pass calibrates.
    FullFfnBackend full(model);
    std::vector<std::vector<FfnTrace>> traces(samples.size());
    std::vector<float> pooled;
    for (size_t s = 0; s < samples.size(); ++s) {
        KvCache cache(cfg);
        model_forward(samples[s].tokens, model, cache, full, &traces[s]);
    }
    CatsFfnBackend cats(model);
    for (size_t layer = 0; layer < cfg.n_layers; ++layer) {
        std::vector<float> flat;
        for (const auto& tr : traces) flat.insert(flat.end(), tr[layer].gate.data.begin(),
                                                  tr[layer].gate.data.end());
        cats.set_layer(layer, cats_calibrate(Matrix(1, flat.size(), flat), spec.sparsity, layer));
    }
    double engine_loss = 0.0;
    size_t positions = 0;
    for (const DistillSample& s : samples) {
        const Matrix teach = final_embedding(s.tokens, model, full);
        const Matrix student = final_embedding(s.tokens, model, cats);
        for (size_t i = 0; i < teach.size(); ++i) {
            const double d = double(student.data[i]) - double(teach.data[i]);
            engine_loss += d * d;
        }
        positions += s.tokens.size();
    }
    engine_loss /= double(positions) * double(cfg.d_model);
    CHECK(loss == doctest::Approx(engine_loss).epsilon(1e-3));
}

TEST_CASE("e2e gradients match central finite differences") {
    const ModelConfig cfg = tiny_config(12, 24, 2, 2, 210);
    const ModelWeights model = init_random_weights(cfg);
    const auto samples = toy_samples(cfg, 2, 5, 211);

    for (auto variant : {CompressionVariant::griffin, CompressionVariant::cats}) {
        CompressionSpec spec;
        spec.variant = variant;
        spec.sparsity = 0.5;
        const auto teacher = prepare_teacher_signals(model, spec, samples);
        const LayerRange range = spec.resolve_range(cfg.n_layers);

        std::vector<MatrixD> l(cfg.n_layers), r(cfg.n_layers);
        Rng rng(212);
        for (size_t i = 0; i < cfg.n_layers; ++i) {
            CapreseLayer fresh = init_caprese_layer(cfg.d_model, 2, rng);
            fill_normal(fresh.r, rng, 0.3);  // probe a generic point, not the zero init
            l[i] = widen(fresh.l);
            r[i] = widen(fresh.r);
        }
        std::vector<MatrixD> gl, gr;
        e2e_loss_and_grads(model, samples, teacher, l, r, &gl, &gr);

        auto loss = [&]() {
            return e2e_loss_and_grads(model, samples, teacher, l, r, nullptr, nullptr);
        };
        std::vector<MatrixD*> params;
        std::vector<const MatrixD*> analytic;
        for (size_t i = range.begin; i < range.end; ++i) {
            params.push_back(&l[i]);
            analytic.push_back(&gl[i]);
            params.push_back(&r[i]);
            analytic.push_back(&gr[i]);
        }
        const double rel = grad_check(loss, params, analytic, 1e-4, 512, 213);
        CHECK(rel <= 1e-3);

        // Out-of-range layers must not influence the loss at all.
        for (size_t i = 0; i < cfg.n_layers; ++i) {
            if (i >= range.begin && i < range.end) continue;
            for (double v : gl[i].data) CHECK(v == 0.0);
            for (double v : gr[i].data) CHECK(v == 0.0);
        }
    }
}

TEST_CASE("e2e training improves on the layerwise initialization") {
    const ModelConfig cfg = tiny_config(16, 48, 2, 2, 220);
    const ModelWeights model = init_random_weights(cfg);
    const auto samples = toy_samples(cfg, 4, 6, 221);
    CompressionSpec spec;
    spec.variant = CompressionVariant::cats;
    spec.sparsity = 0.5;

    const uint64_t weight_hash = model_weights_hash(model);

    TrainConfig lw;
    lw.lr = 5e-3;
    lw.batch_size = 24;
    lw.epochs = 60;
    lw.seed = 1;
    const auto init = layerwise_distill(model, spec, 4, samples, lw);
    CHECK(model_weights_hash(model) == weight_hash);

    const auto teacher = prepare_teacher_signals(model, spec, samples);
    auto loss_of = [&](const std::vector<CapreseLayer>& layers) {
        std::vector<MatrixD> l, r;
        for (const auto& lay : layers) {
            l.push_back(widen(lay.l));
            r.push_back(widen(lay.r));
        }
        return e2e_loss_and_grads(model, samples, teacher, l, r, nullptr, nullptr);
    };
    const double init_loss = loss_of(init);

    TrainConfig te = TrainConfig::e2e_defaults();
    te.lr = 1e-3;
    te.batch_size = 2;
    te.epochs = 3;
    te.seed = 2;
    const auto refined = e2e_distill(model, spec, init, samples, te);
    const double final_loss = loss_of(refined);
    CHECK(model_weights_hash(model) == weight_hash);
    CHECK(final_loss <= init_loss);
    CHECK(final_loss < init_loss);  // the gradient path is alive
    CHECK(std::isfinite(final_loss));
}

TEST_CASE("training records are emitted with losses in both conventions") {
    LayerDataset data;
    data.x.push_back(random_mat(32, 8, 230));
    Matrix y(32, 8);
    structured_target(data.x[0], y, 231, 0.2);
    data.y.push_back(y);
    TrainConfig cfg;
    cfg.lr = 1e-2;
    cfg.batch_size = 16;
    cfg.epochs = 3;
    std::vector<TrainRecord> records;
    layerwise_distill_dataset(data, 2, cfg,
                              [&](const TrainRecord& r) { records.push_back(r); });
    REQUIRE(records.size() == 3);  // one per epoch end
    for (const TrainRecord& r : records) {
        CHECK(r.layer == 0);
        CHECK(r.loss_sum_d == doctest::Approx(r.loss * 8.0));
        CHECK(r.lr > 0.0);
    }
}
