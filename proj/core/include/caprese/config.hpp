#pragma once

#include <cstdint>
#include <string>

#include "caprese/compress.hpp"
#include "caprese/distill.hpp"
#include "caprese/model.hpp"
#include "caprese/reselect.hpp"
#include "caprese/sampler.hpp"

namespace caprese {

struct CapreseSection {
    size_t rank = 16;
    bool enabled = true;  // off: run the compressed model bare
};

struct GenerationSection {
    SamplerConfig sampler;
    size_t max_new_tokens = 64;
    size_t reselect_period = kNoReselect;  // rho; finite values are griffin-only
};

struct PathsSection {
    std::string corpus = "corpus.cprc";
    std::string checkpoints = "checkpoints";
    std::string reports = "reports";
};

// One JSON file with sections mirroring the engine modules. Unknown keys are
// rejected with their full path; CLI flags override file values; the resolved
// form is echoed into every report header. Defaults follow the desk model:
// 50% GRIFFIN sparsity on the first half of the layers, caprese rank 16.
struct RunConfig {
    ModelConfig model;
    CompressionSpec compression;
    CapreseSection caprese;
    TrainConfig pretrain;
    TrainConfig distill_layerwise;
    TrainConfig distill_e2e = TrainConfig::e2e_defaults();
    GenerationSection generation;
    PathsSection paths;
    uint64_t seed = 1;
    size_t workers = 0;         // 0: all available cores
    bool deterministic = false;  // forces single-worker reductions

    RunConfig() { compression.variant = CompressionVariant::griffin; }

    void validate() const;        // ConfigError
    std::string to_json() const;  // resolved echo, stable key order
};

RunConfig parse_run_config(const std::string& json_text);  // ConfigError
RunConfig load_run_config(const std::string& path);        // IoError + ConfigError

}  // namespace caprese
