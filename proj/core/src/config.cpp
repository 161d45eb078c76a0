#include "caprese/config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>

#include "caprese/errors.hpp"

#include <json.hpp>

namespace caprese {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::string& path,
                std::initializer_list<const char*> allowed) {
    if (!obj.is_object())
        throw ConfigError("config: '" + path + "' must be a JSON object");
    for (const auto& item : obj.items()) {
        bool known = false;
        for (const char* key : allowed)
            if (item.key() == key) {
                known = true;
                break;
            }
        if (!known)
            throw ConfigError("config: unknown key '" +
                              (path.empty() ? item.key() : path + "." + item.key()) + "'");
    }
}

// Reads obj[key] into out when present; json type errors carry the key path.
template <typename T>
void read_field(const json& obj, const std::string& path, const char* key, T& out) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config: bad value for '" +
                          (path.empty() ? std::string(key) : path + "." + key) + "'");
    }
}

void parse_model(const json& obj, ModelConfig& model) {
    check_keys(obj, "model",
               {"vocab_size", "d_model", "d_ff", "n_layers", "n_heads", "max_seq", "rng_seed"});
    read_field(obj, "model", "vocab_size", model.vocab_size);
    read_field(obj, "model", "d_model", model.d_model);
    read_field(obj, "model", "d_ff", model.d_ff);
    read_field(obj, "model", "n_layers", model.n_layers);
    read_field(obj, "model", "n_heads", model.n_heads);
    read_field(obj, "model", "max_seq", model.max_seq);
    read_field(obj, "model", "rng_seed", model.rng_seed);
}

void parse_compression(const json& obj, CompressionSpec& spec) {
    check_keys(obj, "compression", {"variant", "sparsity", "bits", "layer_range"});
    if (obj.contains("variant")) {
        std::string name;
        read_field(obj, "compression", "variant", name);
        spec.variant = variant_from_name(name);
    }
    read_field(obj, "compression", "sparsity", spec.sparsity);
    read_field(obj, "compression", "bits", spec.bits);
    if (obj.contains("layer_range")) {
        const json& range = obj.at("layer_range");
        if (range.is_null()) {
            spec.layer_range.reset();
        } else if (range.is_array() && range.size() == 2) {
            LayerRange lr;
            try {
                lr.begin = range[0].get<size_t>();
                lr.end = range[1].get<size_t>();
            } catch (const json::exception&) {
                throw ConfigError("config: bad value for 'compression.layer_range'");
            }
            spec.layer_range = lr;
        } else {
            throw ConfigError(
                "config: 'compression.layer_range' must be null or a [begin, end) pair");
        }
    }
}

void parse_train(const json& obj, const std::string& path, TrainConfig& cfg) {
    check_keys(obj, path,
               {"lr", "batch_size", "epochs", "warmup_fraction", "beta1", "beta2", "eps", "seed",
                "workers"});
    read_field(obj, path, "lr", cfg.lr);
    read_field(obj, path, "batch_size", cfg.batch_size);
    read_field(obj, path, "epochs", cfg.epochs);
    read_field(obj, path, "warmup_fraction", cfg.warmup_fraction);
    read_field(obj, path, "beta1", cfg.beta1);
    read_field(obj, path, "beta2", cfg.beta2);
    read_field(obj, path, "eps", cfg.eps);
    read_field(obj, path, "seed", cfg.seed);
    read_field(obj, path, "workers", cfg.workers);
}

void parse_generation(const json& obj, GenerationSection& gen) {
    check_keys(obj, "generation",
               {"temperature", "top_p", "seed", "greedy", "eos", "max_new_tokens",
                "reselect_period"});
    read_field(obj, "generation", "temperature", gen.sampler.temperature);
    read_field(obj, "generation", "top_p", gen.sampler.top_p);
    read_field(obj, "generation", "seed", gen.sampler.seed);
    read_field(obj, "generation", "greedy", gen.sampler.greedy);
    read_field(obj, "generation", "eos", gen.sampler.eos);
    read_field(obj, "generation", "max_new_tokens", gen.max_new_tokens);
    if (obj.contains("reselect_period")) {
        const json& period = obj.at("reselect_period");
        if (period.is_null()) {
            gen.reselect_period = kNoReselect;
        } else {
            try {
                gen.reselect_period = period.get<size_t>();
            } catch (const json::exception&) {
                throw ConfigError("config: bad value for 'generation.reselect_period'");
            }
        }
    }
}

void parse_paths(const json& obj, PathsSection& paths) {
    check_keys(obj, "paths", {"corpus", "checkpoints", "reports"});
    read_field(obj, "paths", "corpus", paths.corpus);
    read_field(obj, "paths", "checkpoints", paths.checkpoints);
    read_field(obj, "paths", "reports", paths.reports);
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    compression.validate();
    pretrain.validate();
    distill_layerwise.validate();
    distill_e2e.validate();
    generation.sampler.validate();
    if (caprese.enabled && caprese.rank == 0)
        throw ConfigError("config: caprese.rank must be positive when enabled");
    if (generation.max_new_tokens == 0)
        throw ConfigError("config: generation.max_new_tokens must be positive");
    if (generation.reselect_period == 0)
        throw ConfigError(
            "config: generation.reselect_period must be positive (omit it to never reselect)");
    if (generation.reselect_period != kNoReselect &&
        compression.variant != CompressionVariant::griffin)
        throw ConfigError("config: reselection is GRIFFIN-only");
}

std::string RunConfig::to_json() const {
    json out;
    out["model"] = {{"vocab_size", model.vocab_size}, {"d_model", model.d_model},
                    {"d_ff", model.d_ff},             {"n_layers", model.n_layers},
                    {"n_heads", model.n_heads},       {"max_seq", model.max_seq},
                    {"rng_seed", model.rng_seed}};
    out["compression"] = {{"variant", variant_name(compression.variant)},
                          {"sparsity", compression.sparsity},
                          {"bits", compression.bits}};
    if (compression.layer_range)
        out["compression"]["layer_range"] =
            json::array({compression.layer_range->begin, compression.layer_range->end});
    else
        out["compression"]["layer_range"] = nullptr;
    out["caprese"] = {{"rank", caprese.rank}, {"enabled", caprese.enabled}};
    const auto train_json = [](const TrainConfig& cfg) {
        return json{{"lr", cfg.lr},
                    {"batch_size", cfg.batch_size},
                    {"epochs", cfg.epochs},
                    {"warmup_fraction", cfg.warmup_fraction},
                    {"beta1", cfg.beta1},
                    {"beta2", cfg.beta2},
                    {"eps", cfg.eps},
                    {"seed", cfg.seed},
                    {"workers", cfg.workers}};
    };
    out["pretrain"] = train_json(pretrain);
    out["distill"] = {{"layerwise", train_json(distill_layerwise)},
                      {"e2e", train_json(distill_e2e)}};
    out["generation"] = {{"temperature", generation.sampler.temperature},
                         {"top_p", generation.sampler.top_p},
                         {"seed", generation.sampler.seed},
                         {"greedy", generation.sampler.greedy},
                         {"eos", generation.sampler.eos},
                         {"max_new_tokens", generation.max_new_tokens}};
    if (generation.reselect_period == kNoReselect)
        out["generation"]["reselect_period"] = nullptr;
    else
        out["generation"]["reselect_period"] = generation.reselect_period;
    out["paths"] = {{"corpus", paths.corpus},
                    {"checkpoints", paths.checkpoints},
                    {"reports", paths.reports}};
    out["seed"] = seed;
    out["workers"] = workers;
    out["deterministic"] = deterministic;
    return out.dump();
}

RunConfig parse_run_config(const std::string& json_text) {
    json root = json::parse(json_text, nullptr, false);
    if (root.is_discarded()) throw ConfigError("config: not valid JSON");
    check_keys(root, "",
               {"model", "compression", "caprese", "pretrain", "distill", "generation", "paths",
                "seed", "workers", "deterministic"});

    RunConfig cfg;
    if (root.contains("model")) parse_model(root["model"], cfg.model);
    if (root.contains("compression")) parse_compression(root["compression"], cfg.compression);
    if (root.contains("caprese")) {
        check_keys(root["caprese"], "caprese", {"rank", "enabled"});
        read_field(root["caprese"], "caprese", "rank", cfg.caprese.rank);
        read_field(root["caprese"], "caprese", "enabled", cfg.caprese.enabled);
    }
    if (root.contains("pretrain")) parse_train(root["pretrain"], "pretrain", cfg.pretrain);
    if (root.contains("distill")) {
        check_keys(root["distill"], "distill", {"layerwise", "e2e"});
        if (root["distill"].contains("layerwise"))
            parse_train(root["distill"]["layerwise"], "distill.layerwise",
                        cfg.distill_layerwise);
        if (root["distill"].contains("e2e"))
            parse_train(root["distill"]["e2e"], "distill.e2e", cfg.distill_e2e);
    }
    if (root.contains("generation")) parse_generation(root["generation"], cfg.generation);
    if (root.contains("paths")) parse_paths(root["paths"], cfg.paths);
    read_field(root, "", "seed", cfg.seed);
    read_field(root, "", "workers", cfg.workers);
    read_field(root, "", "deterministic", cfg.deterministic);
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open '" + path + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_run_config(buffer.str());
}

}  // namespace caprese
