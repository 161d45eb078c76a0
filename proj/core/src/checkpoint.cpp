#include "caprese/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "caprese/errors.hpp"

#include <json.hpp>

namespace caprese {

namespace {

using nlohmann::json;

void write_u32le(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32le(std::istream& in, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw FormatError(std::string("checkpoint: truncated ") + what);
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

json parse_header(const std::string& text) {
    json header = json::parse(text, nullptr, false);
    if (header.is_discarded() || !header.is_object())
        throw FormatError("checkpoint: header is not a JSON object");
    return header;
}

}  // namespace

void Checkpoint::add(const std::string& name, Matrix tensor) {
    if (name.empty()) throw FormatError("checkpoint: empty tensor name");
    if (has(name)) throw FormatError("checkpoint: duplicate tensor name '" + name + "'");
    names_.push_back(name);
    tensors_.push_back(std::move(tensor));
}

bool Checkpoint::has(const std::string& name) const {
    for (const std::string& n : names_)
        if (n == name) return true;
    return false;
}

const Matrix& Checkpoint::tensor(const std::string& name) const {
    for (size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) return tensors_[i];
    throw FormatError("checkpoint: no tensor named '" + name + "'");
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    json header;
    header["config"] = parse_header(ckpt.config_json);
    header["tensors"] = json::array();
    uint64_t offset = 0;
    for (const std::string& name : ckpt.names()) {
        const Matrix& t = ckpt.tensor(name);
        header["tensors"].push_back(
            {{"name", name}, {"rows", t.rows}, {"cols", t.cols}, {"offset", offset}});
        offset += uint64_t(t.size()) * sizeof(float);
    }
    const std::string head = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    out.write("CPRS", 4);
    write_u32le(out, kCheckpointVersion);
    write_u32le(out, uint32_t(head.size()));
    out.write(head.data(), std::streamsize(head.size()));
    for (const std::string& name : ckpt.names()) {
        const Matrix& t = ckpt.tensor(name);
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  std::streamsize(t.size() * sizeof(float)));
    }
    if (!out) throw IoError("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "CPRS", 4) != 0)
        throw FormatError("checkpoint: bad magic in '" + path + "'");
    const uint32_t version = read_u32le(in, "version");
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
    const uint32_t head_len = read_u32le(in, "header length");
    std::string head(head_len, '\0');
    if (!in.read(head.data(), head_len)) throw FormatError("checkpoint: truncated header");

    const json header = parse_header(head);
    if (!header.contains("config") || !header.contains("tensors") ||
        !header["tensors"].is_array())
        throw FormatError("checkpoint: header missing config or tensors");

    Checkpoint ckpt;
    ckpt.config_json = header["config"].dump();
    uint64_t expect_offset = 0;
    for (const json& entry : header["tensors"]) {
        if (!entry.contains("name") || !entry.contains("rows") || !entry.contains("cols") ||
            !entry.contains("offset"))
            throw FormatError("checkpoint: malformed tensor entry");
        const uint64_t offset = entry["offset"].get<uint64_t>();
        if (offset != expect_offset)
            throw FormatError("checkpoint: tensor offsets out of order");
        Matrix t(entry["rows"].get<size_t>(), entry["cols"].get<size_t>());
        if (!in.read(reinterpret_cast<char*>(t.data.data()),
                     std::streamsize(t.size() * sizeof(float))))
            throw FormatError("checkpoint: truncated tensor data");
        expect_offset += uint64_t(t.size()) * sizeof(float);
        ckpt.add(entry["name"].get<std::string>(), std::move(t));
    }
    if (in.peek() != std::istream::traits_type::eof())
        throw FormatError("checkpoint: trailing bytes after tensor data");
    return ckpt;
}

// ---- model packing ---------------------------------------------------------------

namespace {

Matrix row_matrix(const std::vector<float>& v) {
    Matrix m(1, v.size());
    m.data = v;
    return m;
}

std::string layer_name(size_t l, const char* field) {
    return "model.layer." + std::to_string(l) + "." + field;
}

}  // namespace

Checkpoint pack_model(const ModelWeights& weights) {
    const ModelConfig& c = weights.config;
    Checkpoint ckpt;
    json config;
    config["model"] = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                       {"d_ff", c.d_ff},             {"n_layers", c.n_layers},
                       {"n_heads", c.n_heads},       {"max_seq", c.max_seq},
                       {"rng_seed", c.rng_seed}};
    ckpt.config_json = config.dump();

    ckpt.add("model.embedding", weights.embedding);
    for (size_t l = 0; l < weights.layers.size(); ++l) {
        const LayerWeights& lw = weights.layers[l];
        ckpt.add(layer_name(l, "attn.wq"), lw.attn.wq);
        ckpt.add(layer_name(l, "attn.wk"), lw.attn.wk);
        ckpt.add(layer_name(l, "attn.wv"), lw.attn.wv);
        ckpt.add(layer_name(l, "attn.wo"), lw.attn.wo);
        ckpt.add(layer_name(l, "ffn.w_gate"), lw.ffn.w_gate);
        ckpt.add(layer_name(l, "ffn.w_in"), lw.ffn.w_in);
        ckpt.add(layer_name(l, "ffn.w_out"), lw.ffn.w_out);
        ckpt.add(layer_name(l, "attn_norm"), row_matrix(lw.attn_norm));
        ckpt.add(layer_name(l, "ffn_norm"), row_matrix(lw.ffn_norm));
    }
    ckpt.add("model.final_norm", row_matrix(weights.final_norm));
    return ckpt;
}

namespace {

Matrix expect_tensor(const Checkpoint& ckpt, const std::string& name, size_t rows, size_t cols) {
    const Matrix& t = ckpt.tensor(name);
    if (t.rows != rows || t.cols != cols)
        throw FormatError("checkpoint: tensor '" + name + "' has shape " +
                          std::to_string(t.rows) + "x" + std::to_string(t.cols) + ", expected " +
                          std::to_string(rows) + "x" + std::to_string(cols));
    return t;
}

std::vector<float> expect_vector(const Checkpoint& ckpt, const std::string& name, size_t len) {
    return expect_tensor(ckpt, name, 1, len).data;
}

}  // namespace

ModelWeights unpack_model(const Checkpoint& ckpt) {
    json config = json::parse(ckpt.config_json, nullptr, false);
    if (config.is_discarded() || !config.is_object() || !config.contains("model"))
        throw FormatError("checkpoint: header config lacks a model section");
    const json& mc = config["model"];
    ModelWeights w;
    try {
        w.config.vocab_size = mc.at("vocab_size").get<size_t>();
        w.config.d_model = mc.at("d_model").get<size_t>();
        w.config.d_ff = mc.at("d_ff").get<size_t>();
        w.config.n_layers = mc.at("n_layers").get<size_t>();
        w.config.n_heads = mc.at("n_heads").get<size_t>();
        w.config.max_seq = mc.at("max_seq").get<size_t>();
        w.config.rng_seed = mc.at("rng_seed").get<uint64_t>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: bad model section: ") + e.what());
    }
    w.config.validate();

    const size_t d = w.config.d_model, dff = w.config.d_ff;
    w.embedding = expect_tensor(ckpt, "model.embedding", w.config.vocab_size, d);
    w.layers.resize(w.config.n_layers);
    for (size_t l = 0; l < w.config.n_layers; ++l) {
        LayerWeights& lw = w.layers[l];
        lw.attn.wq = expect_tensor(ckpt, layer_name(l, "attn.wq"), d, d);
        lw.attn.wk = expect_tensor(ckpt, layer_name(l, "attn.wk"), d, d);
        lw.attn.wv = expect_tensor(ckpt, layer_name(l, "attn.wv"), d, d);
        lw.attn.wo = expect_tensor(ckpt, layer_name(l, "attn.wo"), d, d);
        lw.ffn.w_gate = expect_tensor(ckpt, layer_name(l, "ffn.w_gate"), d, dff);
        lw.ffn.w_in = expect_tensor(ckpt, layer_name(l, "ffn.w_in"), d, dff);
        lw.ffn.w_out = expect_tensor(ckpt, layer_name(l, "ffn.w_out"), dff, d);
        lw.attn_norm = expect_vector(ckpt, layer_name(l, "attn_norm"), d);
        lw.ffn_norm = expect_vector(ckpt, layer_name(l, "ffn_norm"), d);
    }
    w.final_norm = expect_vector(ckpt, "model.final_norm", d);
    return w;
}

// ---- caprese packing --------------------------------------------------------------

void pack_caprese(Checkpoint& ckpt, const std::vector<CapreseLayer>& layers) {
    if (layers.empty()) throw FormatError("checkpoint: no caprese layers to pack");
    const size_t rank = layers[0].l.cols;
    for (size_t l = 0; l < layers.size(); ++l) {
        if (layers[l].l.cols != rank || layers[l].r.rows != rank)
            throw FormatError("checkpoint: caprese layers disagree on rank");
        ckpt.add("caprese.L." + std::to_string(l), layers[l].l);
        ckpt.add("caprese.R." + std::to_string(l), layers[l].r);
    }
    json config = json::parse(ckpt.config_json);
    config["caprese_rank"] = rank;
    config["caprese_layers"] = layers.size();
    ckpt.config_json = config.dump();
}

bool has_caprese(const Checkpoint& ckpt) {
    const json config = json::parse(ckpt.config_json, nullptr, false);
    return config.is_object() && config.contains("caprese_rank");
}

std::vector<CapreseLayer> unpack_caprese(const Checkpoint& ckpt) {
    const json config = json::parse(ckpt.config_json, nullptr, false);
    if (!config.is_object() || !config.contains("caprese_rank") ||
        !config.contains("caprese_layers"))
        throw FormatError("checkpoint: header config lacks caprese metadata");
    const size_t rank = config["caprese_rank"].get<size_t>();
    const size_t count = config["caprese_layers"].get<size_t>();
    if (count == 0) throw FormatError("checkpoint: caprese_layers is zero");

    std::vector<CapreseLayer> layers(count);
    for (size_t l = 0; l < count; ++l) {
        const Matrix& lm = ckpt.tensor("caprese.L." + std::to_string(l));
        const Matrix& rm = ckpt.tensor("caprese.R." + std::to_string(l));
        if (lm.cols != rank || rm.rows != rank || lm.rows != rm.cols)
            throw FormatError("checkpoint: caprese tensor shapes disagree with header rank");
        layers[l].l = lm;
        layers[l].r = rm;
    }
    return layers;
}

}  // namespace caprese
