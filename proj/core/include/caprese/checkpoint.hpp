#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "caprese/caprese_layer.hpp"
#include "caprese/matrix.hpp"
#include "caprese/model.hpp"

namespace caprese {

inline constexpr uint32_t kCheckpointVersion = 1;

// Named f32 tensors in declared order plus a JSON metadata object. Names are
// unique; tensor data round-trips bit-exactly.
class Checkpoint {
public:
    std::string config_json = "{}";  // free-form JSON object

    void add(const std::string& name, Matrix tensor);      // FormatError on duplicate
    bool has(const std::string& name) const;
    const Matrix& tensor(const std::string& name) const;   // FormatError if absent
    const std::vector<std::string>& names() const { return names_; }
    size_t size() const { return names_.size(); }

private:
    std::vector<std::string> names_;
    std::vector<Matrix> tensors_;
};

// On-disk layout: magic "CPRS", u32 LE version, u32 LE header length, UTF-8
// JSON header {"config": ..., "tensors": [{name, rows, cols, offset}, ...]},
// then raw little-endian f32 tensor data in declared order. Offsets are byte
// positions from the start of the data section. Saving the result of a load
// reproduces the file byte for byte.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);  // IoError
Checkpoint load_checkpoint(const std::string& path);  // IoError / FormatError

// Model weights under model.* names; the ModelConfig lands in the header
// under "model". Unpack validates shapes against that config.
Checkpoint pack_model(const ModelWeights& weights);
ModelWeights unpack_model(const Checkpoint& ckpt);  // FormatError

// Caprese layers as caprese.L.<layer> / caprese.R.<layer>, the shared rank
// recorded in the header under "caprese_rank". Mixed ranks are rejected.
void pack_caprese(Checkpoint& ckpt, const std::vector<CapreseLayer>& layers);  // FormatError
bool has_caprese(const Checkpoint& ckpt);
std::vector<CapreseLayer> unpack_caprese(const Checkpoint& ckpt);  // FormatError

}  // namespace caprese
