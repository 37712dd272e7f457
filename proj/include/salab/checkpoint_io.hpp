#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "salab/model.hpp"

namespace salab {

inline constexpr char kContainerMagic[4] = {'S', 'A', 'L', 'B'};
inline constexpr uint32_t kContainerVersion = 1;

// Tensor payloads are float32 on disk, float64 in memory.
struct NamedTensor {
    std::vector<uint64_t> shape;
    Vec data;
};

// Container layout: magic, u32 version, length-prefixed UTF-8 JSON header,
// u32 tensor count, then per tensor: length-prefixed name, u32 ndim, u64
// dims, row-major little-endian float32 data.
void write_container(const std::string& path, const std::string& json_header,
                     const std::vector<std::pair<std::string, NamedTensor>>& tensors);

struct Container {
    std::string json_header;
    std::map<std::string, NamedTensor> tensors;
    std::vector<std::string> tensor_order;
};

Container read_container(const std::string& path);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& json_text);

} // namespace salab
