#pragma once

#include <string>
#include <utility>
#include <vector>

#include "refquery/tensor.hpp"

namespace refquery {

// Versioned binary container of named f32 tensors plus the embedded run
// configuration (JSON text). Layout, little-endian throughout:
//   magic "RQCK" | u32 version | u32 config_len | config bytes |
//   u32 count | per tensor: u32 name_len | name | u32 ndim | u32 dims... | f32 data
struct CheckpointData {
  std::string config_json;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

void save_checkpoint(const std::string& path, const CheckpointData& ckpt);  // atomic
CheckpointData load_checkpoint(const std::string& path);

}  // namespace refquery
