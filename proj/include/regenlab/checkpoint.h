#pragma once

#include <string>
#include <utility>
#include <vector>

#include "regenlab/tensor.h"

namespace regenlab {

// Binary tensor container, magic "REGENLAB1". After the magic come tensor
// records until EOF: u64-LE name length, name bytes, u64-LE rank, u64-LE dims,
// then the row-major payload as little-endian IEEE-754 doubles. Round-trips
// bit-exactly.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::string& path);

}  // namespace regenlab
