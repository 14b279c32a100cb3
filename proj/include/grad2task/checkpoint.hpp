#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "grad2task/adam.hpp"
#include "grad2task/param_store.hpp"
#include "grad2task/tensor.hpp"

namespace g2t {

/// Binary tensor container. Layout: 8-byte magic "G2TCKPT\0", u32 version,
/// u64 entry count, then per entry: u32 name length, name bytes, u32 rank,
/// u64 dims, little-endian f64 payload. Round trips byte-exactly.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_tensor_file(const std::string& path, const NamedTensors& tensors);
NamedTensors read_tensor_file(const std::string& path);

/// Save a parameter store, optionally with optimizer moments (reserved
/// prefix "~adam.") and extra named scalars (reserved prefix "~x.").
void save_checkpoint(const std::string& path, const ParamStore& store,
                     const Adam* opt = nullptr,
                     const std::map<std::string, double>& extras = {});

/// Load into an existing store: every stored parameter must exist with the
/// same shape (error names the offending parameter). Returns the extras map.
std::map<std::string, double> load_checkpoint(const std::string& path, ParamStore& store,
                                              Adam* opt = nullptr);

} // namespace g2t
