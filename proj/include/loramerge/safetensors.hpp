// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "loramerge/matrix.hpp"

namespace loramerge {

// Tensor container: 8-byte little-endian header length, UTF-8 JSON header
// mapping tensor name -> {dtype, shape, data_offsets}, optional __metadata__
// string map, then the contiguous little-endian tensor buffer. Supported
// dtypes are F16, BF16, F32, F64; values are widened to f64 on load.
struct SafetensorsFile {
    struct Entry {
        Matrix data;                     // 1-D tensors load as 1 x n
        std::vector<std::size_t> shape;  // original shape from the header
        std::string dtype;
    };
    std::map<std::string, Entry> tensors;
    std::map<std::string, std::string> metadata;
};

SafetensorsFile load_safetensors(const std::string& path);

// Deterministic writer: tensor names sorted, offsets assigned in name order,
// compact JSON. `dtype` applies to every tensor (F32 or F64).
void save_safetensors(const std::string& path,
                      const std::map<std::string, Matrix>& tensors,
                      const std::map<std::string, std::string>& metadata = {},
                      const std::string& dtype = "F32");

struct UnsupportedFormatError : Error {
    using Error::Error;
};

}  // namespace loramerge
