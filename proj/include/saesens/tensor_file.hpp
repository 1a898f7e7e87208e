#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace saesens {

// One tensor from a safetensors container, widened to float32.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> values;

  std::size_t numel() const;
  std::string shape_string() const;
};

struct TensorFile {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> metadata;  // the "__metadata__" block
};

// Reads a safetensors file: u64 little-endian header length, JSON header
// mapping tensor name -> {dtype, shape, data_offsets}, then raw little-endian
// data. Supported dtypes: F32, F64, F16, BF16, I32, I64.
TensorFile read_safetensors(const std::filesystem::path& path);

// Writes every tensor as F32, names in sorted order.
void write_safetensors(const std::filesystem::path& path, const TensorFile& file);

}  // namespace saesens
