#include "saesens/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "saesens/error.hpp"
#include "saesens/io.hpp"

namespace saesens {

std::size_t Tensor::numel() const {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string Tensor::shape_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000) << 16;
  std::uint32_t exp = (h >> 10) & 0x1f;
  std::uint32_t mant = h & 0x3ff;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while ((mant & 0x400) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3ff;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000 | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

template <typename T>
T load(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F32" || dtype == "I32") return 4;
  if (dtype == "F64" || dtype == "I64") return 8;
  if (dtype == "F16" || dtype == "BF16") return 2;
  return 0;
}

}  // namespace

TensorFile read_safetensors(const std::filesystem::path& path) {
  const std::string raw = read_file(path);
  if (raw.size() < 8) throw FormatError("safetensors file too short", raw.size());
  const auto header_len = load<std::uint64_t>(raw.data());
  if (header_len > raw.size() - 8) throw FormatError("safetensors header length exceeds file", 0);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(raw.begin() + 8, raw.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("bad safetensors header: ") + e.what(), 8 + e.byte);
  }
  const std::size_t data_start = 8 + header_len;
  const std::size_t data_size = raw.size() - data_start;

  TensorFile file;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items()) file.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
      continue;
    }
    const auto dtype = entry.at("dtype").get<std::string>();
    const std::size_t width = dtype_size(dtype);
    if (width == 0) throw LoadError("tensor " + name + ": unsupported dtype " + dtype);
    Tensor t;
    t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto offsets = entry.at("data_offsets").get<std::vector<std::size_t>>();
    if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > data_size) {
      throw FormatError("tensor " + name + ": data offsets out of range", 8);
    }
    const std::size_t n = t.numel();
    if (offsets[1] - offsets[0] != n * width) {
      throw LoadError("tensor " + name + ": byte size does not match shape " + t.shape_string());
    }
    const char* p = raw.data() + data_start + offsets[0];
    t.values.resize(n);
    for (std::size_t i = 0; i < n; ++i, p += width) {
      if (dtype == "F32") {
        t.values[i] = load<float>(p);
      } else if (dtype == "F64") {
        t.values[i] = static_cast<float>(load<double>(p));
      } else if (dtype == "F16") {
        t.values[i] = half_to_float(load<std::uint16_t>(p));
      } else if (dtype == "BF16") {
        t.values[i] = std::bit_cast<float>(static_cast<std::uint32_t>(load<std::uint16_t>(p)) << 16);
      } else if (dtype == "I32") {
        t.values[i] = static_cast<float>(load<std::int32_t>(p));
      } else {
        t.values[i] = static_cast<float>(load<std::int64_t>(p));
      }
    }
    file.tensors.emplace(name, std::move(t));
  }
  return file;
}

void write_safetensors(const std::filesystem::path& path, const TensorFile& file) {
  nlohmann::ordered_json header;
  if (!file.metadata.empty()) {
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();
    for (const auto& [k, v] : file.metadata) meta[k] = v;
    header["__metadata__"] = meta;
  }
  std::size_t offset = 0;
  for (const auto& [name, t] : file.tensors) {
    if (t.values.size() != t.numel()) throw ShapeError("tensor " + name + ": value count does not match shape");
    const std::size_t bytes = t.values.size() * sizeof(float);
    header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string h = header.dump();
  while (h.size() % 8 != 0) h.push_back(' ');
  std::string out(8, '\0');
  const std::uint64_t len = h.size();
  std::memcpy(out.data(), &len, 8);
  out += h;
  for (const auto& [name, t] : file.tensors) {
    out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(float));
  }
  write_file_atomic(path, out);
}

}  // namespace saesens
