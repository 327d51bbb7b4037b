#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace exact {

// Dense row-major tensor of rank <= 4. Floating data is held as double in
// memory regardless of the on-disk dtype; the generator casts to f32 at
// creation time so f32 files round-trip bit-exactly.
struct Tensor {
  std::vector<std::size_t> dims;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> d) : dims(std::move(d)) { data.resize(numel(), 0.0); }

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    return dims.empty() ? 0 : n;
  }
  std::size_t rank() const { return dims.size(); }

  double& at(std::size_t i) { return data[i]; }
  double at(std::size_t i) const { return data[i]; }
};

// Integer label map, {0..K} plus the reserved ignore value.
struct MaskTensor {
  std::vector<std::size_t> dims;
  std::vector<std::uint16_t> data;

  MaskTensor() = default;
  MaskTensor(std::size_t h, std::size_t w) : dims{h, w}, data(h * w, 0) {}

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    return dims.empty() ? 0 : n;
  }
};

// Pixels carrying this value are excluded from segmentation losses.
inline constexpr std::uint16_t kIgnoreLabel = 0xFFFF;

enum class DType : std::uint8_t { F32 = 0, U16 = 1, F64 = 2 };

// Tensor file: magic "STSR", u32 LE version=1, u32 rank, rank x u32 dims,
// u8 dtype tag, payload row-major little-endian. Dataset series use F32 and
// masks U16; the F64 tag is used by checkpoints and debug dumps.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor_file(const std::string& path, const Tensor& t, DType dtype = DType::F32);
void write_mask_file(const std::string& path, const MaskTensor& m);

struct LoadedTensor {
  DType dtype = DType::F32;
  std::vector<std::size_t> dims;
  std::vector<double> floats;        // F32/F64 payloads
  std::vector<std::uint16_t> words;  // U16 payloads
};

LoadedTensor read_tensor_file(const std::string& path);
Tensor read_float_tensor(const std::string& path);
MaskTensor read_mask_tensor(const std::string& path);

// Serialized forms, used by the container formats and the provenance hash.
std::vector<std::uint8_t> encode_tensor(const Tensor& t, DType dtype);
std::vector<std::uint8_t> encode_mask(const MaskTensor& m);
LoadedTensor decode_tensor(const std::uint8_t* bytes, std::size_t n);

}  // namespace exact
