#include "exact/tensor.h"

#include <cstring>
#include <fstream>

#include "exact/error.h"

namespace exact {

namespace {

constexpr char kMagic[4] = {'S', 'T', 'S', 'R'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xFF));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void append_header(std::vector<std::uint8_t>& out, const std::vector<std::size_t>& dims,
                   DType dtype) {
  if (dims.size() > 4) throw ContractError("tensor: rank > 4 not supported");
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kTensorFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(dims.size()));
  for (std::size_t d : dims) put_u32(out, static_cast<std::uint32_t>(d));
  out.push_back(static_cast<std::uint8_t>(dtype));
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("tensor: cannot open for write: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("tensor: short write: " + path);
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t, DType dtype) {
  std::vector<std::uint8_t> out;
  append_header(out, t.dims, dtype);
  if (dtype == DType::F32) {
    for (double v : t.data) {
      float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
  } else if (dtype == DType::F64) {
    for (double v : t.data) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      put_u32(out, static_cast<std::uint32_t>(bits & 0xFFFFFFFFULL));
      put_u32(out, static_cast<std::uint32_t>(bits >> 32));
    }
  } else {
    throw ContractError("tensor: float tensor cannot be written as U16");
  }
  return out;
}

std::vector<std::uint8_t> encode_mask(const MaskTensor& m) {
  std::vector<std::uint8_t> out;
  append_header(out, m.dims, DType::U16);
  for (std::uint16_t v : m.data) {
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
  }
  return out;
}

LoadedTensor decode_tensor(const std::uint8_t* bytes, std::size_t n) {
  if (n < 13) throw FormatError("tensor: truncated header");
  if (std::memcmp(bytes, kMagic, 4) != 0) throw FormatError("tensor: bad magic");
  std::uint32_t version = get_u32(bytes + 4);
  if (version != kTensorFormatVersion)
    throw FormatError("tensor: unsupported version " + std::to_string(version));
  std::uint32_t rank = get_u32(bytes + 8);
  if (rank > 4) throw FormatError("tensor: rank > 4");
  std::size_t off = 12;
  if (n < off + 4 * rank + 1) throw FormatError("tensor: truncated dims");
  LoadedTensor t;
  std::size_t numel = rank == 0 ? 0 : 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint32_t d = get_u32(bytes + off);
    off += 4;
    t.dims.push_back(d);
    numel *= d;
  }
  std::uint8_t tag = bytes[off++];
  if (tag > 2) throw FormatError("tensor: unknown dtype tag " + std::to_string(tag));
  t.dtype = static_cast<DType>(tag);
  std::size_t elem = t.dtype == DType::U16 ? 2 : (t.dtype == DType::F32 ? 4 : 8);
  if (n - off != numel * elem)
    throw FormatError("tensor: payload length mismatch (dims product " + std::to_string(numel) +
                      ", payload " + std::to_string((n - off) / elem) + " elements)");
  if (t.dtype == DType::U16) {
    t.words.resize(numel);
    for (std::size_t i = 0; i < numel; ++i) {
      t.words[i] = static_cast<std::uint16_t>(bytes[off] | (bytes[off + 1] << 8));
      off += 2;
    }
  } else if (t.dtype == DType::F32) {
    t.floats.resize(numel);
    for (std::size_t i = 0; i < numel; ++i) {
      std::uint32_t bits = get_u32(bytes + off);
      off += 4;
      float f;
      std::memcpy(&f, &bits, 4);
      t.floats[i] = static_cast<double>(f);
    }
  } else {
    t.floats.resize(numel);
    for (std::size_t i = 0; i < numel; ++i) {
      std::uint64_t lo = get_u32(bytes + off);
      std::uint64_t hi = get_u32(bytes + off + 4);
      off += 8;
      std::uint64_t bits = lo | (hi << 32);
      double d;
      std::memcpy(&d, &bits, 8);
      t.floats[i] = d;
    }
  }
  return t;
}

void write_tensor_file(const std::string& path, const Tensor& t, DType dtype) {
  write_bytes(path, encode_tensor(t, dtype));
}

void write_mask_file(const std::string& path, const MaskTensor& m) {
  write_bytes(path, encode_mask(m));
}

LoadedTensor read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("tensor: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_tensor(bytes.data(), bytes.size());
}

Tensor read_float_tensor(const std::string& path) {
  LoadedTensor lt = read_tensor_file(path);
  if (lt.dtype == DType::U16) throw FormatError("tensor: expected float data in " + path);
  Tensor t;
  t.dims = lt.dims;
  t.data = std::move(lt.floats);
  return t;
}

MaskTensor read_mask_tensor(const std::string& path) {
  LoadedTensor lt = read_tensor_file(path);
  if (lt.dtype != DType::U16) throw FormatError("tensor: expected u16 mask data in " + path);
  MaskTensor m;
  m.dims = lt.dims;
  m.data = std::move(lt.words);
  return m;
}

}  // namespace exact
