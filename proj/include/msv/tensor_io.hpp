#pragma once

// Bit-exact tensor file format:
//   magic "MST1" | u32 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank |
//   2 zero bytes | rank x u32 extents | row-major payload.
// Everything little-endian; trailing bytes are rejected. Loads validate
// finiteness so NaN/Inf never enter the kernels from disk.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <type_traits>

#include "msv/tensor.hpp"

namespace msv {

inline constexpr char kTensorMagic[4] = {'M', 'S', 'T', '1'};
inline constexpr std::uint32_t kTensorVersion = 1;

class TensorIoError : public std::runtime_error {
 public:
  explicit TensorIoError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
  buf.push_back(static_cast<char>((v >> 16) & 0xff));
  buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_u64(std::string& buf, std::uint64_t v) {
  put_u32(buf, static_cast<std::uint32_t>(v & 0xffffffffu));
  put_u32(buf, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  return static_cast<std::uint64_t>(get_u32(p)) |
         (static_cast<std::uint64_t>(get_u32(p + 4)) << 32);
}

template <class T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace detail

template <class T>
std::string encode_tensor(const Tensor<T>& t) {
  std::string buf;
  buf.reserve(12 + 4 * t.rank() + sizeof(T) * t.size());
  buf.append(kTensorMagic, 4);
  detail::put_u32(buf, kTensorVersion);
  buf.push_back(static_cast<char>(detail::dtype_code<T>()));
  buf.push_back(static_cast<char>(t.rank()));
  buf.push_back(0);
  buf.push_back(0);
  for (std::size_t d = 0; d < t.rank(); ++d) {
    if (t.extent(d) > 0xffffffffull) throw TensorIoError("extent exceeds u32 range");
    detail::put_u32(buf, static_cast<std::uint32_t>(t.extent(d)));
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    if constexpr (std::is_same_v<T, float>)
      detail::put_u32(buf, std::bit_cast<std::uint32_t>(t[i]));
    else
      detail::put_u64(buf, std::bit_cast<std::uint64_t>(t[i]));
  }
  return buf;
}

template <class T>
Tensor<T> decode_tensor(const std::string& buf, const std::string& origin = "<memory>") {
  const auto fail = [&](const std::string& why) -> TensorIoError {
    return TensorIoError(origin + ": " + why);
  };
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  if (buf.size() < 12) throw fail("truncated header");
  if (std::memcmp(p, kTensorMagic, 4) != 0) throw fail("bad magic");
  if (detail::get_u32(p + 4) != kTensorVersion) throw fail("unsupported version");
  const std::uint8_t dtype = p[8];
  if (dtype != detail::dtype_code<T>()) {
    if (dtype > 1) throw fail("unknown dtype code " + std::to_string(dtype));
    throw fail(std::string("dtype mismatch: file holds ") + (dtype == 0 ? "f32" : "f64"));
  }
  const std::size_t rank = p[9];
  if (rank < 1 || rank > 4) throw fail("rank must be 1..4, got " + std::to_string(rank));
  if (p[10] != 0 || p[11] != 0) throw fail("nonzero header padding");
  if (buf.size() < 12 + 4 * rank) throw fail("truncated extents");

  Shape shape(rank);
  std::size_t count = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    shape[d] = detail::get_u32(p + 12 + 4 * d);
    if (shape[d] == 0) throw fail("zero extent");
    count *= shape[d];
  }
  const std::size_t payload_at = 12 + 4 * rank;
  const std::size_t payload_bytes = count * sizeof(T);
  if (buf.size() < payload_at + payload_bytes) throw fail("truncated payload");
  if (buf.size() > payload_at + payload_bytes) throw fail("trailing bytes after payload");

  std::vector<T> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    if constexpr (std::is_same_v<T, float>)
      data[i] = std::bit_cast<float>(detail::get_u32(p + payload_at + 4 * i));
    else
      data[i] = std::bit_cast<double>(detail::get_u64(p + payload_at + 8 * i));
  }
  Tensor<T> t(std::move(shape), std::move(data));
  if (!t.all_finite()) throw fail("payload contains NaN or Inf");
  return t;
}

// Peeks at the dtype byte so callers can pick the right instantiation.
inline int peek_dtype(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorIoError(path + ": cannot open");
  char hdr[9];
  in.read(hdr, 9);
  if (in.gcount() != 9) throw TensorIoError(path + ": truncated header");
  if (std::memcmp(hdr, kTensorMagic, 4) != 0) throw TensorIoError(path + ": bad magic");
  return static_cast<unsigned char>(hdr[8]);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorIoError(path + ": cannot open");
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return buf;
}

// Atomic write: temp file in the same directory, then rename.
inline void write_file_atomic(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw TensorIoError(tmp.string() + ": cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw TensorIoError(tmp.string() + ": write failed");
  }
  fs::rename(tmp, target);
}

template <class T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  write_file_atomic(path, encode_tensor(t));
}

template <class T>
Tensor<T> load_tensor(const std::string& path) {
  return decode_tensor<T>(read_file_bytes(path), path);
}

}  // namespace msv
