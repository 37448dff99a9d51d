#pragma once

// Dense rank<=4 tensor container (N,C,H,W when rank 4), row-major storage.
// Single or double precision via the template parameter.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace msv {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

inline void check_shape_valid(const Shape& shape) {
  if (shape.empty() || shape.size() > 4)
    throw std::invalid_argument("tensor rank must be 1..4, got " + std::to_string(shape.size()));
  for (std::size_t e : shape)
    if (e == 0) throw std::invalid_argument("tensor extents must be >= 1: " + shape_str(shape));
}

template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape_valid(shape_);
    data_.assign(numel(shape_), T(0));
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape_valid(shape_);
    if (data_.size() != numel(shape_))
      throw std::invalid_argument("data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(shape_));
  }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    for (T& v : t.data_) v = value;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t dim) const { return shape_.at(dim); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // N,C,H,W accessors; valid for rank-4 tensors only.
  std::size_t n() const { return dim4(0); }
  std::size_t c() const { return dim4(1); }
  std::size_t h() const { return dim4(2); }
  std::size_t w() const { return dim4(3); }

  T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[idx4(n, c, h, w)];
  }
  const T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[idx4(n, c, h, w)];
  }
  std::size_t idx4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  std::size_t dim4(std::size_t i) const {
    if (shape_.size() != 4) throw std::logic_error("rank-4 accessor on rank-" +
                                                   std::to_string(shape_.size()) + " tensor");
    return shape_[i];
  }

  Shape shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Counter-based splitmix64 stream; identical seeds give identical draws on
// every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Derived stream, independent of draws taken from this one.
  Rng fork(std::uint64_t stream) const {
    Rng r(state_ ^ (0x6a09e667f3bcc909ull + stream * 0xd1342543de82ef95ull));
    return r;
  }

 private:
  std::uint64_t state_;
};

// Static-partition parallel loop. Each index is processed exactly once by a
// fixed worker, so results are bit-identical for any thread count.
inline void parallel_for(std::size_t count, unsigned threads,
                         const std::function<void(std::size_t)>& body) {
  if (threads <= 1 || count < 2) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  unsigned workers = static_cast<unsigned>(std::min<std::size_t>(threads, count));
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned t = 0; t < workers; ++t) {
    pool.emplace_back([&, t]() {
      for (std::size_t i = t; i < count; i += workers) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace msv
