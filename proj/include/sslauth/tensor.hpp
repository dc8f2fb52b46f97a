#pragma once

#include <algorithm>
#include <cstddef>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sslauth/error.hpp"

namespace sslauth {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

/// 64-byte aligned storage. Vectorised GEMM kernels pick their code path from the
/// address, so alignment also makes results independent of where a buffer lands.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

/// Dense row-major float tensor. Images are stored NHWC with values in [0,1].
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, FloatBuffer data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == shape_numel(shape_), ErrorCode::shape_mismatch,
            "tensor data size does not match shape " + shape_str(shape_));
  }
  Tensor(Shape shape, const std::vector<float>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    require(data_.size() == shape_numel(shape_), ErrorCode::shape_mismatch,
            "tensor data size does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  int dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> span() noexcept { return data_; }
  std::span<const float> span() const noexcept { return data_; }
  FloatBuffer& vec() noexcept { return data_; }
  const FloatBuffer& vec() const noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  void reshape(Shape s) {
    require(shape_numel(s) == data_.size(), ErrorCode::shape_mismatch,
            "cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    shape_ = std::move(s);
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  /// Rows [begin, end) along the leading axis, copied.
  Tensor slice(int begin, int end) const {
    require(rank() >= 1 && begin >= 0 && begin <= end && end <= shape_[0], ErrorCode::out_of_range,
            "slice out of range");
    Shape s = shape_;
    s[0] = end - begin;
    const std::size_t stride = row_size();
    return Tensor(s, FloatBuffer(data_.begin() + begin * stride, data_.begin() + end * stride));
  }

  /// Rows selected by index along the leading axis.
  Tensor gather(std::span<const int> rows) const {
    Shape s = shape_;
    s[0] = static_cast<int>(rows.size());
    Tensor out(s);
    const std::size_t stride = row_size();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i] >= 0 && rows[i] < shape_[0], ErrorCode::out_of_range, "gather index out of range");
      std::copy_n(data_.begin() + rows[i] * stride, stride, out.data_.begin() + i * stride);
    }
    return out;
  }

  std::size_t row_size() const { return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0]; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  FloatBuffer data_;
};

/// Stacks tensors with identical trailing shape along the leading axis.
inline Tensor concat(std::span<const Tensor* const> parts) {
  require(!parts.empty(), ErrorCode::invalid_argument, "concat of nothing");
  Shape s = parts[0]->shape();
  int rows = 0;
  for (const Tensor* p : parts) {
    require(p->rank() == s.size() && std::equal(s.begin() + 1, s.end(), p->shape().begin() + 1),
            ErrorCode::shape_mismatch, "concat trailing shapes differ");
    rows += p->dim(0);
  }
  s[0] = rows;
  Tensor out(s);
  float* dst = out.data();
  for (const Tensor* p : parts) dst = std::copy(p->data(), p->data() + p->size(), dst);
  return out;
}

inline Tensor concat(std::initializer_list<const Tensor*> parts) {
  std::vector<const Tensor*> v(parts);
  return concat(std::span<const Tensor* const>(v));
}

inline void require_images(const Tensor& x, const char* what) {
  require(x.rank() == 4 && x.dim(3) == 3, ErrorCode::shape_mismatch,
          std::string(what) + ": expected image batch (B, H, W, 3), got " + shape_str(x.shape()));
}

}  // namespace sslauth
