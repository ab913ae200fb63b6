#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kamal/core/error.hpp"

namespace kamal {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major float32 array of rank 1..4. A default-constructed tensor
// is empty (rank 0) and only serves as a placeholder.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    require<ShapeError>(data_.size() == shape_size(shape_), "tensor data length ", data_.size(),
                        " does not match shape ", shape_str(shape_));
  }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  [[nodiscard]] bool empty() const { return shape_.empty(); }
  [[nodiscard]] std::size_t rank() const { return shape_.size(); }
  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t dim(std::size_t i) const { return shape_.at(i); }
  [[nodiscard]] std::size_t size() const { return data_.size(); }

  [[nodiscard]] std::span<float> data() { return data_; }
  [[nodiscard]] std::span<const float> data() const { return data_; }
  [[nodiscard]] float* ptr() { return data_.data(); }
  [[nodiscard]] const float* ptr() const { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
    return data_[offset(b, c, h, w)];
  }
  float at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[offset(b, c, h, w)];
  }
  float& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  // Same buffer, new extents with equal element count.
  [[nodiscard]] Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), std::vector<float>(data_));
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  // Exact elementwise equality (bit-level for non-NaN values).
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  // Samples [begin, begin+count) along the leading axis.
  [[nodiscard]] Tensor slice(std::size_t begin, std::size_t count) const {
    require<ShapeError>(rank() >= 1 && begin + count <= shape_[0], "slice [", begin, ",",
                        begin + count, ") out of range for ", shape_str(shape_));
    Shape s = shape_;
    s[0] = count;
    const std::size_t row = data_.size() / shape_[0];
    return Tensor(std::move(s), std::vector<float>(data_.begin() + begin * row,
                                                   data_.begin() + (begin + count) * row));
  }

  // Samples at the given leading-axis indices, in order.
  [[nodiscard]] Tensor gather(std::span<const std::size_t> idx) const {
    require<ShapeError>(rank() >= 1 && !idx.empty(), "gather needs a non-empty index list");
    Shape s = shape_;
    s[0] = idx.size();
    const std::size_t row = data_.size() / shape_[0];
    std::vector<float> out(idx.size() * row);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      require<ShapeError>(idx[i] < shape_[0], "gather index ", idx[i], " out of range");
      std::copy_n(data_.begin() + idx[i] * row, row, out.begin() + i * row);
    }
    return Tensor(std::move(s), std::move(out));
  }

 private:
  static void validate_shape(const Shape& s) {
    require<ShapeError>(!s.empty() && s.size() <= 4, "tensor rank must be 1..4, got ", s.size());
    for (auto e : s) require<ShapeError>(e >= 1, "tensor extents must be >= 1, got ", shape_str(s));
  }

  [[nodiscard]] std::size_t offset(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
    return ((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  std::vector<float> data_;
};

inline std::ostream& operator<<(std::ostream& os, const Tensor& t) {
  return os << "Tensor" << shape_str(t.shape());
}

// Channel-wise concatenation of rank-4 tensors (or rank-2 along features).
inline Tensor concat_channels(std::span<const Tensor> parts) {
  require<ShapeError>(!parts.empty(), "concat_channels needs at least one tensor");
  const Tensor& first = parts.front();
  const std::size_t rank = first.rank();
  require<ShapeError>(rank == 2 || rank == 4, "concat_channels expects rank 2 or 4");
  const std::size_t batch = first.dim(0);
  const std::size_t spatial = rank == 4 ? first.dim(2) * first.dim(3) : 1;
  std::size_t channels = 0;
  for (const auto& p : parts) {
    require<ShapeError>(p.rank() == rank && p.dim(0) == batch &&
                            (rank == 2 || (p.dim(2) == first.dim(2) && p.dim(3) == first.dim(3))),
                        "concat_channels shape mismatch: ", shape_str(p.shape()), " vs ",
                        shape_str(first.shape()));
    channels += p.dim(1);
  }
  Shape s = first.shape();
  s[1] = channels;
  Tensor out(s);
  for (std::size_t b = 0; b < batch; ++b) {
    float* dst = out.ptr() + b * channels * spatial;
    for (const auto& p : parts) {
      const std::size_t n = p.dim(1) * spatial;
      std::copy_n(p.ptr() + b * n, n, dst);
      dst += n;
    }
  }
  return out;
}

inline Tensor concat_channels(std::initializer_list<Tensor> parts) {
  std::vector<Tensor> v(parts);
  return concat_channels(std::span<const Tensor>(v));
}

// Inverse of concat_channels: splits channel axis into the given widths.
inline std::vector<Tensor> split_channels(const Tensor& t, std::span<const std::size_t> widths) {
  const std::size_t rank = t.rank();
  require<ShapeError>(rank == 2 || rank == 4, "split_channels expects rank 2 or 4");
  const std::size_t total = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
  require<ShapeError>(total == t.dim(1), "split widths sum ", total, " != channels ", t.dim(1));
  const std::size_t spatial = rank == 4 ? t.dim(2) * t.dim(3) : 1;
  std::vector<Tensor> out;
  std::size_t start = 0;
  for (auto w : widths) {
    Shape s = t.shape();
    s[1] = w;
    Tensor part(s);
    for (std::size_t b = 0; b < t.dim(0); ++b)
      std::copy_n(t.ptr() + (b * total + start) * spatial, w * spatial, part.ptr() + b * w * spatial);
    out.push_back(std::move(part));
    start += w;
  }
  return out;
}

// Stacks leading-axis batches back together.
inline Tensor concat_batches(std::span<const Tensor> parts) {
  require<ShapeError>(!parts.empty(), "concat_batches needs at least one tensor");
  Shape s = parts.front().shape();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require<ShapeError>(p.rank() == s.size() && std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1),
                        "concat_batches shape mismatch");
    n += p.dim(0);
  }
  s[0] = n;
  std::vector<float> data;
  data.reserve(shape_size(s));
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Tensor(std::move(s), std::move(data));
}

}  // namespace kamal
