#ifndef CAPSOSR_TENSOR_HPP_
#define CAPSOSR_TENSOR_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace capsosr {

// Dense row-major tensor of doubles. Value type: copies copy the buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(checked_numel(shape_), fill) {}
  Tensor(std::vector<int64_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != checked_numel(shape_)) {
      throw std::invalid_argument("Tensor: data size does not match shape");
    }
  }

  static Tensor scalar(double v) { return Tensor({std::vector<int64_t>{}}, std::vector<double>{v}); }

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t ndim() const { return shape_.size(); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  double& at(std::initializer_list<int64_t> idx) { return data_[offset(idx)]; }
  double at(std::initializer_list<int64_t> idx) const { return data_[offset(idx)]; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  Tensor reshaped(std::vector<int64_t> new_shape) const {
    if (checked_numel(new_shape) != numel()) {
      throw std::invalid_argument("Tensor::reshaped: element count mismatch");
    }
    Tensor out;
    out.shape_ = std::move(new_shape);
    out.data_ = data_;
    return out;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
  }

 private:
  static int64_t checked_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  size_t offset(std::initializer_list<int64_t> idx) const {
    if (idx.size() != shape_.size()) throw std::invalid_argument("Tensor::at: rank mismatch");
    int64_t off = 0;
    size_t k = 0;
    for (int64_t i : idx) {
      if (i < 0 || i >= shape_[k]) throw std::out_of_range("Tensor::at: index out of range");
      off = off * shape_[k] + i;
      ++k;
    }
    return static_cast<size_t>(off);
  }

  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

inline double dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw std::invalid_argument("dot: size mismatch");
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

}  // namespace capsosr

#endif  // CAPSOSR_TENSOR_HPP_
