#ifndef MSAT_TENSOR_HPP
#define MSAT_TENSOR_HPP

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace msat {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

/// Dense row-major tensor of `Scalar` with the last dimension fastest.
/// Image-like data uses N x C x H x W. The buffer is an Eigen column vector so
/// callers can write elementwise math as Eigen expressions on `data()`.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_dims();
    data_ = Vector::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static Tensor from(Shape shape, std::initializer_list<Scalar> values) {
    Vector v(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar x : values) v[i++] = x;
    return Tensor(std::move(shape), std::move(v));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }
  Scalar* raw() { return data_.data(); }
  const Scalar* raw() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  // NCHW accessors; rank is checked only in debug builds.
  Scalar& operator()(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
  Scalar operator()(Index n, Index c, Index h, Index w) const { return data_[offset(n, c, h, w)]; }

  Index offset(Index n, Index c, Index h, Index w) const {
    eigen_assert(shape_.size() == 4);
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  bool all_finite() const { return data_.allFinite(); }

  template <typename To>
  Tensor<To> cast() const {
    return Tensor<To>(shape_, data_.template cast<To>());
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  void check_dims() const {
    for (Index d : shape_) {
      if (d < 1) throw ShapeError("tensor dimensions must be >= 1, got " + to_string(shape_));
    }
  }

  Shape shape_;
  Vector data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Throws ShapeError unless `t` is rank 4; `what` names the argument.
template <typename Scalar>
void require_rank4(const Tensor<Scalar>& t, const char* what) {
  if (t.rank() != 4) {
    throw ShapeError(std::string(what) + " must be rank 4 (NxCxHxW), got " + to_string(t.shape()));
  }
}

}  // namespace msat

#endif  // MSAT_TENSOR_HPP
