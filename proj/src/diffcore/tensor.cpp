#include "tshamo/diffcore.hpp"

#include <numeric>
#include <sstream>

namespace tshamo::diffcore {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index num_elements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

namespace {
void check_dims(const Shape& shape) {
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("tensor: non-positive dimension in shape " + to_string(shape));
  }
}
}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_dims(shape_);
  data_ = Eigen::VectorXd::Zero(num_elements(shape_));
}

Tensor::Tensor(Shape shape, Eigen::VectorXd data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_dims(shape_);
  if (num_elements(shape_) != data_.size()) {
    throw ShapeError("tensor: shape " + to_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor::Tensor(Shape shape, std::initializer_list<double> values)
    : Tensor(std::move(shape), Eigen::Map<const Eigen::VectorXd>(values.begin(),
                                                                 static_cast<Index>(values.size()))) {}

Tensor Tensor::scalar(double value) {
  Eigen::VectorXd d(1);
  d[0] = value;
  return Tensor(Shape{}, std::move(d));
}

Tensor Tensor::from_matrix(const Eigen::Ref<const RowMatrix>& m) {
  Tensor t(Shape{m.rows(), m.cols()});
  t.matrix() = m;
  return t;
}

Index Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw ShapeError("tensor: axis out of range for " + to_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("tensor: item() on non-scalar " + to_string(shape_));
  return data_[0];
}

MatrixMap Tensor::matrix() {
  const Index cols = shape_.empty() ? 1 : shape_.back();
  return MatrixMap(data_.data(), data_.size() / cols, cols);
}

ConstMatrixMap Tensor::matrix() const {
  const Index cols = shape_.empty() ? 1 : shape_.back();
  return ConstMatrixMap(data_.data(), data_.size() / cols, cols);
}

MatrixMap Tensor::matrix(Index rows, Index cols) {
  if (rows * cols != data_.size()) throw ShapeError("tensor: bad matrix view of " + to_string(shape_));
  return MatrixMap(data_.data(), rows, cols);
}

ConstMatrixMap Tensor::matrix(Index rows, Index cols) const {
  if (rows * cols != data_.size()) throw ShapeError("tensor: bad matrix view of " + to_string(shape_));
  return ConstMatrixMap(data_.data(), rows, cols);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (num_elements(shape) != size()) {
    throw ShapeError("reshape: cannot view " + to_string(shape_) + " as " + to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

}  // namespace tshamo::diffcore
