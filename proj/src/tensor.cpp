#include "lhc/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace lhc {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, DType dtype)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0),
      dtype_(dtype) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data,
               DType dtype)
    : shape_(std::move(shape)), data_(std::move(data)), dtype_(dtype) {
  if (data_.size() != shape_product(shape_)) {
    throw ShapeError("tensor data has " + std::to_string(data_.size()) +
                     " elements but shape " + shape_str(shape_) + " needs " +
                     std::to_string(shape_product(shape_)));
  }
  if (dtype_ == DType::f32) quantize_f32();
}

Tensor Tensor::scalar(double v, DType dtype) {
  return Tensor({}, {v}, dtype);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v, DType dtype) {
  Tensor t(std::move(shape), dtype);
  for (double& x : t.data_) x = v;
  if (dtype == DType::f32) t.quantize_f32();
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str());
  }
  return shape_[axis];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  return data_[i * shape_[1] + j];
}
double& Tensor::at(std::size_t i, std::size_t j) {
  return data_[i * shape_[1] + j];
}
double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}
double& Tensor::at(std::size_t i, std::size_t j, std::size_t k) {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}
double Tensor::at(std::size_t i, std::size_t j, std::size_t k,
                  std::size_t l) const {
  return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}
double& Tensor::at(std::size_t i, std::size_t j, std::size_t k,
                   std::size_t l) {
  return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() on non-scalar tensor " + shape_str());
  }
  return data_[0];
}

Tensor Tensor::reshaped(std::vector<std::size_t> new_shape) const {
  if (shape_product(new_shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str() + " (" +
                     std::to_string(data_.size()) + " elements) to " +
                     shape_str(new_shape));
  }
  Tensor out;
  out.shape_ = std::move(new_shape);
  out.data_ = data_;
  out.dtype_ = dtype_;
  return out;
}

void Tensor::quantize_f32() {
  for (double& x : data_) x = static_cast<double>(static_cast<float>(x));
}

std::string Tensor::shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

DType promote(DType a, DType b) {
  return (a == DType::f32 && b == DType::f32) ? DType::f32 : DType::f64;
}

Tensor uniform_tensor(std::vector<std::size_t> shape, double lo, double hi,
                      std::mt19937_64& rng, DType dtype) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape), dtype);
  for (double& x : t.data()) x = dist(rng);
  if (dtype == DType::f32) t.quantize_f32();
  return t;
}

Tensor glorot_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                      std::size_t fan_out, std::mt19937_64& rng, DType dtype) {
  if (fan_in + fan_out == 0) {
    throw ConfigError("glorot_uniform needs positive fan_in + fan_out");
  }
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_tensor(std::move(shape), -limit, limit, rng, dtype);
}

}  // namespace lhc
