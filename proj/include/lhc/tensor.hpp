#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lhc/errors.hpp"

namespace lhc {

// Element precision is fixed when a tensor is constructed. Storage and
// arithmetic are double either way; f32 tensors are quantized through float on
// construction so their values are exactly representable in 32 bits (and get
// serialized as 4-byte floats).
enum class DType { f32, f64 };

// Dense row-major tensor. The data buffer always holds product(shape)
// elements; a rank-0 tensor is a scalar with one element. Values are treated
// as immutable once an op has produced them — mutation accessors exist for
// construction and for the optimizer update path only.
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0), dtype_(DType::f64) {}

  explicit Tensor(std::vector<std::size_t> shape, DType dtype = DType::f64);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data,
         DType dtype = DType::f64);

  static Tensor scalar(double v, DType dtype = DType::f64);
  static Tensor full(std::vector<std::size_t> shape, double v,
                     DType dtype = DType::f64);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  DType dtype() const { return dtype_; }
  std::size_t dim(std::size_t axis) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  double operator[](std::size_t flat) const { return data_[flat]; }
  double& operator[](std::size_t flat) { return data_[flat]; }

  // Bounds-unchecked multi-index accessors for the hot loops; rank is asserted
  // only in the checked variants used at module boundaries.
  double at(std::size_t i, std::size_t j) const;
  double& at(std::size_t i, std::size_t j);
  double at(std::size_t i, std::size_t j, std::size_t k) const;
  double& at(std::size_t i, std::size_t j, std::size_t k);
  double at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const;
  double& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l);

  // Scalar extraction; throws ShapeError unless size() == 1.
  double item() const;

  // Same data, new shape; element count must match.
  Tensor reshaped(std::vector<std::size_t> new_shape) const;

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  // Rounds every element through float. Applied automatically when
  // dtype == f32 at construction; exposed for the op layer.
  void quantize_f32();

  static std::string shape_str(const std::vector<std::size_t>& shape);
  std::string shape_str() const { return shape_str(shape_); }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
  DType dtype_;
};

// Binary ops produce f32 only when both operands are f32.
DType promote(DType a, DType b);

// Seeded fills. All randomness in the library flows through an explicit
// mt19937_64 so runs are reproducible bit-for-bit.
Tensor uniform_tensor(std::vector<std::size_t> shape, double lo, double hi,
                      std::mt19937_64& rng, DType dtype = DType::f64);

// Uniform Glorot-style init: limit = sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                      std::size_t fan_out, std::mt19937_64& rng,
                      DType dtype = DType::f64);

}  // namespace lhc
