#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lhc/backbone.hpp"
#include "lhc/tensor.hpp"

namespace lhc {

// Storage precision of one container entry. In memory everything is a
// double-backed Tensor; the container narrows on write and widens on read.
enum class Precision { f64, f32, u8 };

const char* precision_name(Precision p);  // "f64" / "f32" / "u8"
std::size_t precision_size(Precision p);  // bytes per scalar

struct TensorEntry {
  std::string name;
  Precision precision = Precision::f64;
  std::vector<std::size_t> dims;
  std::size_t offset = 0;  // byte offset into the blob

  std::size_t count() const;  // product of dims
  std::size_t bytes() const;  // count * scalar size
};

// Named-tensor container: an ASCII manifest (magic line, one line per
// tensor carrying name/precision/shape/byte-offset, then the blob length)
// followed by a single little-endian buffer of packed scalar data. Used
// for model weights and for preprocessed dataset files alike.
class Checkpoint {
 public:
  // Appends an entry at the current end of the blob. Names must be unique,
  // nonempty and free of whitespace. u8 entries require integer values in
  // [0, 255]; f32 entries round each value to the nearest float.
  void put(const std::string& name, const Tensor& tensor,
           Precision precision = Precision::f64);

  bool has(const std::string& name) const;
  Tensor get(const std::string& name) const;  // widened back to double
  const TensorEntry& entry(const std::string& name) const;
  const std::vector<TensorEntry>& entries() const { return entries_; }

  std::string serialize() const;
  static Checkpoint parse(const std::string& bytes);

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

 private:
  std::vector<TensorEntry> entries_;
  std::string blob_;
};

// One f64 entry per model parameter, in manifest order.
Checkpoint checkpoint_from_model(const Model& model);

// Restores every manifest parameter by name (all must be present with
// matching shapes); entries the model does not know are ignored.
void load_into_model(const Checkpoint& ckpt, Model& model);

}  // namespace lhc
