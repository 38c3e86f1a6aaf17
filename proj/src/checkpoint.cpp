#include "lhc/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "lhc/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "container blobs are written as raw little-endian scalars");

namespace lhc {
namespace {

constexpr const char* kMagic = "LHCKPT/1";

void append_scalar(std::string& blob, double v, Precision p) {
  switch (p) {
    case Precision::f64: {
      blob.append(reinterpret_cast<const char*>(&v), sizeof(double));
      return;
    }
    case Precision::f32: {
      const float f = static_cast<float>(v);
      blob.append(reinterpret_cast<const char*>(&f), sizeof(float));
      return;
    }
    case Precision::u8: {
      const unsigned char b = static_cast<unsigned char>(v);
      blob.push_back(static_cast<char>(b));
      return;
    }
  }
  throw ValueError("unknown precision");
}

double read_scalar(const std::string& blob, std::size_t at, Precision p) {
  switch (p) {
    case Precision::f64: {
      double v;
      std::memcpy(&v, blob.data() + at, sizeof(double));
      return v;
    }
    case Precision::f32: {
      float f;
      std::memcpy(&f, blob.data() + at, sizeof(float));
      return static_cast<double>(f);
    }
    case Precision::u8:
      return static_cast<double>(
          static_cast<unsigned char>(blob[at]));
  }
  throw ValueError("unknown precision");
}

Precision precision_from(const std::string& tag, std::size_t lineno) {
  if (tag == "f64") return Precision::f64;
  if (tag == "f32") return Precision::f32;
  if (tag == "u8") return Precision::u8;
  throw ParseError("container line " + std::to_string(lineno) +
                   ": unknown precision '" + tag + "'");
}

}  // namespace

const char* precision_name(Precision p) {
  switch (p) {
    case Precision::f64: return "f64";
    case Precision::f32: return "f32";
    case Precision::u8: return "u8";
  }
  throw ValueError("unknown precision");
}

std::size_t precision_size(Precision p) {
  switch (p) {
    case Precision::f64: return 8;
    case Precision::f32: return 4;
    case Precision::u8: return 1;
  }
  throw ValueError("unknown precision");
}

std::size_t TensorEntry::count() const {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  return n;
}

std::size_t TensorEntry::bytes() const {
  return count() * precision_size(precision);
}

void Checkpoint::put(const std::string& name, const Tensor& tensor,
                     Precision precision) {
  if (name.empty())
    throw ValueError("container: empty tensor name");
  if (name.find_first_of(" \t\r\n") != std::string::npos)
    throw ValueError("container: tensor name '" + name +
                     "' contains whitespace");
  if (has(name))
    throw ValueError("container: duplicate tensor name '" + name + "'");
  if (precision == Precision::u8) {
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double v = tensor[i];
      if (v < 0.0 || v > 255.0 || v != std::floor(v))
        throw ValueError("container: u8 entry '" + name +
                         "' needs integer values in 0..255, got " +
                         std::to_string(v));
    }
  }

  TensorEntry e;
  e.name = name;
  e.precision = precision;
  e.dims = tensor.shape();
  e.offset = blob_.size();
  entries_.push_back(e);

  blob_.reserve(blob_.size() + tensor.size() * precision_size(precision));
  for (std::size_t i = 0; i < tensor.size(); ++i)
    append_scalar(blob_, tensor[i], precision);
}

bool Checkpoint::has(const std::string& name) const {
  for (const TensorEntry& e : entries_)
    if (e.name == name) return true;
  return false;
}

const TensorEntry& Checkpoint::entry(const std::string& name) const {
  for (const TensorEntry& e : entries_)
    if (e.name == name) return e;
  throw ConfigError("container: no tensor named '" + name + "'");
}

Tensor Checkpoint::get(const std::string& name) const {
  const TensorEntry& e = entry(name);
  Tensor t(e.dims);
  const std::size_t step = precision_size(e.precision);
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = read_scalar(blob_, e.offset + i * step, e.precision);
  return t;
}

std::string Checkpoint::serialize() const {
  std::string out = kMagic;
  out += '\n';
  for (const TensorEntry& e : entries_) {
    out += "tensor = ";
    out += e.name;
    out += ' ';
    out += precision_name(e.precision);
    out += ' ';
    out += std::to_string(e.dims.size());
    for (std::size_t d : e.dims) {
      out += ' ';
      out += std::to_string(d);
    }
    out += ' ';
    out += std::to_string(e.offset);
    out += '\n';
  }
  out += "blob = " + std::to_string(blob_.size()) + '\n';
  out += blob_;
  return out;
}

Checkpoint Checkpoint::parse(const std::string& bytes) {
  Checkpoint ckpt;
  std::size_t pos = 0;
  std::size_t lineno = 0;
  bool saw_magic = false;
  while (true) {
    const std::size_t eol = bytes.find('\n', pos);
    if (eol == std::string::npos)
      throw ParseError("container: truncated manifest (no blob line)");
    const std::string line = bytes.substr(pos, eol - pos);
    pos = eol + 1;
    ++lineno;

    if (!saw_magic) {
      if (line != kMagic)
        throw ParseError(std::string("container: expected magic '") +
                         kMagic + "', got '" + line + "'");
      saw_magic = true;
      continue;
    }

    if (line.rfind("blob = ", 0) == 0) {
      std::size_t declared = 0;
      try {
        declared = std::stoull(line.substr(7));
      } catch (const std::exception&) {
        throw ParseError("container: bad blob length '" + line + "'");
      }
      if (bytes.size() - pos != declared)
        throw ParseError("container: blob holds " +
                         std::to_string(bytes.size() - pos) +
                         " bytes, manifest declares " +
                         std::to_string(declared));
      ckpt.blob_ = bytes.substr(pos);
      break;
    }

    if (line.rfind("tensor = ", 0) != 0)
      throw ParseError("container line " + std::to_string(lineno) +
                       ": expected tensor or blob entry, got '" + line + "'");
    std::istringstream fields(line.substr(9));
    TensorEntry e;
    std::string tag;
    std::size_t rank = 0;
    if (!(fields >> e.name >> tag >> rank))
      throw ParseError("container line " + std::to_string(lineno) +
                       ": malformed tensor entry '" + line + "'");
    e.precision = precision_from(tag, lineno);
    e.dims.resize(rank);
    for (std::size_t i = 0; i < rank; ++i)
      if (!(fields >> e.dims[i]))
        throw ParseError("container line " + std::to_string(lineno) +
                         ": expected " + std::to_string(rank) + " dims");
    if (!(fields >> e.offset))
      throw ParseError("container line " + std::to_string(lineno) +
                       ": missing byte offset");
    std::string extra;
    if (fields >> extra)
      throw ParseError("container line " + std::to_string(lineno) +
                       ": trailing data '" + extra + "'");
    if (ckpt.has(e.name))
      throw ParseError("container line " + std::to_string(lineno) +
                       ": duplicate tensor '" + e.name + "'");
    ckpt.entries_.push_back(std::move(e));
  }

  for (const TensorEntry& e : ckpt.entries_)
    if (e.offset + e.bytes() > ckpt.blob_.size())
      throw ParseError("container: tensor '" + e.name +
                       "' extends past the blob");
  return ckpt;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError("container: cannot open '" + path + "' for writing");
  const std::string bytes = serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("container: short write to '" + path + "'");
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("container: cannot open '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str());
}

Checkpoint checkpoint_from_model(const Model& model) {
  Checkpoint ckpt;
  for (const ParamInfo& p : model.manifest())
    ckpt.put(p.name, model.param(p.name));
  return ckpt;
}

void load_into_model(const Checkpoint& ckpt, Model& model) {
  for (const ParamInfo& p : model.manifest()) {
    if (!ckpt.has(p.name))
      throw ConfigError("container: missing model parameter '" + p.name +
                        "'");
    model.set_param(p.name, ckpt.get(p.name));
  }
}

}  // namespace lhc
