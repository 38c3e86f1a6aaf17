#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "lhc/backbone.hpp"
#include "lhc/checkpoint.hpp"
#include "reference_ops.hpp"

using lhc::Checkpoint;
using lhc::Model;
using lhc::Precision;
using lhc::Tensor;

namespace {

bool identical(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("checkpoint: sequential byte offsets and the frozen manifest") {
  Checkpoint ckpt;
  Tensor a({2, 3}, {1.0, -2.5, 3.0, 0.0, 4.5, -6.0});
  Tensor b({4}, {0.5, 1.5, -2.25, 8.0});
  Tensor c({5}, {0.0, 17.0, 255.0, 128.0, 3.0});
  ckpt.put("layer.weight", a);                  // 6 * 8 = 48 bytes
  ckpt.put("layer.scale", b, Precision::f32);   // 4 * 4 = 16 bytes
  ckpt.put("image.bytes", c, Precision::u8);    // 5 * 1 = 5 bytes

  REQUIRE(ckpt.entries().size() == 3);
  CHECK(ckpt.entries()[0].name == "layer.weight");
  CHECK(ckpt.entries()[0].precision == Precision::f64);
  CHECK(ckpt.entries()[0].dims == std::vector<std::size_t>{2, 3});
  CHECK(ckpt.entries()[0].offset == 0);
  CHECK(ckpt.entries()[1].offset == 48);
  CHECK(ckpt.entries()[1].precision == Precision::f32);
  CHECK(ckpt.entries()[2].offset == 64);
  CHECK(ckpt.entries()[2].precision == Precision::u8);

  CHECK(std::string(lhc::precision_name(Precision::f64)) == "f64");
  CHECK(lhc::precision_size(Precision::f32) == 4);
  CHECK(lhc::precision_size(Precision::u8) == 1);

  // The ASCII manifest is frozen: magic, one line per tensor
  // (name precision rank dims... offset), then the blob length.
  const std::string bytes = ckpt.serialize();
  CHECK(bytes.rfind("LHCKPT/1\n", 0) == 0);
  CHECK(bytes.find("tensor = layer.weight f64 2 2 3 0\n") !=
        std::string::npos);
  CHECK(bytes.find("tensor = layer.scale f32 1 4 48\n") != std::string::npos);
  CHECK(bytes.find("tensor = image.bytes u8 1 5 64\n") != std::string::npos);
  CHECK(bytes.find("blob = 69\n") != std::string::npos);
  // Serialization is deterministic byte for byte.
  CHECK(ckpt.serialize() == bytes);
}

TEST_CASE("checkpoint: precision round trips") {
  auto g = refops::rng(19);
  const Tensor wide = refops::random_tensor({3, 4}, g, -5.0, 5.0);
  Tensor narrow = refops::random_tensor({7}, g, -3.0, 3.0);
  Tensor bytes_img({2, 2}, {0.0, 255.0, 7.0, 200.0});

  Checkpoint ckpt;
  ckpt.put("wide", wide);
  ckpt.put("narrow", narrow, Precision::f32);
  ckpt.put("img", bytes_img, Precision::u8);

  const Checkpoint back = Checkpoint::parse(ckpt.serialize());
  REQUIRE(back.entries().size() == 3);
  CHECK(back.has("wide"));
  CHECK_FALSE(back.has("missing"));

  // f64 is exact.
  CHECK(identical(back.get("wide"), wide));
  // f32 stores the nearest float of each value.
  const Tensor n = back.get("narrow");
  REQUIRE(n.same_shape(narrow));
  for (std::size_t i = 0; i < n.size(); ++i)
    CHECK(n[i] == static_cast<double>(static_cast<float>(narrow[i])));
  // u8 keeps exact integer intensities.
  CHECK(identical(back.get("img"), bytes_img));

  // Re-serializing the parsed container reproduces the bytes.
  CHECK(back.serialize() == ckpt.serialize());
}

TEST_CASE("checkpoint: file save/load round trip") {
  auto g = refops::rng(23);
  Checkpoint ckpt;
  ckpt.put("a", refops::random_tensor({5, 2}, g));
  ckpt.put("b", Tensor({3}, {9.0, 8.0, 7.0}), Precision::u8);

  const std::string path = "ckpt_roundtrip.bin";
  ckpt.save(path);
  const Checkpoint loaded = Checkpoint::load(path);
  CHECK(loaded.serialize() == ckpt.serialize());
  CHECK(identical(loaded.get("a"), ckpt.get("a")));
  std::remove(path.c_str());

  CHECK_THROWS_AS(Checkpoint::load("no_such_dir/nope.bin"), lhc::IoError);
}

TEST_CASE("checkpoint: malformed input and misuse are rejected") {
  Checkpoint ckpt;
  ckpt.put("x", Tensor({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(ckpt.put("x", Tensor({2})), lhc::ValueError);  // duplicate
  CHECK_THROWS_AS(ckpt.put("", Tensor({2})), lhc::ValueError);
  CHECK_THROWS_AS(ckpt.put("has space", Tensor({2})), lhc::ValueError);
  CHECK_THROWS_AS(ckpt.get("absent"), lhc::ConfigError);

  // u8 payloads must be integers in [0, 255].
  Checkpoint u8ckpt;
  CHECK_THROWS_AS(u8ckpt.put("i", Tensor({1}, {0.5}), Precision::u8),
                  lhc::ValueError);
  CHECK_THROWS_AS(u8ckpt.put("i", Tensor({1}, {-1.0}), Precision::u8),
                  lhc::ValueError);
  CHECK_THROWS_AS(u8ckpt.put("i", Tensor({1}, {256.0}), Precision::u8),
                  lhc::ValueError);

  CHECK_THROWS_AS(Checkpoint::parse("JUNK/9\nblob = 0\n"), lhc::ParseError);
  CHECK_THROWS_AS(Checkpoint::parse(""), lhc::ParseError);
  // Unknown precision tag.
  CHECK_THROWS_AS(
      Checkpoint::parse("LHCKPT/1\ntensor = t f16 1 2 0\nblob = 4\n\0\0\0\0"),
      lhc::ParseError);
  // Truncated blob.
  const std::string good = ckpt.serialize();
  CHECK_THROWS_AS(Checkpoint::parse(good.substr(0, good.size() - 3)),
                  lhc::ParseError);
  // Entry pointing past the blob.
  CHECK_THROWS_AS(Checkpoint::parse("LHCKPT/1\ntensor = t f64 1 2 8\n"
                                    "blob = 16\n0123456789abcdef"),
                  lhc::ParseError);
  // Malformed tensor line.
  CHECK_THROWS_AS(Checkpoint::parse("LHCKPT/1\ntensor = t f64\nblob = 0\n"),
                  lhc::ParseError);
}

TEST_CASE("checkpoint: model weights round trip by manifest name") {
  lhc::BackboneSpec spec = lhc::build_tiny_spec();
  spec.seed = 4242;
  Model model = Model::init(spec);

  const Checkpoint ckpt = lhc::checkpoint_from_model(model);
  REQUIRE(ckpt.entries().size() == model.manifest().size());
  for (std::size_t i = 0; i < model.manifest().size(); ++i) {
    const lhc::ParamInfo& p = model.manifest()[i];
    CHECK(ckpt.entries()[i].name == p.name);
    CHECK(ckpt.entries()[i].dims == p.shape);
    CHECK(ckpt.entries()[i].precision == Precision::f64);
    CHECK(identical(ckpt.get(p.name), model.param(p.name)));
  }

  // Perturb every parameter, then restore from the checkpoint.
  Model other = Model::init(spec);
  for (const lhc::ParamInfo& p : other.manifest()) {
    Tensor t = other.param(p.name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += 0.5;
    other.set_param(p.name, t);
  }
  lhc::load_into_model(ckpt, other);
  for (const lhc::ParamInfo& p : model.manifest())
    CHECK(identical(other.param(p.name), model.param(p.name)));

  // Missing parameters are an error; unrelated extras are ignored.
  Checkpoint incomplete;
  incomplete.put(model.manifest()[0].name, model.param(model.manifest()[0].name));
  CHECK_THROWS_AS(lhc::load_into_model(incomplete, other), lhc::ConfigError);

  Checkpoint extra = lhc::checkpoint_from_model(model);
  extra.put("unrelated.blob", Tensor({2}, {1.0, 2.0}));
  lhc::load_into_model(extra, other);  // no throw

  // A shape clash is a shape error.
  Checkpoint wrong;
  for (const lhc::ParamInfo& p : model.manifest())
    wrong.put(p.name, p.name == "stem.conv.bias"
                          ? Tensor({1})
                          : model.param(p.name));
  CHECK_THROWS_AS(lhc::load_into_model(wrong, other), lhc::ShapeError);
}
