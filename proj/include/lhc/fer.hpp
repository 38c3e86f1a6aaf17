#pragma once

#include <array>
#include <cstdint>
#include <istream>
#include <span>
#include <string>
#include <vector>

#include "lhc/tensor.hpp"

namespace lhc {

enum class Split { training, public_test, private_test };

// The usage tag exactly as it appears in the CSV.
const char* split_name(Split split);

// Class id -> display name, 0..6.
const char* emotion_name(int label);

inline constexpr int kEmotionClasses = 7;
inline constexpr int kFerSide = 48;
inline constexpr int kFerPixels = kFerSide * kFerSide;

// One labelled 48x48 grayscale face, straight from the CSV.
struct FerRecord {
  int label = 0;  // 0..6
  std::array<std::uint8_t, kFerPixels> pixels{};  // row-major
  Split split = Split::training;
};

// A rejected CSV row: 1-based line number plus what was wrong with it.
struct ParseIssue {
  std::size_t row = 0;
  std::string message;
};

struct FerDataset {
  std::vector<FerRecord> training;
  std::vector<FerRecord> public_test;
  std::vector<FerRecord> private_test;
  std::vector<ParseIssue> issues;
  std::size_t rows_seen = 0;  // data rows, header excluded

  const std::vector<FerRecord>& split(Split s) const;
};

// Reads "emotion,pixels,Usage" rows (header line optional). Malformed rows
// (wrong field count, bad label, pixel count != 2304, out-of-range pixel,
// unknown usage tag) are rejected into `issues` with their line numbers;
// well-formed rows around them are kept.
FerDataset parse_fer_csv(std::istream& in);

// The exact inverse of parse_fer_csv for well-formed data: header plus one
// row per record (training, then public test, then private test).
std::string serialize_fer_csv(const FerDataset& data);

// Per-class histogram.
std::array<std::size_t, kEmotionClasses> class_counts(
    std::span<const FerRecord> records);

// [48,48] tensor of intensities 0..255.
Tensor to_tensor(const FerRecord& record);

// Bilinear resample of a [H,W] tensor under the half-pixel-center
// convention: src = (dst + 0.5) * (in/out) - 0.5, clamped to the grid.
// Output values never leave [min(img), max(img)].
Tensor resize_bilinear(const Tensor& img, int out_height, int out_width);

// [H,W] -> [H,W,3] by channel replication.
Tensor gray_to_rgb(const Tensor& img);

// Element-wise truncation toward zero, clamped to [0,255]. Values must be
// nonnegative: a negative input means an upstream bug, so it throws
// ValueError instead of clamping silently.
Tensor quantize_truncate(const Tensor& img);

}  // namespace lhc
