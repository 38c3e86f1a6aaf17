#include "lhc/fer.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>

#include "lhc/errors.hpp"

namespace lhc {
namespace {

constexpr const char* kHeader = "emotion,pixels,Usage";

// Strict base-10 integer parse of a whole token; nullopt on any junk.
std::optional<long> parse_long(const std::string& token) {
  if (token.empty()) return std::nullopt;
  std::size_t pos = 0;
  long value = 0;
  try {
    value = std::stol(token, &pos, 10);
  } catch (const std::exception&) {
    return std::nullopt;
  }
  if (pos != token.size()) return std::nullopt;
  return value;
}

std::vector<std::string> split_fields(const std::string& line, char sep) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

// Parses one data row; returns the failure message, or nullopt on success.
std::optional<std::string> parse_row(const std::string& line,
                                     FerRecord& record) {
  const std::vector<std::string> fields = split_fields(line, ',');
  if (fields.size() != 3)
    return "expected 3 comma-separated fields, got " +
           std::to_string(fields.size());

  const std::optional<long> label = parse_long(fields[0]);
  if (!label) return "emotion label '" + fields[0] + "' is not an integer";
  if (*label < 0 || *label >= kEmotionClasses)
    return "emotion label " + std::to_string(*label) + " outside 0.." +
           std::to_string(kEmotionClasses - 1);

  Split split = Split::training;
  if (fields[2] == "Training") {
    split = Split::training;
  } else if (fields[2] == "PublicTest") {
    split = Split::public_test;
  } else if (fields[2] == "PrivateTest") {
    split = Split::private_test;
  } else {
    return "unknown usage tag '" + fields[2] + "'";
  }

  std::istringstream pixels(fields[1]);
  std::string token;
  int count = 0;
  while (pixels >> token) {
    const std::optional<long> value = parse_long(token);
    if (!value)
      return "pixel " + std::to_string(count) + " ('" + token +
             "') is not an integer";
    if (*value < 0 || *value > 255)
      return "pixel " + std::to_string(count) + " (" +
             std::to_string(*value) + ") outside 0..255";
    if (count < kFerPixels)
      record.pixels[static_cast<std::size_t>(count)] =
          static_cast<std::uint8_t>(*value);
    ++count;
  }
  if (count != kFerPixels)
    return "expected " + std::to_string(kFerPixels) + " pixels, got " +
           std::to_string(count);

  record.label = static_cast<int>(*label);
  record.split = split;
  return std::nullopt;
}

void append_row(std::string& out, const FerRecord& record) {
  out += std::to_string(record.label);
  out += ',';
  for (int i = 0; i < kFerPixels; ++i) {
    if (i > 0) out += ' ';
    out += std::to_string(record.pixels[static_cast<std::size_t>(i)]);
  }
  out += ',';
  out += split_name(record.split);
  out += '\n';
}

}  // namespace

const char* split_name(Split split) {
  switch (split) {
    case Split::training: return "Training";
    case Split::public_test: return "PublicTest";
    case Split::private_test: return "PrivateTest";
  }
  throw ValueError("unknown split");
}

const char* emotion_name(int label) {
  static const char* const names[kEmotionClasses] = {
      "Anger", "Disgust", "Fear", "Happiness",
      "Sadness", "Surprise", "Neutral"};
  if (label < 0 || label >= kEmotionClasses)
    throw ValueError("emotion label " + std::to_string(label) +
                     " outside 0..6");
  return names[label];
}

const std::vector<FerRecord>& FerDataset::split(Split s) const {
  switch (s) {
    case Split::training: return training;
    case Split::public_test: return public_test;
    case Split::private_test: return private_test;
  }
  throw ValueError("unknown split");
}

FerDataset parse_fer_csv(std::istream& in) {
  FerDataset data;
  std::string line;
  std::size_t lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (first) {
      first = false;
      if (line.rfind("emotion,", 0) == 0) continue;  // header row
    }
    if (line.empty()) continue;
    ++data.rows_seen;
    FerRecord record;
    if (const std::optional<std::string> err = parse_row(line, record)) {
      data.issues.push_back({lineno, *err});
      continue;
    }
    switch (record.split) {
      case Split::training: data.training.push_back(record); break;
      case Split::public_test: data.public_test.push_back(record); break;
      case Split::private_test: data.private_test.push_back(record); break;
    }
  }
  return data;
}

std::string serialize_fer_csv(const FerDataset& data) {
  std::string out = kHeader;
  out += '\n';
  // Row width: up to 4 chars per pixel plus label and tag.
  out.reserve(out.size() + 4 * static_cast<std::size_t>(kFerPixels) *
                               (data.training.size() +
                                data.public_test.size() +
                                data.private_test.size()));
  for (const FerRecord& r : data.training) append_row(out, r);
  for (const FerRecord& r : data.public_test) append_row(out, r);
  for (const FerRecord& r : data.private_test) append_row(out, r);
  return out;
}

std::array<std::size_t, kEmotionClasses> class_counts(
    std::span<const FerRecord> records) {
  std::array<std::size_t, kEmotionClasses> counts{};
  for (const FerRecord& r : records) {
    if (r.label < 0 || r.label >= kEmotionClasses)
      throw ValueError("record label " + std::to_string(r.label) +
                       " outside 0..6");
    ++counts[static_cast<std::size_t>(r.label)];
  }
  return counts;
}

Tensor to_tensor(const FerRecord& record) {
  Tensor t({static_cast<std::size_t>(kFerSide),
            static_cast<std::size_t>(kFerSide)});
  for (int i = 0; i < kFerPixels; ++i)
    t[static_cast<std::size_t>(i)] =
        static_cast<double>(record.pixels[static_cast<std::size_t>(i)]);
  return t;
}

Tensor resize_bilinear(const Tensor& img, int out_height, int out_width) {
  if (img.rank() != 2)
    throw ShapeError("resize_bilinear expects a [H,W] tensor, got rank " +
                     std::to_string(img.rank()));
  if (out_height < 1 || out_width < 1)
    throw ValueError("resize_bilinear: output size must be positive");

  const int ih = static_cast<int>(img.dim(0));
  const int iw = static_cast<int>(img.dim(1));
  if (ih == out_height && iw == out_width) return img;

  Tensor out({static_cast<std::size_t>(out_height),
              static_cast<std::size_t>(out_width)});
  const double scale_r = static_cast<double>(ih) / out_height;
  const double scale_c = static_cast<double>(iw) / out_width;
  for (int r = 0; r < out_height; ++r) {
    double src_r = (r + 0.5) * scale_r - 0.5;
    src_r = std::clamp(src_r, 0.0, static_cast<double>(ih - 1));
    const int r0 = static_cast<int>(std::floor(src_r));
    const int r1 = std::min(r0 + 1, ih - 1);
    const double fr = src_r - r0;
    for (int c = 0; c < out_width; ++c) {
      double src_c = (c + 0.5) * scale_c - 0.5;
      src_c = std::clamp(src_c, 0.0, static_cast<double>(iw - 1));
      const int c0 = static_cast<int>(std::floor(src_c));
      const int c1 = std::min(c0 + 1, iw - 1);
      const double fc = src_c - c0;

      const double v00 = img.at(static_cast<std::size_t>(r0),
                                static_cast<std::size_t>(c0));
      const double v01 = img.at(static_cast<std::size_t>(r0),
                                static_cast<std::size_t>(c1));
      const double v10 = img.at(static_cast<std::size_t>(r1),
                                static_cast<std::size_t>(c0));
      const double v11 = img.at(static_cast<std::size_t>(r1),
                                static_cast<std::size_t>(c1));
      // Lerp form keeps constant regions exactly constant; the final clamp
      // pins down the convexity guarantee against one-ulp overshoot.
      const double top = v00 + fc * (v01 - v00);
      const double bot = v10 + fc * (v11 - v10);
      const double value = top + fr * (bot - top);
      const double lo = std::min(std::min(v00, v01), std::min(v10, v11));
      const double hi = std::max(std::max(v00, v01), std::max(v10, v11));
      out.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) =
          std::clamp(value, lo, hi);
    }
  }
  return out;
}

Tensor gray_to_rgb(const Tensor& img) {
  if (img.rank() != 2)
    throw ShapeError("gray_to_rgb expects a [H,W] tensor, got rank " +
                     std::to_string(img.rank()));
  const std::size_t h = img.dim(0);
  const std::size_t w = img.dim(1);
  Tensor out({h, w, 3});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double v = img.at(r, c);
      out.at(r, c, 0) = v;
      out.at(r, c, 1) = v;
      out.at(r, c, 2) = v;
    }
  return out;
}

Tensor quantize_truncate(const Tensor& img) {
  Tensor out(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = img[i];
    if (v < 0.0)
      throw ValueError("quantize_truncate: negative intensity " +
                       std::to_string(v));
    out[i] = std::min(std::floor(v), 255.0);
  }
  return out;
}

}  // namespace lhc
