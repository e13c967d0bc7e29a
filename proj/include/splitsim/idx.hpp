#pragma once

// Reader for the IDX container used by MNIST-style datasets. Header fields are
// big-endian u32: magic (0x00000803 for rank-3 u8 images, 0x00000801 for
// rank-1 u8 labels), then one u32 per dimension, then the raw u8 payload.

#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "splitsim/data.hpp"
#include "splitsim/error.hpp"

namespace splitsim {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot open " + path, 0);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t offset, const char* field) {
  if (offset + 4 > b.size()) throw ParseError(std::string("truncated IDX header: missing ") + field, offset);
  return (std::uint32_t(b[offset]) << 24) | (std::uint32_t(b[offset + 1]) << 16) |
         (std::uint32_t(b[offset + 2]) << 8) | std::uint32_t(b[offset + 3]);
}

}  // namespace detail

/// Images scaled to [0, 1], one flattened row per image.
inline Tensor parse_idx_images(const std::vector<unsigned char>& bytes) {
  const auto magic = detail::read_be32(bytes, 0, "magic");
  if (magic != kIdxImageMagic) throw ParseError("bad IDX image magic " + std::to_string(magic), 0);
  const std::size_t count = detail::read_be32(bytes, 4, "image count");
  const std::size_t rows = detail::read_be32(bytes, 8, "row count");
  const std::size_t cols = detail::read_be32(bytes, 12, "column count");
  if (count == 0 || rows == 0 || cols == 0) throw ParseError("IDX image dimensions must be positive", 4);
  const std::size_t need = 16 + count * rows * cols;
  if (bytes.size() < need) throw ParseError("truncated IDX image payload", bytes.size());
  if (bytes.size() > need) throw ParseError("trailing bytes after IDX image payload", need);
  Tensor x = Tensor::zeros({count, rows * cols});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(bytes[16 + i]) / 255.0;
  return x;
}

inline std::vector<int> parse_idx_labels(const std::vector<unsigned char>& bytes) {
  const auto magic = detail::read_be32(bytes, 0, "magic");
  if (magic != kIdxLabelMagic) throw ParseError("bad IDX label magic " + std::to_string(magic), 0);
  const std::size_t count = detail::read_be32(bytes, 4, "label count");
  const std::size_t need = 8 + count;
  if (bytes.size() < need) throw ParseError("truncated IDX label payload", bytes.size());
  if (bytes.size() > need) throw ParseError("trailing bytes after IDX label payload", need);
  return std::vector<int>(bytes.begin() + 8, bytes.end());
}

inline Tensor load_idx_images(const std::string& path) { return parse_idx_images(detail::read_file(path)); }
inline std::vector<int> load_idx_labels(const std::string& path) { return parse_idx_labels(detail::read_file(path)); }

/// Image and label files paired into a classification dataset.
inline Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path) {
  Tensor x = load_idx_images(images_path);
  std::vector<int> y = load_idx_labels(labels_path);
  if (x.rows() != y.size()) {
    throw ConsistencyError("IDX image count " + std::to_string(x.rows()) + " differs from label count " +
                           std::to_string(y.size()));
  }
  int max_label = 0;
  for (int v : y) max_label = std::max(max_label, v);
  return {std::move(x), Targets::classification(std::move(y)), static_cast<std::size_t>(max_label) + 1};
}

}  // namespace splitsim
