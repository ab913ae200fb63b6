#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <vector>

#include "kamal/core/error.hpp"
#include "kamal/data/dataset.hpp"
#include "kamal/nets/checkpoint.hpp"

namespace kamal {

namespace detail {

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t at, const char* what) {
  require<IoError>(at + 4 <= b.size(), "IDX file truncated in ", what);
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// Parses an IDX image file (u8, dims N,H,W) and its label file (u8, dim N).
// Pixels are scaled by 1/255; images get a single channel.
inline LabeledSet parse_idx(const std::vector<unsigned char>& img, const std::vector<unsigned char>& lab) {
  const std::uint32_t im = detail::read_be32(img, 0, "image header");
  require<IoError>(im == kIdxImagesMagic, "bad magic in IDX image file: 0x", std::hex, im);
  const std::uint32_t lm = detail::read_be32(lab, 0, "label header");
  require<IoError>(lm == kIdxLabelsMagic, "bad magic in IDX label file: 0x", std::hex, lm);
  const std::size_t n = detail::read_be32(img, 4, "image header");
  const std::size_t h = detail::read_be32(img, 8, "image header");
  const std::size_t w = detail::read_be32(img, 12, "image header");
  const std::size_t nl = detail::read_be32(lab, 4, "label header");
  require<IoError>(n == nl, "count mismatch: ", n, " images vs ", nl, " labels");
  require<IoError>(n >= 1 && h >= 1 && w >= 1, "IDX file has an empty dimension");
  require<IoError>(img.size() >= 16 + n * h * w, "IDX image file truncated: expected ", 16 + n * h * w, " bytes, got ",
                   img.size());
  require<IoError>(lab.size() >= 8 + n, "IDX label file truncated: expected ", 8 + n, " bytes, got ", lab.size());
  LabeledSet set;
  set.images = Tensor({n, 1, h, w});
  for (std::size_t i = 0; i < n * h * w; ++i) set.images[i] = static_cast<float>(img[16 + i]) / 255.0f;
  std::set<int> classes;
  for (std::size_t i = 0; i < n; ++i) {
    set.labels.push_back(lab[8 + i]);
    classes.insert(lab[8 + i]);
  }
  set.class_ids.assign(classes.begin(), classes.end());
  return set;
}

inline LabeledSet load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  return parse_idx(read_file_bytes(images_path), read_file_bytes(labels_path));
}

}  // namespace kamal
