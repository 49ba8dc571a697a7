#pragma once

#include <string>

#include "kbo/nn.hpp"

namespace kbo {

/// Image/label pair loaded from IDX files (big-endian, magic 0x00000803 for
/// images and 0x00000801 for labels). Pixels normalized to [0,1] doubles and
/// flattened one image per row.
struct IdxDataset {
  Mat images;    // N x (rows*cols)
  IntVec labels; // N
  int rows = 0;
  int cols = 0;
};

IdxDataset load_idx(const std::string& images_path, const std::string& labels_path);

}  // namespace kbo
