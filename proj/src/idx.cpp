#include "kbo/idx.hpp"

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace kbo {

namespace {

std::uint32_t read_be_u32(std::ifstream& f, const std::string& what) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f) throw std::runtime_error("load_idx: truncated file reading " + what);
  return (static_cast<std::uint32_t>(b[0]) << 24) |
         (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) |
         static_cast<std::uint32_t>(b[3]);
}

}  // namespace

IdxDataset load_idx(const std::string& images_path,
                    const std::string& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw std::runtime_error("load_idx: cannot open " + images_path);
  if (read_be_u32(fi, "image magic") != 0x00000803u)
    throw std::runtime_error("load_idx: bad image magic in " + images_path);
  const std::uint32_t n_images = read_be_u32(fi, "image count");
  const std::uint32_t rows = read_be_u32(fi, "rows");
  const std::uint32_t cols = read_be_u32(fi, "cols");

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw std::runtime_error("load_idx: cannot open " + labels_path);
  if (read_be_u32(fl, "label magic") != 0x00000801u)
    throw std::runtime_error("load_idx: bad label magic in " + labels_path);
  const std::uint32_t n_labels = read_be_u32(fl, "label count");
  if (n_labels != n_images)
    throw std::runtime_error("load_idx: image count " + std::to_string(n_images) +
                             " != label count " + std::to_string(n_labels));

  IdxDataset ds;
  ds.rows = static_cast<int>(rows);
  ds.cols = static_cast<int>(cols);
  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  ds.images.resize(n_images, static_cast<Eigen::Index>(pixels));
  std::vector<unsigned char> buf(pixels);
  for (std::uint32_t i = 0; i < n_images; ++i) {
    fi.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(pixels));
    if (!fi)
      throw std::runtime_error("load_idx: truncated pixel data at image " +
                               std::to_string(i));
    for (std::size_t p = 0; p < pixels; ++p)
      ds.images(i, static_cast<Eigen::Index>(p)) = buf[p] / 255.0;
  }

  ds.labels.resize(n_labels);
  for (std::uint32_t i = 0; i < n_labels; ++i) {
    unsigned char b;
    fl.read(reinterpret_cast<char*>(&b), 1);
    if (!fl)
      throw std::runtime_error("load_idx: truncated label data at " +
                               std::to_string(i));
    ds.labels[i] = static_cast<int>(b);
  }
  return ds;
}

}  // namespace kbo
