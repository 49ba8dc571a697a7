#include "kbo/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace kbo {

namespace {

constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "container writers assume a little-endian host");

void put_u32(std::ofstream& f, std::uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::ifstream& f, const std::string& what) {
  std::uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 4);
  if (!f) throw std::runtime_error("tensor_io: truncated file reading " + what);
  return v;
}

void put_mat(std::ofstream& f, const Mat& m) {
  // row-major payload
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      double v = m(r, c);
      f.write(reinterpret_cast<const char*>(&v), 8);
    }
}

Mat get_mat(std::ifstream& f, std::uint32_t rows, std::uint32_t cols) {
  Mat m(rows, cols);
  for (std::uint32_t r = 0; r < rows; ++r)
    for (std::uint32_t c = 0; c < cols; ++c) {
      double v = 0;
      f.read(reinterpret_cast<char*>(&v), 8);
      if (!f) throw std::runtime_error("tensor_io: truncated payload");
      m(r, c) = v;
    }
  return m;
}

void check_magic(std::ifstream& f, const char expect[4], const std::string& path) {
  char magic[4] = {};
  f.read(magic, 4);
  if (!f || std::memcmp(magic, expect, 4) != 0)
    throw std::runtime_error("tensor_io: bad magic in " + path);
}

}  // namespace

void write_factor_dump(const std::string& path, const std::vector<FactorPair>& layers) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("tensor_io: cannot open " + path);
  f.write("KFAC", 4);
  put_u32(f, kVersion);
  put_u32(f, static_cast<std::uint32_t>(layers.size()));
  for (const auto& l : layers) {
    put_u32(f, static_cast<std::uint32_t>(l.b.rows()));
    put_u32(f, static_cast<std::uint32_t>(l.a.rows()));
  }
  for (const auto& l : layers) {
    put_mat(f, l.b);
    put_mat(f, l.a);
  }
  if (!f) throw std::runtime_error("tensor_io: write failed for " + path);
}

std::vector<FactorPair> read_factor_dump(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("tensor_io: cannot open " + path);
  check_magic(f, "KFAC", path);
  const auto version = get_u32(f, "version");
  if (version != kVersion)
    throw std::runtime_error("tensor_io: unsupported version in " + path);
  const auto count = get_u32(f, "layer count");
  std::vector<std::pair<std::uint32_t, std::uint32_t>> dims(count);
  for (auto& d : dims) {
    d.first = get_u32(f, "d1");
    d.second = get_u32(f, "d2");
  }
  std::vector<FactorPair> out(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    out[i].b = get_mat(f, dims[i].first, dims[i].first);
    out[i].a = get_mat(f, dims[i].second, dims[i].second);
  }
  return out;
}

void write_tensors(const std::string& path, const std::vector<Mat>& tensors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("tensor_io: cannot open " + path);
  f.write("KTNS", 4);
  put_u32(f, kVersion);
  put_u32(f, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_u32(f, static_cast<std::uint32_t>(t.rows()));
    put_u32(f, static_cast<std::uint32_t>(t.cols()));
  }
  for (const auto& t : tensors) put_mat(f, t);
  if (!f) throw std::runtime_error("tensor_io: write failed for " + path);
}

std::vector<Mat> read_tensors(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("tensor_io: cannot open " + path);
  check_magic(f, "KTNS", path);
  const auto version = get_u32(f, "version");
  if (version != kVersion)
    throw std::runtime_error("tensor_io: unsupported version in " + path);
  const auto count = get_u32(f, "tensor count");
  std::vector<std::pair<std::uint32_t, std::uint32_t>> dims(count);
  for (auto& d : dims) {
    d.first = get_u32(f, "rows");
    d.second = get_u32(f, "cols");
  }
  std::vector<Mat> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i)
    out.push_back(get_mat(f, dims[i].first, dims[i].second));
  return out;
}

}  // namespace kbo
