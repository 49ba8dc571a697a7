#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

namespace kbo {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Binary containers. Both share the header scheme:
//   magic (4 bytes), version u32, count u32, dims..., payload of row-major
//   little-endian float64. Integers are u32 little-endian.
//
// "KFAC": per-layer factor pairs. count = layer count; per layer
//         (d1 u32, d2 u32), payload per layer = B (d1 x d1) then A (d2 x d2).
// "KTNS": named flat tensors. count = tensor count; per tensor
//         (rows u32, cols u32), payload = row-major matrix.

struct FactorPair {
  Mat a;  // d2 x d2 input covariance
  Mat b;  // d1 x d1 output-curvature covariance
};

void write_factor_dump(const std::string& path, const std::vector<FactorPair>& layers);
std::vector<FactorPair> read_factor_dump(const std::string& path);

void write_tensors(const std::string& path, const std::vector<Mat>& tensors);
std::vector<Mat> read_tensors(const std::string& path);

}  // namespace kbo
