#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "adatsc/rng.hpp"

namespace adatsc {

using MatD = Eigen::MatrixXd;
using VecD = Eigen::VectorXd;

struct KMeansResult {
  std::vector<int> labels;
  MatD centers;  // (K, d)
  double sse = 0.0;
};

// Lloyd's algorithm with k-means++ seeding; the best of `restarts` runs by
// SSE wins. Rows of `points` are samples. Ties in assignment go to the
// smaller cluster index.
KMeansResult kmeans(const MatD& points, int k, int restarts, std::uint64_t seed, int max_iter = 300);

// Random (d, r) matrix with orthonormal columns (QR of a Gaussian, sign-fixed).
MatD random_orthonormal(int d, int r, Rng& rng);

// Principal angles between the column spaces of two orthonormal bases, in
// degrees, ascending.
std::vector<double> principal_angles_deg(const MatD& u, const MatD& v);

}  // namespace adatsc
