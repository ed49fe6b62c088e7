#include "adatsc/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace adatsc {

namespace {

double sq_dist(const MatD& a, Eigen::Index i, const MatD& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

KMeansResult lloyd(const MatD& x, int k, Rng& rng, int max_iter) {
  const Eigen::Index n = x.rows();
  MatD centers(k, x.cols());
  // k-means++ seeding
  centers.row(0) = x.row(rng.below(n));
  VecD d2(n);
  for (Eigen::Index i = 0; i < n; ++i) d2[i] = sq_dist(x, i, centers, 0);
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0) {
      double r = rng.uniform() * total;
      for (pick = 0; pick < n - 1; ++pick) {
        r -= d2[pick];
        if (r < 0) break;
      }
    } else {
      pick = rng.below(n);
    }
    centers.row(c) = x.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(x, i, centers, c));
  }

  std::vector<int> labels(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double bd = sq_dist(x, i, centers, 0);
      for (int c = 1; c < k; ++c) {
        const double d = sq_dist(x, i, centers, c);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (labels[i] != best) {
        labels[i] = best;
        changed = true;
      }
    }
    MatD sums = MatD::Zero(k, x.cols());
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(labels[i]) += x.row(i);
      ++counts[labels[i]];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        centers.row(c) = sums.row(c) / static_cast<double>(counts[c]);
        continue;
      }
      // Empty cluster: move it to the point farthest from its center.
      Eigen::Index far = 0;
      double fd = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double d = sq_dist(x, i, centers, labels[i]);
        if (d > fd) {
          fd = d;
          far = i;
        }
      }
      centers.row(c) = x.row(far);
      labels[far] = c;
      changed = true;
    }
    if (!changed) break;
  }
  KMeansResult res;
  res.labels = std::move(labels);
  res.centers = std::move(centers);
  for (Eigen::Index i = 0; i < n; ++i) res.sse += sq_dist(x, i, res.centers, res.labels[i]);
  return res;
}

}  // namespace

KMeansResult kmeans(const MatD& points, int k, int restarts, std::uint64_t seed, int max_iter) {
  if (k < 1 || points.rows() < k) throw std::invalid_argument("kmeans: need at least k points");
  Rng rng(seed);
  KMeansResult best;
  best.sse = std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(restarts, 1); ++r) {
    KMeansResult res = lloyd(points, k, rng, max_iter);
    if (res.sse < best.sse) best = std::move(res);
  }
  return best;
}

MatD random_orthonormal(int d, int r, Rng& rng) {
  if (r > d) throw std::invalid_argument("random_orthonormal: r > d");
  MatD g(d, r);
  for (int j = 0; j < r; ++j)
    for (int i = 0; i < d; ++i) g(i, j) = rng.normal();
  Eigen::HouseholderQR<MatD> qr(g);
  MatD q = qr.householderQ() * MatD::Identity(d, r);
  const MatD rr = qr.matrixQR().topRows(r).triangularView<Eigen::Upper>();
  for (int j = 0; j < r; ++j)
    if (rr(j, j) < 0) q.col(j) = -q.col(j);
  return q;
}

std::vector<double> principal_angles_deg(const MatD& u, const MatD& v) {
  Eigen::JacobiSVD<MatD> svd(u.transpose() * v);
  const VecD s = svd.singularValues();
  std::vector<double> out;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    out.push_back(std::acos(std::clamp(s[i], -1.0, 1.0)) * 180.0 / std::numbers::pi);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace adatsc
