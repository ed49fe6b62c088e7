#include "adatsc/selfexpr.hpp"

#include <cmath>

namespace adatsc::selfexpr {

using namespace adatsc::ad;

double shrink(double x, double theta) {
  const double m = std::abs(x) - theta;
  return m > 0 ? std::copysign(m, x) : 0.0;
}

template <typename T>
Var<T> effective_coeff(const Var<T>& c_raw, const SEConfig& cfg) {
  const std::int64_t n = c_raw.dim(-1);
  if (c_raw.dim(-2) != n) throw ShapeError("coefficient matrix must be square, got " + to_string(c_raw.shape()));
  auto c = ad::shrink(c_raw, static_cast<T>(cfg.threshold));
  if (!cfg.exclude_self) return c;
  Tensor<T> mask(Shape{n, n}, T(1));
  for (std::int64_t i = 0; i < n; ++i) mask[i * n + i] = T(0);
  return mul(c, Var<T>::constant(std::move(mask)));
}

template <typename T>
Var<T> affinity_weights(const Var<T>& q_tilde, double sigma_t) {
  if (!(sigma_t > 0)) throw std::invalid_argument("sigma_t must be positive");
  const bool batched = q_tilde.rank() == 3;
  auto q = batched ? q_tilde : reshape(q_tilde, Shape{1, q_tilde.dim(0), q_tilde.dim(1)});
  const std::int64_t n = q.dim(1);
  Tensor<T> prox(Shape{n, n});
  for (std::int64_t t = 0; t < n; ++t)
    for (std::int64_t s = 0; s < n; ++s)
      prox[t * n + s] = static_cast<T>(std::exp(-std::abs(static_cast<double>(t - s)) / sigma_t));
  auto w = mul(bmm(q, q, false, true), Var<T>::constant(std::move(prox)));
  return batched ? w : reshape(w, Shape{n, n});
}

template <typename T>
Var<T> se_reconstruct(const Var<T>& c, const Var<T>& z) {
  if (c.rank() == 2 && z.rank() == 2) {
    if (c.dim(1) != z.dim(0)) throw ShapeError("se_reconstruct: " + to_string(c.shape()) + " x " + to_string(z.shape()));
    return matmul(c, z);
  }
  if (c.rank() == 3 && z.rank() == 3) return bmm(c, z);
  throw ShapeError("se_reconstruct: " + to_string(c.shape()) + " x " + to_string(z.shape()));
}

template <typename T>
Var<T> se_loss(const Var<T>& z, const Var<T>& c, const Var<T>& w, double sparsity) {
  if (c.shape() != w.shape()) throw ShapeError("se_loss: weights must match C");
  auto fit = sum(square(sub(z, se_reconstruct(c, z))));
  if (sparsity == 0.0) return fit;
  auto l1 = sum(mul(add_scalar(neg(w), T(1)), abs(c)));
  return add(fit, scale(l1, static_cast<T>(sparsity)));
}

MatD build_affinity(const MatD& c) {
  if (c.rows() != c.cols()) throw ShapeError("build_affinity: C must be square");
  return c.cwiseAbs() + c.transpose().cwiseAbs();
}

Refined spectral_refine(const MatD& a, int K, std::uint64_t seed, const std::vector<int>& fallback_labels) {
  const Eigen::Index n = a.rows();
  if (a.cols() != n) throw ShapeError("spectral_refine: affinity must be square");
  if (n < K) throw std::invalid_argument("spectral_refine needs at least K time steps");
  Refined out;
  if (a.cwiseAbs().maxCoeff() == 0.0) {
    if (static_cast<Eigen::Index>(fallback_labels.size()) != n)
      throw std::invalid_argument("spectral_refine: fallback labels have the wrong length");
    out.labels = fallback_labels;
    out.fallback = true;
    return out;
  }
  const VecD deg = a.rowwise().sum();
  VecD dinv(n);
  for (Eigen::Index i = 0; i < n; ++i) dinv[i] = deg[i] > 0 ? 1.0 / std::sqrt(deg[i]) : 0.0;
  MatD lap = MatD::Identity(n, n) - dinv.asDiagonal() * a * dinv.asDiagonal();
  lap = 0.5 * (lap + lap.transpose());
  Eigen::SelfAdjointEigenSolver<MatD> eig(lap);
  MatD emb = eig.eigenvectors().leftCols(K);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = emb.row(i).norm();
    if (norm > 0) emb.row(i) /= norm;
  }
  out.labels = kmeans(emb, K, 10, seed).labels;
  return out;
}

#define ADATSC_INSTANTIATE_SELFEXPR(T)                                  \
  template Var<T> effective_coeff(const Var<T>&, const SEConfig&);      \
  template Var<T> affinity_weights(const Var<T>&, double);              \
  template Var<T> se_reconstruct(const Var<T>&, const Var<T>&);         \
  template Var<T> se_loss(const Var<T>&, const Var<T>&, const Var<T>&, double);

ADATSC_INSTANTIATE_SELFEXPR(float)
ADATSC_INSTANTIATE_SELFEXPR(double)

}  // namespace adatsc::selfexpr
