#include "adatsc/subgan.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace adatsc::subgan {

using namespace adatsc::ad;

template <typename T>
SubspaceBank<T> SubspaceBank<T>::create(ParamStore<T>& ps, const std::string& prefix, int K, int D, int r, Rng& rng) {
  if (r < 1 || r >= D) throw ShapeError("subspace rank must satisfy 1 <= r < D");
  SubspaceBank bank;
  for (int k = 0; k < K; ++k) {
    const MatD q = random_orthonormal(D, r, rng);
    Tensor<T> u(Shape{D, r});
    for (int i = 0; i < D; ++i)
      for (int j = 0; j < r; ++j) u[i * r + j] = static_cast<T>(q(i, j));
    bank.bases.push_back(ps.add(prefix + ".U" + std::to_string(k), std::move(u)));
  }
  return bank;
}

template <typename T>
std::vector<RealSet> select_real_latents(const Tensor<T>& q_tilde, int per_cluster, double min_responsibility) {
  if (per_cluster < 1) throw std::invalid_argument("reals per cluster must be >= 1");
  const std::int64_t K = q_tilde.dim(-1), n = q_tilde.size() / K;
  std::vector<RealSet> out;
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t k = 0; k < K; ++k) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::int64_t a, std::int64_t b) { return q_tilde[a * K + k] > q_tilde[b * K + k]; });
    std::int64_t candidates = 0;
    for (std::int64_t i = 0; i < n; ++i)
      if (q_tilde[i * K + k] > min_responsibility) ++candidates;
    // A single candidate cannot be mixed into a fake.
    if (candidates < 2) continue;
    RealSet rs;
    rs.cluster = static_cast<int>(k);
    for (std::int64_t i = 0; i < n && static_cast<int>(rs.index.size()) < per_cluster; ++i) {
      const double v = q_tilde[order[i] * K + k];
      if (!(v > min_responsibility)) break;
      rs.index.push_back(order[i]);
      rs.responsibility.push_back(v);
    }
    out.push_back(std::move(rs));
  }
  return out;
}

Tensor<double> mixing_weights(const std::vector<double>& responsibility, int count, Rng& rng) {
  const std::int64_t m = static_cast<std::int64_t>(responsibility.size());
  if (m < 1 || count < 1) throw std::invalid_argument("mixing_weights needs reals and a positive count");
  Tensor<double> w(Shape{count, m});
  for (std::int64_t i = 0; i < count; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < m; ++j) {
      const double a = 1.0 - rng.uniform();  // (0, 1]
      w[i * m + j] = a * responsibility[j];
      s += w[i * m + j];
    }
    if (!(s > 0)) throw std::invalid_argument("mixing_weights: responsibilities sum to zero");
    for (std::int64_t j = 0; j < m; ++j) w[i * m + j] /= s;
  }
  return w;
}

template <typename T>
Var<T> synth_fake_latents(const Var<T>& reals, const Tensor<double>& weights) {
  if (reals.rank() != 2 || weights.rank() != 2 || weights.dim(1) != reals.dim(0))
    throw ShapeError("synth_fake_latents: weights " + to_string(weights.shape()) + " for reals " +
                     to_string(reals.shape()));
  return matmul(Var<T>::constant(weights.cast<T>()), reals);
}

template <typename T>
Var<T> subspace_energy(const Var<T>& z, const Var<T>& basis) {
  if (z.rank() != 2 || basis.rank() != 2 || z.dim(1) != basis.dim(0))
    throw ShapeError("subspace_energy: z " + to_string(z.shape()) + " basis " + to_string(basis.shape()));
  auto coords = matmul(z, basis);                                  // (n, r)
  auto residual = sub(z, matmul(coords, basis, false, true));       // z - U U^T z
  return sum_axis(square(residual), 1);
}

template <typename T>
Var<T> orthogonality_penalty(const SubspaceBank<T>& bank) {
  std::vector<Var<T>> terms;
  for (const auto& u : bank.bases) {
    const std::int64_t r = u.dim(1);
    Tensor<T> eye(Shape{r, r});
    for (std::int64_t i = 0; i < r; ++i) eye[i * r + i] = T(1);
    terms.push_back(sum(square(sub(matmul(u, u, true, false), Var<T>::constant(std::move(eye))))));
  }
  return sum(stack(terms, 0));
}

template <typename T>
Var<T> cross_penalty(const SubspaceBank<T>& bank) {
  std::vector<Var<T>> terms;
  for (int i = 0; i < bank.K(); ++i)
    for (int j = 0; j < bank.K(); ++j)
      if (i != j) terms.push_back(sum(square(matmul(bank.bases[i], bank.bases[j], true, false))));
  if (terms.empty()) return Var<T>::constant(Tensor<T>::scalar(T(0)));
  return sum(stack(terms, 0));
}

template <typename T>
LossResult<T> discriminator_loss(const std::vector<ClusterBatch<T>>& batches, const SubspaceBank<T>& bank,
                                 const SubGanConfig& cfg) {
  std::vector<Var<T>> hinges;
  for (const auto& b : batches) {
    if (!b.reals.defined() || !b.fakes.defined() || b.reals.dim(0) == 0 || b.fakes.dim(0) == 0) continue;
    const auto& u = bank.bases.at(b.cluster);
    auto fake_mean = mean(subspace_energy(b.fakes, u));
    auto gap = add_scalar(sub(subspace_energy(b.reals, u), fake_mean), static_cast<T>(cfg.margin));
    hinges.push_back(relu(gap));
  }
  LossResult<T> res;
  if (hinges.empty()) {
    res.loss = Var<T>::constant(Tensor<T>::scalar(T(0)));
    res.skipped = true;
    return res;
  }
  auto hinge = mean(concat(hinges, 0));
  res.loss = add(hinge, add(scale(orthogonality_penalty(bank), static_cast<T>(cfg.ortho_weight)),
                            scale(cross_penalty(bank), static_cast<T>(cfg.cross_weight))));
  return res;
}

template <typename T>
LossResult<T> generator_adv_loss(const std::vector<ClusterBatch<T>>& batches, const SubspaceBank<T>& bank) {
  std::vector<Var<T>> energies;
  for (const auto& b : batches) {
    if (!b.fakes.defined() || b.fakes.dim(0) == 0) continue;
    energies.push_back(subspace_energy(b.fakes, bank.bases.at(b.cluster).detach()));
  }
  LossResult<T> res;
  if (energies.empty()) {
    res.loss = Var<T>::constant(Tensor<T>::scalar(T(0)));
    res.skipped = true;
    return res;
  }
  res.loss = mean(concat(energies, 0));
  return res;
}

BasisFit fit_subspace_basis(const MatD& points, int r) {
  const Eigen::Index D = points.cols();
  if (r < 1 || r > D) throw std::invalid_argument("fit_subspace_basis: need 1 <= r <= D");
  if (points.rows() < r) throw std::invalid_argument("fit_subspace_basis: need at least r points");
  Eigen::JacobiSVD<MatD> svd(points.transpose(), Eigen::ComputeFullU);
  const VecD s = svd.singularValues();
  BasisFit fit;
  fit.basis = svd.matrixU().leftCols(r);
  const double tol = (s.size() ? s[0] : 0.0) * 1e-12 * static_cast<double>(std::max(points.rows(), D));
  for (int j = 0; j < r; ++j)
    if (j >= s.size() || s[j] <= tol) fit.degenerate = true;
  // Deterministic sign: largest-magnitude entry of each column positive.
  for (int j = 0; j < r; ++j) {
    Eigen::Index arg;
    fit.basis.col(j).cwiseAbs().maxCoeff(&arg);
    if (fit.basis(arg, j) < 0) fit.basis.col(j) = -fit.basis.col(j);
  }
  return fit;
}

double subspace_error(const MatD& points, const std::vector<MatD>& bases) {
  if (bases.empty()) throw std::invalid_argument("subspace_error needs at least one basis");
  double total = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const VecD z = points.row(i).transpose();
    double best = std::numeric_limits<double>::infinity();
    for (const auto& u : bases) best = std::min(best, (z - u * (u.transpose() * z)).norm());
    total += best;
  }
  return total;
}

template <typename T>
std::vector<Diagnostics> diagnostics(const std::vector<ClusterBatch<T>>& batches, const SubspaceBank<T>& bank) {
  NoGradGuard guard;
  std::vector<Diagnostics> out;
  for (int k = 0; k < bank.K(); ++k) {
    Diagnostics d;
    d.cluster = k;
    const auto& u = bank.bases[k];
    const std::int64_t r = u.dim(1);
    auto gram = matmul(u, u, true, false).value();
    double e = 0.0;
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < r; ++j) {
        const double v = gram[i * r + j] - (i == j ? 1.0 : 0.0);
        e += v * v;
      }
    d.ortho_err = std::sqrt(e);
    for (int j = 0; j < bank.K(); ++j)
      if (j != k) {
        auto cross = matmul(u, bank.bases[j], true, false).value();
        for (T v : cross.values()) d.cross_err += static_cast<double>(v) * v;
      }
    for (const auto& b : batches) {
      if (b.cluster != k) continue;
      if (b.reals.defined()) d.mean_real_energy = static_cast<double>(mean(subspace_energy(b.reals, u)).item());
      if (b.fakes.defined()) d.mean_fake_energy = static_cast<double>(mean(subspace_energy(b.fakes, u)).item());
    }
    out.push_back(d);
  }
  return out;
}

#define ADATSC_INSTANTIATE_SUBGAN(T)                                                                         \
  template struct SubspaceBank<T>;                                                                           \
  template std::vector<RealSet> select_real_latents(const Tensor<T>&, int, double);                          \
  template Var<T> synth_fake_latents(const Var<T>&, const Tensor<double>&);                                  \
  template Var<T> subspace_energy(const Var<T>&, const Var<T>&);                                             \
  template Var<T> orthogonality_penalty(const SubspaceBank<T>&);                                             \
  template Var<T> cross_penalty(const SubspaceBank<T>&);                                                     \
  template LossResult<T> discriminator_loss(const std::vector<ClusterBatch<T>>&, const SubspaceBank<T>&,     \
                                            const SubGanConfig&);                                            \
  template LossResult<T> generator_adv_loss(const std::vector<ClusterBatch<T>>&, const SubspaceBank<T>&);    \
  template std::vector<Diagnostics> diagnostics(const std::vector<ClusterBatch<T>>&, const SubspaceBank<T>&);

ADATSC_INSTANTIATE_SUBGAN(float)
ADATSC_INSTANTIATE_SUBGAN(double)

}  // namespace adatsc::subgan
