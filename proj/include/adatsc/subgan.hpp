#pragma once

#include <string>
#include <vector>

#include "adatsc/linalg.hpp"
#include "adatsc/ops.hpp"
#include "adatsc/params.hpp"

// Real/fake latent sampling and the projection-residual subspace discriminator.
namespace adatsc::subgan {

using ad::Var;

struct SubGanConfig {
  int rank = 8;
  double margin = 1.0;
  double ortho_weight = 1.0;   // on sum_k |U_k^T U_k - I|_F^2
  double cross_weight = 0.1;   // on sum_{i != j} |U_i^T U_j|_F^2
  int reals_per_cluster = 16;
  double min_responsibility = 0.0;  // candidates need a responsibility above this
};

template <typename T>
struct SubspaceBank {
  std::vector<Var<T>> bases;  // K of (D, r)

  static SubspaceBank create(ParamStore<T>& ps, const std::string& prefix, int K, int D, int r, Rng& rng);
  int K() const { return static_cast<int>(bases.size()); }
};

struct RealSet {
  int cluster = 0;
  std::vector<std::int64_t> index;     // flat (b*T + t) rows of z
  std::vector<double> responsibility;  // q_tilde of those rows for this cluster
};

// Top-m rows of each column of q_tilde (n, K); ties go to the lower row.
// Clusters with fewer than 2 rows above min_responsibility are left out.
template <typename T>
std::vector<RealSet> select_real_latents(const Tensor<T>& q_tilde, int per_cluster, double min_responsibility = 0.0);

// count x |reals| mixing matrix: uniform (0,1] draws scaled by responsibility, rows summing to 1.
Tensor<double> mixing_weights(const std::vector<double>& responsibility, int count, Rng& rng);

// Convex combinations of reals (m, D) with fixed weights (count, m).
template <typename T>
Var<T> synth_fake_latents(const Var<T>& reals, const Tensor<double>& weights);

// |z - U U^T z|^2 per row: z (n, D) -> (n).
template <typename T>
Var<T> subspace_energy(const Var<T>& z, const Var<T>& basis);

template <typename T>
struct ClusterBatch {
  int cluster = 0;
  Var<T> reals;  // (m, D)
  Var<T> fakes;  // (count, D)
};

template <typename T>
struct LossResult {
  Var<T> loss;
  bool skipped = false;
};

template <typename T>
Var<T> orthogonality_penalty(const SubspaceBank<T>& bank);
template <typename T>
Var<T> cross_penalty(const SubspaceBank<T>& bank);

// Mean hinge over all reals of max(0, E_real - mean E_fake + margin) plus both penalties.
template <typename T>
LossResult<T> discriminator_loss(const std::vector<ClusterBatch<T>>& batches, const SubspaceBank<T>& bank,
                                 const SubGanConfig& cfg);

// Mean fake energy against each fake's own basis.
template <typename T>
LossResult<T> generator_adv_loss(const std::vector<ClusterBatch<T>>& batches, const SubspaceBank<T>& bank);

struct BasisFit {
  MatD basis;  // (D, r), orthonormal columns
  bool degenerate = false;
};
// Top-r left singular vectors of the (uncentred) points, rows are points.
BasisFit fit_subspace_basis(const MatD& points, int r);

// Sum over rows of min_j sqrt(E(row; bases[j])).
double subspace_error(const MatD& points, const std::vector<MatD>& bases);

struct Diagnostics {
  int cluster = 0;
  double ortho_err = 0.0;  // |U^T U - I|_F
  double cross_err = 0.0;  // sum_{j != k} |U_k^T U_j|_F^2
  double mean_real_energy = 0.0;
  double mean_fake_energy = 0.0;
};

template <typename T>
std::vector<Diagnostics> diagnostics(const std::vector<ClusterBatch<T>>& batches, const SubspaceBank<T>& bank);

}  // namespace adatsc::subgan
