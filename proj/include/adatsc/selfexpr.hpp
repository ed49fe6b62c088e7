#pragma once

#include <cstdint>
#include <vector>

#include "adatsc/linalg.hpp"
#include "adatsc/ops.hpp"

// Temporal self-expression: Z ~ C Z with a sparse per-sequence C.
namespace adatsc::selfexpr {

using ad::Var;

struct SEConfig {
  double threshold = 0.01;   // shrinkage applied to the raw coefficients
  bool exclude_self = true;  // zero diagonal
  double sigma_t = 5.0;      // temporal proximity scale, in steps
  double sparsity = 0.1;     // weight of the weighted L1 term
};

double shrink(double x, double theta);

// shrink(C_raw) with the diagonal masked when exclude_self. C_raw is (T,T) or (B,T,T).
template <typename T>
Var<T> effective_coeff(const Var<T>& c_raw, const SEConfig& cfg);

// w_ts = <q_t, q_s> exp(-|t-s| / sigma). q (T,K) or (B,T,K) -> (T,T) or (B,T,T).
template <typename T>
Var<T> affinity_weights(const Var<T>& q_tilde, double sigma_t);

// C Z, batched over a leading axis when both are rank 3.
template <typename T>
Var<T> se_reconstruct(const Var<T>& c, const Var<T>& z);

// |Z - CZ|_F^2 + sparsity * sum (1 - w) |C|, summed over the sequences of a batch.
template <typename T>
Var<T> se_loss(const Var<T>& z, const Var<T>& c, const Var<T>& w, double sparsity);

// A = |C| + |C^T|.
MatD build_affinity(const MatD& c);

struct Refined {
  std::vector<int> labels;
  bool fallback = false;  // affinity was empty, labels came from the supplied argmax
};

// Normalised-cut spectral clustering of one sequence's affinity.
Refined spectral_refine(const MatD& affinity, int K, std::uint64_t seed, const std::vector<int>& fallback_labels);

}  // namespace adatsc::selfexpr
