#pragma once

#include <string>

#include "adatsc/ops.hpp"
#include "adatsc/params.hpp"

// Student-t clustering head, tempering, DEC target and balancing terms.
// Assignment matrices are (n, K) with one row per (b, t).
namespace adatsc::decluster {

using ad::Var;

inline constexpr double kLogFloor = 1e-8;

template <typename T>
struct ClusterHead {
  Var<T> centers;  // (K, D)
  Var<T> dof;      // scalar alpha > 0

  static ClusterHead create(ParamStore<T>& ps, const std::string& prefix, int K, int D);
  int K() const { return static_cast<int>(centers.dim(0)); }
};

// Log of the unnormalised kernel -(a+1)/2 * log(1 + d/a), shape (n, K).
template <typename T>
Var<T> student_t_logits(const Var<T>& z, const ClusterHead<T>& head);

// q_{ik} proportional to (1 + |z_i - mu_k|^2 / a)^{-(a+1)/2}. z is (n, D) or (B, T, D); q is (n, K).
template <typename T>
Var<T> student_t_assign(const Var<T>& z, const ClusterHead<T>& head);

// Rows of q raised to 1/tau and renormalised.
template <typename T>
Var<T> temper(const Var<T>& q, T tau);
// Same result computed from the logits (stable: softmax(logits / tau)).
template <typename T>
Var<T> temper_logits(const Var<T>& logits, T tau);

// p_{ik} = (q_{ik}^2 / f_k) / sum_j (q_{ij}^2 / f_j), f_k = sum_i q_{ik}. No gradient.
template <typename T>
Tensor<T> target_distribution(const Tensor<T>& q);

// Mean over rows of sum_k p log(p / q), logs floored at 1e-8.
template <typename T>
Var<T> kl_cluster_loss(const Tensor<T>& p, const Var<T>& q);

// KL(mean row of q_tilde || uniform).
template <typename T>
Var<T> balance_loss(const Var<T>& q_tilde);

// Sum of squared off-diagonal correlations between the K assignment columns.
// Columns with zero variance have zero correlation.
template <typename T>
Var<T> mi_redundancy_loss(const Var<T>& q_tilde);

struct TauSchedule {
  double start = 2.0;
  double end = 0.5;
  double time_constant = 30.0;
};
double anneal_tau(double epoch, const TauSchedule& s = {});

// Argmax per row, ties to the smaller index.
template <typename T>
std::vector<int> hard_labels(const Tensor<T>& q);

}  // namespace adatsc::decluster
