#include "adatsc/decluster.hpp"

#include <cmath>

namespace adatsc::decluster {

using namespace adatsc::ad;

namespace {

template <typename T>
Var<T> as_rows(const Var<T>& z) {
  if (z.rank() == 2) return z;
  if (z.rank() == 3) return reshape(z, Shape{z.dim(0) * z.dim(1), z.dim(2)});
  throw ShapeError("expected (n,D) or (B,T,D), got " + to_string(z.shape()));
}

template <typename T>
Var<T> row_normalize(const Var<T>& v) {
  return div(v, sum_axis(v, -1, true));
}

}  // namespace

template <typename T>
ClusterHead<T> ClusterHead<T>::create(ParamStore<T>& ps, const std::string& prefix, int K, int D) {
  if (K < 2) throw ShapeError("cluster head needs K >= 2");
  ClusterHead h;
  h.centers = ps.add_fill(prefix + ".centers", {K, D}, T(0));
  h.dof = ps.add(prefix + ".dof", Tensor<T>::scalar(T(1)));
  return h;
}

template <typename T>
Var<T> student_t_logits(const Var<T>& z, const ClusterHead<T>& head) {
  auto d = pairwise_sqdist(as_rows(z), head.centers);
  auto a = head.dof;
  auto log_kernel = log(add_scalar(div(d, a), T(1)));
  return mul(scale(add_scalar(a, T(1)), T(-0.5)), log_kernel);
}

template <typename T>
Var<T> student_t_assign(const Var<T>& z, const ClusterHead<T>& head) {
  return softmax_last(student_t_logits(z, head));
}

template <typename T>
Var<T> temper(const Var<T>& q, T tau) {
  if (!(tau > T(0))) throw std::invalid_argument("temperature must be positive");
  return row_normalize(pow_scalar(q, T(1) / tau));
}

template <typename T>
Var<T> temper_logits(const Var<T>& logits, T tau) {
  if (!(tau > T(0))) throw std::invalid_argument("temperature must be positive");
  return softmax_last(scale(logits, T(1) / tau));
}

template <typename T>
Tensor<T> target_distribution(const Tensor<T>& q) {
  const std::int64_t K = q.dim(-1), n = q.size() / K;
  std::vector<double> f(static_cast<std::size_t>(K), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t k = 0; k < K; ++k) f[k] += q[i * K + k];
  Tensor<T> p(q.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    std::vector<double> row(static_cast<std::size_t>(K));
    for (std::int64_t k = 0; k < K; ++k) {
      const double qi = q[i * K + k];
      row[k] = f[k] > 0 ? qi * qi / f[k] : 0.0;
      s += row[k];
    }
    for (std::int64_t k = 0; k < K; ++k) p[i * K + k] = static_cast<T>(s > 0 ? row[k] / s : 1.0 / K);
  }
  return p;
}

template <typename T>
Var<T> kl_cluster_loss(const Tensor<T>& p, const Var<T>& q) {
  if (p.shape() != q.shape()) throw ShapeError("kl_cluster_loss: p and q shapes differ");
  const T eps = static_cast<T>(kLogFloor);
  const std::int64_t rows = q.value().size() / q.dim(-1);
  T entropy_part = T(0);
  for (T v : p.values()) entropy_part += v * std::log(std::max(v, eps));
  auto cross = sum(mul(Var<T>::constant(p), floor_log(q, eps)));
  return scale(add_scalar(neg(cross), entropy_part), T(1) / static_cast<T>(rows));
}

template <typename T>
Var<T> balance_loss(const Var<T>& q_tilde) {
  auto qbar = mean_axis(as_rows(q_tilde), 0);
  const T K = static_cast<T>(qbar.dim(0));
  return sum(mul(qbar, add_scalar(floor_log(qbar, static_cast<T>(kLogFloor)), std::log(K))));
}

template <typename T>
Var<T> mi_redundancy_loss(const Var<T>& q_tilde) {
  auto q = as_rows(q_tilde);
  const std::int64_t n = q.dim(0), K = q.dim(1);
  if (n < 2) throw ShapeError("mi_redundancy_loss needs at least 2 rows");
  auto centered = sub(q, mean_axis(q, 0, true));
  auto cov = scale(matmul(centered, centered, true, false), T(1) / static_cast<T>(n));
  auto var = scale(sum_axis(square(centered), 0), T(1) / static_cast<T>(n));
  // Zero-variance columns: substitute unit sd and mask their correlations.
  Tensor<T> fill(Shape{K}), mask(Shape{K, K});
  std::vector<bool> valid(static_cast<std::size_t>(K));
  for (std::int64_t k = 0; k < K; ++k) {
    valid[k] = var.value()[k] > T(1e-12);
    fill[k] = valid[k] ? T(0) : T(1);
  }
  for (std::int64_t i = 0; i < K; ++i)
    for (std::int64_t j = 0; j < K; ++j) mask[i * K + j] = (i != j && valid[i] && valid[j]) ? T(1) : T(0);
  auto sd = sqrt(add(var, Var<T>::constant(fill)));
  auto denom = mul(reshape(sd, Shape{K, 1}), reshape(sd, Shape{1, K}));
  auto corr = mul(div(cov, denom), Var<T>::constant(mask));
  return sum(square(corr));
}

double anneal_tau(double epoch, const TauSchedule& s) {
  if (epoch < 0) throw std::invalid_argument("epoch must be >= 0");
  return s.end + (s.start - s.end) * std::exp(-epoch / s.time_constant);
}

template <typename T>
std::vector<int> hard_labels(const Tensor<T>& q) {
  const std::int64_t K = q.dim(-1), n = q.size() / K;
  std::vector<int> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    int best = 0;
    for (std::int64_t k = 1; k < K; ++k)
      if (q[i * K + k] > q[i * K + best]) best = static_cast<int>(k);
    out[i] = best;
  }
  return out;
}

#define ADATSC_INSTANTIATE_DECLUSTER(T)                                 \
  template struct ClusterHead<T>;                                       \
  template Var<T> student_t_logits(const Var<T>&, const ClusterHead<T>&); \
  template Var<T> student_t_assign(const Var<T>&, const ClusterHead<T>&); \
  template Var<T> temper(const Var<T>&, T);                             \
  template Var<T> temper_logits(const Var<T>&, T);                      \
  template Tensor<T> target_distribution(const Tensor<T>&);             \
  template Var<T> kl_cluster_loss(const Tensor<T>&, const Var<T>&);     \
  template Var<T> balance_loss(const Var<T>&);                          \
  template Var<T> mi_redundancy_loss(const Var<T>&);                    \
  template std::vector<int> hard_labels(const Tensor<T>&);

ADATSC_INSTANTIATE_DECLUSTER(float)
ADATSC_INSTANTIATE_DECLUSTER(double)

}  // namespace adatsc::decluster
