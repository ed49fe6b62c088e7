#include <cmath>

#include "adatsc/params.hpp"

namespace adatsc {

template <typename T>
Adam<T>::Adam(std::vector<ad::Var<T>> vars, Options opt) : vars_(std::move(vars)), opt_(opt) {
  for (const auto& v : vars_) {
    m_.emplace_back(static_cast<std::size_t>(v.value().size()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(v.value().size()), 0.0);
  }
}

template <typename T>
bool Adam<T>::step() {
  for (const auto& v : vars_) {
    if (!v.has_grad()) continue;
    for (T g : v.grad().values())
      if (!std::isfinite(static_cast<double>(g))) return false;
  }
  ++t_;
  const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    auto& var = vars_[i];
    if (!var.has_grad()) continue;
    const auto& g = var.grad();
    auto& w = var.mutable_value();
    auto& m = m_[i];
    auto& s = v_[i];
    for (std::int64_t j = 0; j < w.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * gj;
      s[j] = opt_.beta2 * s[j] + (1.0 - opt_.beta2) * gj * gj;
      const double upd = opt_.lr * (m[j] / c1) / (std::sqrt(s[j] / c2) + opt_.eps);
      w[j] = static_cast<T>(static_cast<double>(w[j]) - upd);
    }
  }
  return true;
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& v : vars_) v.zero_grad();
}

template class Adam<float>;
template class Adam<double>;

}  // namespace adatsc
