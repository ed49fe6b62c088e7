#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "adatsc/autodiff.hpp"
#include "adatsc/linalg.hpp"
#include "adatsc/params.hpp"
#include "adatsc/rng.hpp"

namespace testing {

using adatsc::Rng;
using adatsc::Shape;
using adatsc::Tensor;
using adatsc::ad::Var;

template <typename T>
Tensor<T> randn(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(scale * rng.normal());
  return t;
}

template <typename T>
Tensor<T> uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
  return t;
}

// Keeps entries at least `gap` away from each kink point.
template <typename T>
void avoid_kinks(Tensor<T>& t, const std::vector<double>& kinks, double gap) {
  for (auto& v : t.values())
    for (double k : kinks)
      if (std::abs(static_cast<double>(v) - k) < gap) v = static_cast<T>(k + (v >= k ? gap : -gap));
}

struct GradReport {
  double max_rel_err = 0;
  int probes = 0;
  std::string worst;
};

template <typename T>
using LossFn = std::function<Var<T>(const std::vector<Var<T>>&)>;

template <typename T>
struct Precision;
// fp32 gradients are compared against differences of the same function
// evaluated in fp64, since fp32 round-off swamps any usable step size.
template <>
struct Precision<float> {
  static constexpr double tol = 1e-3;
  static constexpr double floor = 1e-4;
};
template <>
struct Precision<double> {
  static constexpr double tol = 1e-6;
  static constexpr double floor = 1e-6;
};

// Fourth-order central difference: truncation O(h^4), so a step large enough
// to keep round-off near 1e-13 is still exact to well below the tolerances.
inline constexpr double kStep = 1e-3;
template <typename F>
double five_point(double h, F&& f) {
  return (8 * (f(h) - f(-h)) - (f(2 * h) - f(-2 * h))) / (12 * h);
}

// Fourth-order central differences (in fp64) on randomly chosen
// coordinates. Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
// `loss` must be generic over the scalar type.
template <typename T, typename F>
GradReport gradcheck(F&& loss, const std::vector<Tensor<T>>& inputs, std::uint64_t seed = 1, int probes = 24) {
  std::vector<Var<T>> vars;
  for (const auto& t : inputs) vars.push_back(Var<T>::parameter(t));
  Var<T> out = loss(vars);
  adatsc::ad::backward(out);
  std::vector<Tensor<T>> grads;
  for (const auto& v : vars) grads.push_back(v.has_grad() ? v.grad() : Tensor<T>(v.shape()));

  std::vector<Tensor<double>> base;
  for (const auto& t : inputs) base.push_back(t.template cast<double>());
  auto eval = [&](std::size_t which, std::int64_t j, double delta) {
    adatsc::ad::NoGradGuard guard;
    std::vector<Var<double>> probe;
    for (std::size_t i = 0; i < base.size(); ++i) {
      Tensor<double> t = base[i];
      if (i == which) t[j] += delta;
      probe.push_back(Var<double>::constant(std::move(t)));
    }
    Var<double> y = loss(probe);
    return y.item();
  };

  Rng rng(seed);
  std::int64_t total = 0;
  for (const auto& t : inputs) total += t.size();
  GradReport rep;
  for (int p = 0; p < probes; ++p) {
    std::int64_t flat = rng.below(total);
    std::size_t which = 0;
    while (flat >= inputs[which].size()) flat -= inputs[which++].size();
    const double h = kStep * std::max(1.0, std::abs(base[which][flat]));
    const double numeric = five_point(h, [&](double d) { return eval(which, flat, d); });
    const double analytic = static_cast<double>(grads[which][flat]);
    const double err =
        std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), Precision<T>::floor});
    if (err > rep.max_rel_err) {
      rep.max_rel_err = err;
      rep.worst = "input " + std::to_string(which) + "[" + std::to_string(flat) + "] analytic " +
                  std::to_string(analytic) + " numeric " + std::to_string(numeric);
    }
    ++rep.probes;
  }
  return rep;
}

// Same check over the parameters of a model. `build(ps)` registers parameters in `ps` and returns a
// nullary loss; it is called once per precision and the fp64 copy takes the values of the T model.
// Only parameters whose name starts with `prefix` are probed.
template <typename T, typename Build>
GradReport param_gradcheck(Build&& build, const std::string& prefix = "", std::uint64_t seed = 1, int probes = 24) {
  adatsc::ParamStore<T> ps;
  auto loss = build(ps);
  adatsc::ad::backward(loss());
  adatsc::ParamStore<double> pd;
  auto loss_d = build(pd);
  std::vector<std::size_t> pick;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto target = pd.entries()[i].var;
    target.mutable_value() = ps.entries()[i].var.value().template cast<double>();
    if (ps.entries()[i].name.rfind(prefix, 0) == 0) pick.push_back(i);
  }
  Rng rng(seed);
  GradReport rep;
  adatsc::ad::NoGradGuard guard;
  for (int p = 0; p < probes && !pick.empty(); ++p) {
    const auto& e = ps.entries()[pick[rng.below(static_cast<std::int64_t>(pick.size()))]];
    const std::int64_t j = rng.below(e.var.value().size());
    auto v = pd.get(e.name);
    double& slot = v.mutable_value()[j];
    const double x0 = slot, h = kStep * std::max(1.0, std::abs(x0));
    const double numeric = five_point(h, [&](double d) {
      slot = x0 + d;
      const double y = loss_d().item();
      slot = x0;
      return y;
    });
    const double analytic = e.var.has_grad() ? static_cast<double>(e.var.grad()[j]) : 0.0;
    const double err =
        std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), Precision<T>::floor});
    if (err > rep.max_rel_err) {
      rep.max_rel_err = err;
      rep.worst = e.name + "[" + std::to_string(j) + "] analytic " + std::to_string(analytic) + " numeric " +
                  std::to_string(numeric);
    }
    ++rep.probes;
  }
  return rep;
}

// Scalar literal in the element type of a vector of Vars (for loss lambdas generic over precision).
template <typename V>
auto lit(const std::vector<V>& v, double x) {
  return static_cast<decltype(v[0].item())>(x);
}

inline adatsc::MatD random_points(Rng& rng, int n, int d, double scale = 1.0) {
  adatsc::MatD x(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) x(i, j) = scale * rng.normal();
  return x;
}

}  // namespace testing
