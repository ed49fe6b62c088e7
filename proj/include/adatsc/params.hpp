#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "adatsc/autodiff.hpp"
#include "adatsc/rng.hpp"

namespace adatsc {

// Flat, ordered namespace of trainable tensors. Insertion order fixes the
// checkpoint layout and the optimizer's traversal order.
template <typename T>
class ParamStore {
 public:
  ad::Var<T> add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, ad::Var<T>::parameter(std::move(value))});
    return entries_.back().var;
  }

  // Glorot-uniform with the given fan sizes.
  ad::Var<T> add_glorot(const std::string& name, Shape shape, std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : t.values()) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * a);
    return add(name, std::move(t));
  }

  ad::Var<T> add_fill(const std::string& name, Shape shape, T fill) { return add(name, Tensor<T>(std::move(shape), fill)); }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const ad::Var<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter " + name);
    return entries_[it->second].var;
  }

  struct Entry {
    std::string name;
    ad::Var<T> var;
  };
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  // Vars whose name starts with any of the prefixes.
  std::vector<ad::Var<T>> with_prefix(const std::vector<std::string>& prefixes) const {
    std::vector<ad::Var<T>> out;
    for (const auto& e : entries_)
      for (const auto& p : prefixes)
        if (e.name.rfind(p, 0) == 0) {
          out.push_back(e.var);
          break;
        }
    return out;
  }

  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Adam with bias correction. State is keyed by position in the var list.
template <typename T>
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(std::vector<ad::Var<T>> vars, Options opt);

  // Returns false, leaving parameters untouched, when any gradient is non-finite.
  bool step();
  void zero_grad();
  void set_lr(double lr) { opt_.lr = lr; }
  double lr() const { return opt_.lr; }
  const std::vector<ad::Var<T>>& vars() const { return vars_; }

 private:
  std::vector<ad::Var<T>> vars_;
  Options opt_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace adatsc
