#include "adatsc/clustval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "json.hpp"

namespace adatsc::clustval {

namespace {

struct Groups {
  std::vector<int> compact;  // labels renumbered 0..K-1 in sorted order
  int K = 0;
  std::vector<Eigen::Index> sizes;
  MatD centroids;  // (K, d)
};

Groups group(const MatD& x, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != x.rows())
    throw MetricError("labels and points differ in length");
  if (labels.empty()) throw MetricError("no points");
  std::map<int, int> ids;
  for (int l : labels) ids.emplace(l, 0);
  int next = 0;
  for (auto& [l, id] : ids) id = next++;
  Groups g;
  g.K = next;
  g.sizes.assign(static_cast<std::size_t>(g.K), 0);
  g.centroids = MatD::Zero(g.K, x.cols());
  g.compact.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int c = ids[labels[i]];
    g.compact.push_back(c);
    ++g.sizes[c];
    g.centroids.row(c) += x.row(static_cast<Eigen::Index>(i));
  }
  for (int c = 0; c < g.K; ++c) g.centroids.row(c) /= static_cast<double>(g.sizes[c]);
  return g;
}

double comb2(double n) { return n * (n - 1) / 2.0; }

}  // namespace

double silhouette(const MatD& x, const std::vector<int>& labels) {
  const Groups g = group(x, labels);
  if (g.K < 2) throw MetricError("silhouette needs at least 2 clusters");
  const Eigen::Index n = x.rows();
  double total = 0.0;
  std::vector<double> sums(static_cast<std::size_t>(g.K));
  for (Eigen::Index i = 0; i < n; ++i) {
    const int own = g.compact[i];
    if (g.sizes[own] == 1) continue;  // singleton scores 0
    std::fill(sums.begin(), sums.end(), 0.0);
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) sums[g.compact[j]] += (x.row(i) - x.row(j)).norm();
    const double a = sums[own] / static_cast<double>(g.sizes[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < g.K; ++c)
      if (c != own) b = std::min(b, sums[c] / static_cast<double>(g.sizes[c]));
    const double m = std::max(a, b);
    total += m > 0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

double davies_bouldin(const MatD& x, const std::vector<int>& labels) {
  const Groups g = group(x, labels);
  if (g.K < 2) throw MetricError("Davies-Bouldin needs at least 2 clusters");
  VecD spread = VecD::Zero(g.K);
  for (Eigen::Index i = 0; i < x.rows(); ++i) spread[g.compact[i]] += (x.row(i) - g.centroids.row(g.compact[i])).norm();
  for (int c = 0; c < g.K; ++c) spread[c] /= static_cast<double>(g.sizes[c]);
  double total = 0.0;
  for (int i = 0; i < g.K; ++i) {
    double worst = 0.0;
    for (int j = 0; j < g.K; ++j) {
      if (j == i) continue;
      const double sep = (g.centroids.row(i) - g.centroids.row(j)).norm();
      if (sep == 0.0) throw MetricError("Davies-Bouldin: clusters " + std::to_string(i) + " and " + std::to_string(j) +
                                        " have coincident centroids");
      worst = std::max(worst, (spread[i] + spread[j]) / sep);
    }
    total += worst;
  }
  return total / g.K;
}

double calinski_harabasz(const MatD& x, const std::vector<int>& labels) {
  const Groups g = group(x, labels);
  const Eigen::Index n = x.rows();
  if (g.K < 2) throw MetricError("Calinski-Harabasz needs at least 2 clusters");
  if (n <= g.K) throw MetricError("Calinski-Harabasz needs more points than clusters");
  const Eigen::RowVectorXd mean = x.colwise().mean();
  double between = 0.0, within = 0.0;
  for (int c = 0; c < g.K; ++c) between += static_cast<double>(g.sizes[c]) * (g.centroids.row(c) - mean).squaredNorm();
  for (Eigen::Index i = 0; i < n; ++i) within += (x.row(i) - g.centroids.row(g.compact[i])).squaredNorm();
  if (within == 0.0) throw MetricError("Calinski-Harabasz: zero within-cluster scatter");
  return (between / (g.K - 1)) / (within / static_cast<double>(n - g.K));
}

double rmse_metric(const MatD& x, const std::vector<int>& labels) {
  const Groups g = group(x, labels);
  VecD sq = VecD::Zero(g.K);
  for (Eigen::Index i = 0; i < x.rows(); ++i) sq[g.compact[i]] += (x.row(i) - g.centroids.row(g.compact[i])).squaredNorm();
  double total = 0.0;
  for (int c = 0; c < g.K; ++c) total += std::sqrt(sq[c] / static_cast<double>(g.sizes[c]));
  return total / g.K;
}

double avg_variance(const MatD& x, const std::vector<int>& labels) {
  const Groups g = group(x, labels);
  VecD sq = VecD::Zero(g.K);
  for (Eigen::Index i = 0; i < x.rows(); ++i) sq[g.compact[i]] += (x.row(i) - g.centroids.row(g.compact[i])).squaredNorm();
  double total = 0.0;
  for (int c = 0; c < g.K; ++c) total += sq[c] / (static_cast<double>(g.sizes[c]) * static_cast<double>(x.cols()));
  return total / g.K;
}

double inter_cluster_distance(const MatD& x, const std::vector<int>& labels) {
  const Groups g = group(x, labels);
  if (g.K < 2) return 0.0;
  double total = 0.0;
  int pairs = 0;
  for (int i = 0; i < g.K; ++i)
    for (int j = i + 1; j < g.K; ++j, ++pairs) total += (g.centroids.row(i) - g.centroids.row(j)).norm();
  return total / pairs;
}

namespace {

struct Contingency {
  std::map<std::pair<int, int>, double> cells;
  std::map<int, double> rows, cols;
  double n = 0;
};

Contingency contingency(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw MetricError("labelings differ in length");
  if (a.size() < 2) throw MetricError("agreement metrics need at least 2 points");
  Contingency c;
  for (std::size_t i = 0; i < a.size(); ++i) {
    c.cells[{a[i], b[i]}] += 1;
    c.rows[a[i]] += 1;
    c.cols[b[i]] += 1;
  }
  c.n = static_cast<double>(a.size());
  return c;
}

}  // namespace

double ari(const std::vector<int>& a, const std::vector<int>& b) {
  const Contingency c = contingency(a, b);
  double index = 0, sa = 0, sb = 0;
  for (const auto& [k, v] : c.cells) index += comb2(v);
  for (const auto& [k, v] : c.rows) sa += comb2(v);
  for (const auto& [k, v] : c.cols) sb += comb2(v);
  const double expected = sa * sb / comb2(c.n);
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return index == max_index ? 1.0 : 0.0;
  return (index - expected) / (max_index - expected);
}

double nmi(const std::vector<int>& a, const std::vector<int>& b) {
  const Contingency c = contingency(a, b);
  auto entropy = [&](const std::map<int, double>& m) {
    double h = 0;
    for (const auto& [k, v] : m) h -= (v / c.n) * std::log(v / c.n);
    return h;
  };
  const double ha = entropy(c.rows), hb = entropy(c.cols);
  if (ha == 0.0 && hb == 0.0) return 1.0;
  double mi = 0;
  for (const auto& [k, v] : c.cells)
    mi += (v / c.n) * std::log(v * c.n / (c.rows.at(k.first) * c.cols.at(k.second)));
  const double denom = 0.5 * (ha + hb);
  return std::clamp(mi / denom, 0.0, 1.0);
}

MetricReport evaluate(const MatD& points, const std::vector<int>& labels, const std::vector<int>* truth) {
  MetricReport r;
  r.n_points = points.rows();
  r.K = group(points, labels).K;
  auto defined = [&](double (*metric)(const MatD&, const std::vector<int>&)) -> std::optional<double> {
    try {
      return metric(points, labels);
    } catch (const MetricError&) {
      return std::nullopt;
    }
  };
  r.silhouette = defined(silhouette);
  r.db = defined(davies_bouldin);
  r.ch = defined(calinski_harabasz);
  r.rmse = rmse_metric(points, labels);
  r.variance = avg_variance(points, labels);
  r.icd = inter_cluster_distance(points, labels);
  if (truth) {
    r.ari = ari(*truth, labels);
    r.nmi = nmi(*truth, labels);
  }
  return r;
}

std::string to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  j["silhouette"] = opt(r.silhouette);
  j["db"] = opt(r.db);
  j["ch"] = opt(r.ch);
  j["rmse"] = r.rmse;
  j["variance"] = r.variance;
  j["icd"] = r.icd;
  j["ari"] = opt(r.ari);
  j["nmi"] = opt(r.nmi);
  j["n_points"] = r.n_points;
  j["K"] = r.K;
  return j.dump();
}

std::string csv_header() { return "tag,silhouette,db,ch,rmse,variance,icd,ari,nmi,n_points,K"; }

std::string to_csv_row(const std::string& tag, const MetricReport& r) {
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  std::string s = tag;
  s += "," + opt(r.silhouette) + "," + opt(r.db) + "," + opt(r.ch);
  for (double v : {r.rmse, r.variance, r.icd}) s += "," + num(v);
  s += "," + opt(r.ari) + "," + opt(r.nmi);
  s += "," + std::to_string(r.n_points) + "," + std::to_string(r.K);
  return s;
}

ElbowResult elbow_from_sse(const std::vector<int>& ks, const std::vector<double>& sse) {
  if (ks.size() != sse.size()) throw std::invalid_argument("elbow: ks and sse differ in length");
  if (ks.size() < 3) throw std::invalid_argument("elbow: need at least 3 values of k");
  ElbowResult r;
  r.ks = ks;
  r.sse = sse;
  double scale = 0.0;
  for (double v : sse) scale = std::max(scale, std::abs(v));
  const double tol = 1e-12 * std::max(scale, 1.0);
  double best = -std::numeric_limits<double>::infinity();
  std::size_t arg = 1;
  for (std::size_t i = 1; i + 1 < sse.size(); ++i) {
    const double d2 = sse[i - 1] - 2.0 * sse[i] + sse[i + 1];
    if (d2 > best + tol) {
      best = d2;
      arg = i;
    }
  }
  bool flat = true;
  for (std::size_t i = 1; i + 1 < sse.size(); ++i)
    if (std::abs(sse[i - 1] - 2.0 * sse[i] + sse[i + 1]) > tol) flat = false;
  r.no_elbow = flat;
  r.k = ks[flat ? 1 : arg];
  return r;
}

ElbowResult elbow_select_k(const MatD& points, int k_min, int k_max, std::uint64_t seed, int restarts) {
  if (k_max - k_min + 1 < 3) throw std::invalid_argument("elbow: k range must contain at least 3 values");
  if (k_min < 1 || k_max > points.rows() - 1) throw std::invalid_argument("elbow: k range must lie in [1, n-1]");
  std::vector<int> ks;
  std::vector<double> sse;
  for (int k = k_min; k <= k_max; ++k) {
    ks.push_back(k);
    sse.push_back(kmeans(points, k, restarts, seed).sse);
  }
  return elbow_from_sse(ks, sse);
}

}  // namespace adatsc::clustval
