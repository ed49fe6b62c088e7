#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "adatsc/linalg.hpp"

// Internal validity metrics, agreement with ground truth and elbow selection.
// Points are rows; labels are arbitrary non-negative integers.
namespace adatsc::clustval {

class MetricError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

double silhouette(const MatD& points, const std::vector<int>& labels);
double davies_bouldin(const MatD& points, const std::vector<int>& labels);
double calinski_harabasz(const MatD& points, const std::vector<int>& labels);
double rmse_metric(const MatD& points, const std::vector<int>& labels);
double avg_variance(const MatD& points, const std::vector<int>& labels);
double inter_cluster_distance(const MatD& points, const std::vector<int>& labels);

double ari(const std::vector<int>& a, const std::vector<int>& b);
double nmi(const std::vector<int>& a, const std::vector<int>& b);

struct MetricReport {
  // Empty when the labelling leaves the metric undefined (one cluster, zero scatter).
  std::optional<double> silhouette, db, ch;
  double rmse = 0, variance = 0, icd = 0;
  std::optional<double> ari, nmi;
  std::int64_t n_points = 0;
  int K = 0;
};

// All six internal metrics; agreement metrics when truth is given.
MetricReport evaluate(const MatD& points, const std::vector<int>& labels,
                      const std::vector<int>* truth = nullptr);
std::string to_json(const MetricReport& r);
std::string csv_header();
std::string to_csv_row(const std::string& tag, const MetricReport& r);

struct ElbowResult {
  int k = 0;
  bool no_elbow = false;  // second difference was zero everywhere
  std::vector<int> ks;
  std::vector<double> sse;
};

// k-means SSE for each k in [k_min, k_max]; picks the interior k with the
// largest second difference SSE(k-1) - 2 SSE(k) + SSE(k+1).
ElbowResult elbow_from_sse(const std::vector<int>& ks, const std::vector<double>& sse);
ElbowResult elbow_select_k(const MatD& points, int k_min, int k_max, std::uint64_t seed, int restarts = 10);

}  // namespace adatsc::clustval
