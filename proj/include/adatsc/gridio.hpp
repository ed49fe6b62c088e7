#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "adatsc/linalg.hpp"
#include "adatsc/tensor.hpp"

namespace adatsc::gridio {

class FormatError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class TruncationError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class WriteError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class DegenerateInputError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class GenerationError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

using MinMax = std::pair<double, double>;

// Spatiotemporal tensor in (batch, time, lat, lon, variable) order.
struct Grid5D {
  Tensor<float> data;
  std::vector<std::string> var_names;
  std::optional<double> fill_value;
  bool normalized = false;
  std::optional<std::vector<MinMax>> norm_stats;

  std::int64_t B() const { return data.dim(0); }
  std::int64_t T() const { return data.dim(1); }
  std::int64_t H() const { return data.dim(2); }
  std::int64_t W() const { return data.dim(3); }
  std::int64_t C() const { return data.dim(4); }
};

// Builds a grid with default variable names v0..v{C-1}.
Grid5D make_grid(Tensor<float> data);

Grid5D load_grid5d(const std::string& path);
void save_grid5d(const Grid5D& grid, const std::string& path);
// Serialized bytes, exactly as save_grid5d writes them.
std::string encode_grid5d(const Grid5D& grid);
Grid5D decode_grid5d(const std::string& bytes);

// Missing means equal to fill_value or non-finite.
Grid5D impute_missing(const Grid5D& grid);

struct Normalized {
  Grid5D grid;
  std::vector<MinMax> stats;
};
Normalized minmax_normalize(const Grid5D& grid);

// (B, T, H*W*C): row t of item b is frame t flattened in (h, w, c) order.
Tensor<float> flatten_to_2d(const Grid5D& grid);
Tensor<float> unflatten_from_2d(const Tensor<float>& rows, std::int64_t H, std::int64_t W, std::int64_t C);

struct SynthSpec {
  int K = 3;
  int d_lat = 32;
  int r = 4;
  double p_stay = 0.92;
  double snr_db = 20.0;  // +inf disables noise
  double min_angle_deg = 60.0;
  std::uint64_t seed = 7;
  int max_tries = 20000;
};

struct LabeledGrid {
  Grid5D grid;
  std::vector<int> labels;  // (B*T), row-major over (b, t)
  std::vector<MatD> bases;  // K of (d_lat, r)
  MatD mixing;              // fixed linear map (H*W*C, d_lat) applied before the blur
  MatD latents;             // (B*T, d_lat) noise-free latent u_t
};

void validate(const SynthSpec& spec);
LabeledGrid make_synthetic_uos(const SynthSpec& spec, int B, int T, int H, int W, int C);

// Rows b in [first, first+count) of a labeled grid.
LabeledGrid slice_batch(const LabeledGrid& lg, int first, int count);

// CSV with header `b,t,label`.
void write_labels_csv(const std::string& path, const std::vector<int>& labels, std::int64_t B, std::int64_t T);
std::vector<int> read_labels_csv(const std::string& path, std::int64_t B, std::int64_t T);

}  // namespace adatsc::gridio
