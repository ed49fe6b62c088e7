#include "adatsc/gridio.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "json.hpp"

namespace adatsc::gridio {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr char kMagic[4] = {'G', '5', 'T', '1'};

void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32_le(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

void put_f32_le(std::string& out, float f) { put_u32_le(out, std::bit_cast<std::uint32_t>(f)); }

bool is_missing(float v, const std::optional<double>& fill) {
  if (!std::isfinite(v)) return true;
  return fill && static_cast<double>(v) == static_cast<double>(static_cast<float>(*fill));
}

}  // namespace

Grid5D make_grid(Tensor<float> data) {
  if (data.rank() != 5) throw ShapeError("grid must be rank 5, got " + to_string(data.shape()));
  for (auto d : data.shape())
    if (d < 1) throw ShapeError("grid dims must be >= 1, got " + to_string(data.shape()));
  Grid5D g;
  for (std::int64_t c = 0; c < data.dim(4); ++c) g.var_names.push_back("v" + std::to_string(c));
  g.data = std::move(data);
  return g;
}

std::string encode_grid5d(const Grid5D& grid) {
  ordered_json h;
  h["dims"] = grid.data.shape();
  h["dtype"] = "f32";
  h["order"] = "BTHWC";
  h["var_names"] = grid.var_names;
  h["fill_value"] = grid.fill_value ? ordered_json(*grid.fill_value) : ordered_json(nullptr);
  h["normalized"] = grid.normalized;
  if (grid.norm_stats) {
    ordered_json stats = ordered_json::array();
    for (const auto& [lo, hi] : *grid.norm_stats) stats.push_back({lo, hi});
    h["norm_stats"] = stats;
  } else {
    h["norm_stats"] = nullptr;
  }
  const std::string header = h.dump();
  std::string out(kMagic, 4);
  put_u32_le(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  out.reserve(out.size() + static_cast<std::size_t>(grid.data.size()) * 4);
  for (float v : grid.data.values()) put_f32_le(out, v);
  return out;
}

Grid5D decode_grid5d(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic: not a G5T1 file");
  const std::uint32_t hlen = get_u32_le(bytes.data() + 4);
  if (bytes.size() < 8ull + hlen) throw TruncationError("header runs past end of file");
  ordered_json h;
  try {
    h = ordered_json::parse(bytes.begin() + 8, bytes.begin() + 8 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("header is not valid JSON: ") + e.what());
  }
  Shape dims;
  try {
    dims = h.at("dims").get<Shape>();
    if (h.at("dtype").get<std::string>() != "f32") throw FormatError("unsupported dtype");
    if (h.at("order").get<std::string>() != "BTHWC") throw FormatError("unsupported order");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
  if (dims.size() != 5) throw FormatError("dims must have 5 entries");
  for (auto d : dims)
    if (d < 1) throw FormatError("dims must be >= 1");
  const std::size_t n = static_cast<std::size_t>(numel(dims));
  const std::size_t payload = bytes.size() - 8 - hlen;
  if (payload != n * 4)
    throw TruncationError("payload has " + std::to_string(payload) + " bytes, header implies " + std::to_string(n * 4));

  std::vector<float> data(n);
  const char* p = bytes.data() + 8 + hlen;
  for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<float>(get_u32_le(p + 4 * i));
  Grid5D g;
  g.data = Tensor<float>(dims, std::move(data));
  try {
    g.var_names = h.value("var_names", std::vector<std::string>{});
    if (h.contains("fill_value") && !h["fill_value"].is_null()) g.fill_value = h["fill_value"].get<double>();
    g.normalized = h.value("normalized", false);
    if (h.contains("norm_stats") && !h["norm_stats"].is_null()) {
      std::vector<MinMax> stats;
      for (const auto& s : h["norm_stats"]) stats.emplace_back(s.at(0).get<double>(), s.at(1).get<double>());
      g.norm_stats = std::move(stats);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
  if (g.var_names.size() != static_cast<std::size_t>(dims[4]))
    throw FormatError("var_names has " + std::to_string(g.var_names.size()) + " entries for C=" + std::to_string(dims[4]));
  return g;
}

Grid5D load_grid5d(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_grid5d(ss.str());
}

void save_grid5d(const Grid5D& grid, const std::string& path) {
  const std::string bytes = encode_grid5d(grid);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WriteError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw WriteError("write failed for " + path);
}

Grid5D impute_missing(const Grid5D& grid) {
  double sum = 0.0;
  std::int64_t count = 0;
  for (float v : grid.data.values())
    if (!is_missing(v, grid.fill_value)) {
      sum += v;
      ++count;
    }
  if (count == 0) throw DegenerateInputError("every entry is missing");
  const float mean = static_cast<float>(sum / static_cast<double>(count));
  Grid5D out = grid;
  for (auto& v : out.data.values())
    if (is_missing(v, grid.fill_value)) v = mean;
  return out;
}

Normalized minmax_normalize(const Grid5D& grid) {
  const std::int64_t C = grid.C();
  std::vector<MinMax> stats(static_cast<std::size_t>(C),
                            {std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()});
  const auto vals = grid.data.values();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    auto& [lo, hi] = stats[i % C];
    lo = std::min(lo, static_cast<double>(vals[i]));
    hi = std::max(hi, static_cast<double>(vals[i]));
  }
  Normalized res{grid, stats};
  auto out = res.grid.data.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto [lo, hi] = stats[i % C];
    const double span = hi - lo;
    out[i] = span > 0 ? static_cast<float>((static_cast<double>(vals[i]) - lo) / span) : 0.0f;
  }
  res.grid.normalized = true;
  res.grid.norm_stats = stats;
  return res;
}

Tensor<float> flatten_to_2d(const Grid5D& grid) {
  return grid.data.reshaped({grid.B(), grid.T(), grid.H() * grid.W() * grid.C()});
}

Tensor<float> unflatten_from_2d(const Tensor<float>& rows, std::int64_t H, std::int64_t W, std::int64_t C) {
  if (rows.rank() != 3 || rows.dim(2) != H * W * C) throw ShapeError("unflatten: row length does not match H*W*C");
  return rows.reshaped({rows.dim(0), rows.dim(1), H, W, C});
}

void validate(const SynthSpec& s) {
  if (s.K < 2) throw std::invalid_argument("K must be >= 2");
  if (s.r < 1 || s.r >= s.d_lat) throw std::invalid_argument("need 1 <= r < d_lat");
  if (!(s.p_stay > 0.0 && s.p_stay <= 1.0)) throw std::invalid_argument("p_stay must be in (0, 1]");
  if (!(s.min_angle_deg > 0.0 && s.min_angle_deg <= 90.0)) throw std::invalid_argument("min_angle_deg must be in (0, 90]");
  if (std::isnan(s.snr_db)) throw std::invalid_argument("snr_db is NaN");
}

LabeledGrid make_synthetic_uos(const SynthSpec& spec, int B, int T, int H, int W, int C) {
  validate(spec);
  if (B < 1 || T < 1 || H < 1 || W < 1 || C < 1) throw std::invalid_argument("dims must be >= 1");
  const int P = H * W * C;
  if (spec.d_lat > P) throw std::invalid_argument("d_lat exceeds H*W*C");

  LabeledGrid lg;
  // (i) bases by rejection sampling on the smallest principal angle
  {
    Rng rng = Rng::derive(spec.seed, 1);
    const double cos_max = std::cos(spec.min_angle_deg * std::numbers::pi / 180.0);
    int tries = 0;
    while (static_cast<int>(lg.bases.size()) < spec.K) {
      if (++tries > spec.max_tries)
        throw GenerationError("could not place " + std::to_string(spec.K) + " subspaces of rank " +
                              std::to_string(spec.r) + " in dimension " + std::to_string(spec.d_lat) +
                              " with pairwise angles >= " + std::to_string(spec.min_angle_deg) + " degrees");
      MatD u = random_orthonormal(spec.d_lat, spec.r, rng);
      bool ok = true;
      for (const auto& v : lg.bases) {
        Eigen::JacobiSVD<MatD> svd(u.transpose() * v);
        if (svd.singularValues()[0] > cos_max + 1e-12) {
          ok = false;
          break;
        }
      }
      if (ok) lg.bases.push_back(std::move(u));
    }
  }
  {
    Rng rng = Rng::derive(spec.seed, 2);
    lg.mixing.resize(P, spec.d_lat);
    const double s = 1.0 / std::sqrt(static_cast<double>(spec.d_lat));
    for (int j = 0; j < spec.d_lat; ++j)
      for (int i = 0; i < P; ++i) lg.mixing(i, j) = s * rng.normal();
  }
  // (ii) Markov labels
  lg.labels.resize(static_cast<std::size_t>(B) * T);
  {
    Rng rng = Rng::derive(spec.seed, 3);
    for (int b = 0; b < B; ++b) {
      int y = static_cast<int>(rng.below(spec.K));
      for (int t = 0; t < T; ++t) {
        if (t > 0 && rng.uniform() >= spec.p_stay) {
          const int o = static_cast<int>(rng.below(spec.K - 1));
          y = o < y ? o : o + 1;
        }
        lg.labels[static_cast<std::size_t>(b) * T + t] = y;
      }
    }
  }
  // (iii) latents and (iv) blurred frames
  lg.latents.resize(static_cast<Eigen::Index>(B) * T, spec.d_lat);
  std::vector<double> signal(static_cast<std::size_t>(B) * T * P);
  {
    Rng rng = Rng::derive(spec.seed, 4);
    VecD a(spec.r);
    std::vector<double> frame(P);
    for (int bt = 0; bt < B * T; ++bt) {
      for (int i = 0; i < spec.r; ++i) a[i] = rng.normal();
      const double rms = std::sqrt(a.squaredNorm() / spec.r);
      if (rms > 0) a /= rms;
      const VecD u = lg.bases[lg.labels[bt]] * a;
      lg.latents.row(bt) = u.transpose();
      const VecD f = lg.mixing * u;
      double* dst = signal.data() + static_cast<std::size_t>(bt) * P;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          for (int c = 0; c < C; ++c) {
            double s = 0.0;
            int n = 0;
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const int yy = y + dy, xx = x + dx;
                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                s += f[(yy * W + xx) * C + c];
                ++n;
              }
            dst[(y * W + x) * C + c] = s / n;
          }
    }
  }
  double power = 0.0;
  for (double v : signal) power += v * v;
  power /= static_cast<double>(signal.size());
  const double noise_sd = std::isinf(spec.snr_db) && spec.snr_db > 0 ? 0.0 : std::sqrt(power / std::pow(10.0, spec.snr_db / 10.0));
  Tensor<float> data(Shape{B, T, H, W, C});
  {
    Rng rng = Rng::derive(spec.seed, 5);
    for (std::size_t i = 0; i < signal.size(); ++i) {
      const double n = noise_sd > 0 ? noise_sd * rng.normal() : 0.0;
      data[static_cast<std::int64_t>(i)] = static_cast<float>(signal[i] + n);
    }
  }
  lg.grid = make_grid(std::move(data));
  return lg;
}

LabeledGrid slice_batch(const LabeledGrid& lg, int first, int count) {
  const auto& g = lg.grid;
  if (first < 0 || count < 1 || first + count > g.B()) throw std::out_of_range("slice_batch out of range");
  const std::int64_t T = g.T();
  const std::int64_t per = g.data.size() / g.B();
  LabeledGrid out;
  out.grid = g;
  Shape s = g.data.shape();
  s[0] = count;
  std::vector<float> d(g.data.values().begin() + first * per, g.data.values().begin() + (first + count) * per);
  out.grid.data = Tensor<float>(s, std::move(d));
  out.labels.assign(lg.labels.begin() + first * T, lg.labels.begin() + (first + count) * T);
  out.bases = lg.bases;
  out.mixing = lg.mixing;
  out.latents = lg.latents.middleRows(first * T, count * T);
  return out;
}

void write_labels_csv(const std::string& path, const std::vector<int>& labels, std::int64_t B, std::int64_t T) {
  if (static_cast<std::int64_t>(labels.size()) != B * T) throw std::invalid_argument("labels size != B*T");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw WriteError("cannot open " + path + " for writing");
  out << "b,t,label\n";
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < T; ++t) out << b << ',' << t << ',' << labels[b * T + t] << '\n';
  if (!out) throw WriteError("write failed for " + path);
}

std::vector<int> read_labels_csv(const std::string& path, std::int64_t B, std::int64_t T) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("b,t,label", 0) != 0) throw FormatError("labels CSV must start with b,t,label");
  std::vector<int> labels(static_cast<std::size_t>(B * T), -1);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    long long b, t;
    int l;
    char c1, c2;
    std::istringstream ss(line);
    if (!(ss >> b >> c1 >> t >> c2 >> l) || c1 != ',' || c2 != ',') throw FormatError("bad labels row: " + line);
    if (b < 0 || b >= B || t < 0 || t >= T) throw FormatError("labels row out of range: " + line);
    labels[b * T + t] = l;
  }
  for (int l : labels)
    if (l < 0) throw FormatError("labels CSV does not cover every (b,t)");
  return labels;
}

}  // namespace adatsc::gridio
