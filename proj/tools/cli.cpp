#include "cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <limits>
#include <optional>

#include "CLI11.hpp"
#include "adatsc/clustval.hpp"
#include "adatsc/gridio.hpp"
#include "adatsc/trainkit.hpp"
#include "json.hpp"

namespace adatsc::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

// Validation failure that maps to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::string file_hash(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) return "";
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a 64
  for (std::istreambuf_iterator<char> it(f), end; it != end; ++it) {
    h ^= static_cast<unsigned char>(*it);
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& args) {
    j_["command"] = std::move(command);
    j_["args"] = args;
    j_["started_at"] = utc_now();
  }
  void seed(std::uint64_t s) { j_["seed"] = s; }
  void config(const ordered_json& cfg) { j_["config"] = cfg; }
  void input(const fs::path& p) { j_["inputs"].push_back({{"path", p.string()}, {"fnv1a64", file_hash(p)}}); }
  void output(const fs::path& p) { outputs_.push_back(p); }
  void write(const fs::path& dir) {
    j_["outputs"] = ordered_json::array();
    for (const auto& p : outputs_) j_["outputs"].push_back({{"path", p.filename().string()}, {"fnv1a64", file_hash(p)}});
    j_["finished_at"] = utc_now();
    std::ofstream f(dir / "manifest.json");
    f << j_.dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write manifest in " + dir.string());
  }

 private:
  ordered_json j_;
  std::vector<fs::path> outputs_;
};

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
  if (flag) return *flag;
  if (const char* env = std::getenv("ADATSC_SEED")) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::logic_error&) {
    }
    throw UsageError(std::string("ADATSC_SEED is not an unsigned integer: ") + env);
  }
  return fallback;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw UsageError("cannot create output directory " + dir.string() + ": " + ec.message());
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw UsageError(what + " not found: " + p.string());
}

// Imputes and min-max normalises unless the file says it is already normalised.
Tensor<float> prepare(const gridio::Grid5D& g) {
  auto imputed = gridio::impute_missing(g);
  if (imputed.normalized) return imputed.data;
  return gridio::minmax_normalize(imputed).grid.data;
}

void apply_config_file(trainkit::TrainConfig& cfg, const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot read config " + path.string());
  std::string line;
  int n = 0;
  while (std::getline(f, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path.string() + ":" + std::to_string(n) + ": expected key=value");
    auto key = line.substr(0, eq);
    key.erase(0, key.find_first_not_of(" \t"));
    key.erase(key.find_last_not_of(" \t") + 1);
    try {
      trainkit::set_config_value(cfg, key, line.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw UsageError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

void write_matrix_csv(const fs::path& p, const MatD& a) {
  std::ofstream f(p);
  char buf[40];
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", a(i, j));
      f << (j ? "," : "") << buf;
    }
    f << '\n';
  }
  if (!f) throw std::runtime_error("cannot write " + p.string());
}

int cmd_synth(const std::vector<std::string>& args, int K, int B, int T, int H, int W, int C, int r, int d_lat,
              double p_stay, double snr, double angle, std::optional<std::uint64_t> seed_flag, const fs::path& out) {
  gridio::SynthSpec spec;
  spec.K = K;
  spec.r = r;
  spec.d_lat = d_lat;
  spec.p_stay = p_stay;
  spec.snr_db = snr;
  spec.min_angle_deg = angle;
  spec.seed = resolve_seed(seed_flag, spec.seed);
  try {
    gridio::validate(spec);
    if (B < 1 || T < 1 || H < 1 || W < 1 || C < 1) throw std::invalid_argument("dims must be >= 1");
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  ensure_dir(out);
  Manifest man("synth", args);
  man.seed(spec.seed);
  man.config({{"K", K}, {"B", B}, {"T", T}, {"H", H}, {"W", W}, {"C", C}, {"r", r}, {"d_lat", d_lat},
              {"p_stay", p_stay}, {"snr_db", snr}, {"min_angle_deg", angle}});
  const auto lg = gridio::make_synthetic_uos(spec, B, T, H, W, C);
  gridio::save_grid5d(lg.grid, (out / "grid.g5t1").string());
  gridio::write_labels_csv((out / "labels.csv").string(), lg.labels, B, T);
  man.output(out / "grid.g5t1");
  man.output(out / "labels.csv");
  man.write(out);
  std::cout << "wrote " << (out / "grid.g5t1").string() << " and labels.csv\n";
  return kExitOk;
}

struct TrainFlags {
  std::string input, config, ablate = "none";
  std::vector<std::string> sets;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

int cmd_train(const std::vector<std::string>& args, const TrainFlags& fl, const fs::path& out) {
  require_file(fl.input, "input grid");
  trainkit::TrainConfig cfg;
  if (!fl.config.empty()) apply_config_file(cfg, fl.config);
  for (const auto& kv : fl.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got " + kv);
    try {
      trainkit::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  try {
    cfg.apply(trainkit::parse_ablation(fl.ablate));
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (fl.epochs) {
    cfg.epochs = *fl.epochs;
    cfg.warmup_epochs = std::min(cfg.warmup_epochs, cfg.epochs);
  }
  cfg.seed = resolve_seed(fl.seed, cfg.seed);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const auto grid = gridio::load_grid5d(fl.input);
  const auto data = prepare(grid);
  ensure_dir(out);
  Manifest man("train", args);
  man.seed(cfg.seed);
  man.config(ordered_json::parse(trainkit::config_to_json(cfg)));
  man.input(fl.input);

  auto res = trainkit::train(data, cfg, [&](const trainkit::EpochSummary& s) {
    if (!fl.quiet) std::fprintf(stderr, "epoch %d  loss %.6g  (%.2fs)\n", s.epoch, s.mean_total, s.seconds);
  });
  for (const auto& msg : res.incidents) std::cerr << "warning: " << msg << '\n';
  trainkit::save_checkpoint(res.model, (out / "model.adtc").string());
  trainkit::write_history_csv((out / "history.csv").string(), cfg, res.history);
  man.output(out / "model.adtc");
  man.output(out / "history.csv");
  if (cfg.use_adv) {
    trainkit::write_diagnostics_csv((out / "subspace.csv").string(), res.diagnostics);
    man.output(out / "subspace.csv");
  }
  man.write(out);
  return kExitOk;
}

struct EvalFlags {
  std::string checkpoint, input, labels;
  bool refine = false, dump_affinity = false, stored_coeff = false;
};

ordered_json report_json(const clustval::MetricReport& r) { return ordered_json::parse(clustval::to_json(r)); }

int cmd_eval(const std::vector<std::string>& args, const EvalFlags& fl, const fs::path& out) {
  require_file(fl.checkpoint, "checkpoint");
  require_file(fl.input, "input grid");
  if (!fl.labels.empty()) require_file(fl.labels, "labels file");
  auto loaded = trainkit::load_checkpoint(fl.checkpoint);
  for (const auto& w : loaded.warnings) std::cerr << "warning: " << w << '\n';
  const auto& model = loaded.model;
  const auto grid = gridio::load_grid5d(fl.input);
  const auto data = prepare(grid);

  ensure_dir(out);
  Manifest man("eval", args);
  man.seed(model.cfg.seed);
  man.config(ordered_json::parse(trainkit::config_to_json(model.cfg)));
  man.input(fl.checkpoint);
  man.input(fl.input);

  const auto inf = trainkit::infer_labels(model, data, fl.refine,
                                          fl.stored_coeff ? trainkit::CoeffSource::Stored : trainkit::CoeffSource::Fit);
  std::optional<std::vector<int>> truth;
  if (!fl.labels.empty()) {
    man.input(fl.labels);
    truth = gridio::read_labels_csv(fl.labels, grid.B(), grid.T());
  }
  const auto* tp = truth ? &*truth : nullptr;

  ordered_json report;
  std::ofstream csv(out / "metrics.csv");
  csv << clustval::csv_header() << '\n';
  auto block = [&](const std::string& tag, const std::vector<int>& labels) {
    auto r = clustval::evaluate(inf.z, labels, tp);
    report[tag] = report_json(r);
    csv << clustval::to_csv_row(tag, r) << '\n';
  };
  block("argmax", inf.labels);
  if (inf.refined) block("refined", *inf.refined);
  report["K"] = model.cfg.K;
  report["n_sequences"] = grid.B();
  report["steps"] = grid.T();
  {
    std::ofstream f(out / "metrics.json");
    f << report.dump(2) << '\n';
  }
  csv.close();

  std::ofstream lf(out / "predicted_labels.csv");
  lf << "b,t,label" << (inf.refined ? ",refined_label" : "") << '\n';
  for (std::int64_t b = 0; b < grid.B(); ++b)
    for (std::int64_t t = 0; t < grid.T(); ++t) {
      const auto i = static_cast<std::size_t>(b * grid.T() + t);
      lf << b << ',' << t << ',' << inf.labels[i];
      if (inf.refined) lf << ',' << (*inf.refined)[i];
      lf << '\n';
    }
  lf.close();
  for (const char* name : {"metrics.json", "metrics.csv", "predicted_labels.csv"}) man.output(out / name);

  if (fl.dump_affinity) {
    if (!fl.refine) throw UsageError("--dump-affinity needs --refine");
    for (std::size_t b = 0; b < inf.coeff.size(); ++b) {
      const auto p = out / ("affinity_" + std::to_string(b) + ".csv");
      write_matrix_csv(p, selfexpr::build_affinity(inf.coeff[b]));
      man.output(p);
    }
  }
  man.write(out);
  std::cout << report.dump(2) << '\n';
  return kExitOk;
}

int cmd_elbow(const std::vector<std::string>& args, const std::string& input, int k_min, int k_max, int restarts,
              std::optional<std::uint64_t> seed_flag, const fs::path& out) {
  require_file(input, "input grid");
  const std::uint64_t seed = resolve_seed(seed_flag, 0);
  const auto grid = gridio::load_grid5d(input);
  const auto data = prepare(grid);
  const std::int64_t n = grid.B() * grid.T(), d = grid.H() * grid.W() * grid.C();
  if (k_max - k_min + 1 < 3) throw UsageError("k range must contain at least 3 values");
  if (k_min < 1 || k_max > n - 1) throw UsageError("k range must lie in [1, " + std::to_string(n - 1) + "]");
  MatD points(n, d);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) points(i, j) = data[i * d + j];

  ensure_dir(out);
  Manifest man("elbow", args);
  man.seed(seed);
  man.config({{"k_min", k_min}, {"k_max", k_max}, {"restarts", restarts}});
  man.input(input);
  const auto res = clustval::elbow_select_k(points, k_min, k_max, seed, restarts);
  std::ofstream f(out / "elbow.csv");
  f << "k,sse\n";
  char buf[40];
  for (std::size_t i = 0; i < res.ks.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", res.sse[i]);
    f << res.ks[i] << ',' << buf << '\n';
  }
  f.close();
  man.output(out / "elbow.csv");
  man.write(out);
  std::cout << res.k << '\n';
  if (res.no_elbow) std::cerr << "warning: SSE curve has no elbow; reporting the smallest interior k\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Spatiotemporal deep clustering toolkit"};
  app.require_subcommand(1);
  std::string out = "run";

  auto* synth = app.add_subcommand("synth", "Generate a labelled union-of-subspaces grid");
  int K = 3, B = 8, T = 24, H = 32, W = 32, C = 3, r = 4, d_lat = 32;
  double p_stay = 0.92, snr = 20.0, angle = 60.0;
  std::optional<std::uint64_t> seed;
  synth->add_option("--K", K, "Number of subspaces")->capture_default_str();
  synth->add_option("--B", B, "Sequences")->capture_default_str();
  synth->add_option("--T", T, "Time steps")->capture_default_str();
  synth->add_option("--H", H)->capture_default_str();
  synth->add_option("--W", W)->capture_default_str();
  synth->add_option("--C", C)->capture_default_str();
  synth->add_option("--r", r, "Subspace rank")->capture_default_str();
  synth->add_option("--d-lat", d_lat, "Latent dimension")->capture_default_str();
  synth->add_option("--p-stay", p_stay, "Markov self-transition probability")->capture_default_str();
  synth->add_option("--snr", snr, "Signal-to-noise ratio in dB")->capture_default_str();
  synth->add_option("--min-angle", angle, "Minimum principal angle in degrees")->capture_default_str();
  synth->add_option("--seed", seed, "Seed (falls back to ADATSC_SEED)");
  synth->add_option("-o,--out", out, "Run directory")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train a model on a grid");
  TrainFlags tf;
  train->add_option("-i,--input", tf.input, "G5T1 grid")->required();
  train->add_option("--config", tf.config, "key=value config file");
  train->add_option("--set", tf.sets, "Config override key=value (repeatable)");
  train->add_option("--epochs", tf.epochs, "Override epochs");
  train->add_option("--ablate", tf.ablate, "none|sel|cnn-lstm|gat")->capture_default_str();
  train->add_option("--seed", tf.seed, "Seed (falls back to ADATSC_SEED)");
  train->add_flag("-q,--quiet", tf.quiet, "No per-epoch log");
  train->add_option("-o,--out", out, "Run directory")->capture_default_str();

  auto* eval = app.add_subcommand("eval", "Label a grid and report metrics");
  EvalFlags ef;
  eval->add_option("-c,--checkpoint", ef.checkpoint, "Model checkpoint")->required();
  eval->add_option("-i,--input", ef.input, "G5T1 grid")->required();
  eval->add_option("-l,--labels", ef.labels, "Ground-truth labels CSV (b,t,label)");
  eval->add_flag("--refine", ef.refine, "Spectral refinement from self-expression");
  eval->add_flag("--stored-coeff", ef.stored_coeff, "Refine with the trained coefficients (training grid only)");
  eval->add_flag("--dump-affinity", ef.dump_affinity, "Write each sequence's affinity matrix as CSV");
  eval->add_option("-o,--out", out, "Run directory")->capture_default_str();

  auto* elbow = app.add_subcommand("elbow", "Choose K from the k-means SSE curve");
  std::string elbow_input;
  int k_min = 2, k_max = 8, restarts = 10;
  elbow->add_option("-i,--input", elbow_input, "G5T1 grid")->required();
  elbow->add_option("--k-min", k_min)->capture_default_str();
  elbow->add_option("--k-max", k_max)->capture_default_str();
  elbow->add_option("--restarts", restarts)->capture_default_str();
  elbow->add_option("--seed", seed, "Seed (falls back to ADATSC_SEED)");
  elbow->add_option("-o,--out", out, "Run directory")->capture_default_str();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(args, K, B, T, H, W, C, r, d_lat, p_stay, snr, angle, seed, out);
    if (*train) return cmd_train(args, tf, out);
    if (*eval) return cmd_eval(args, ef, out);
    if (*elbow) return cmd_elbow(args, elbow_input, k_min, k_max, restarts, seed, out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const trainkit::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitUsage;
}

}  // namespace adatsc::cli
