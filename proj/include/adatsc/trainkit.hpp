#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "adatsc/bitgat.hpp"
#include "adatsc/decluster.hpp"
#include "adatsc/linalg.hpp"
#include "adatsc/params.hpp"
#include "adatsc/selfexpr.hpp"
#include "adatsc/stcoder.hpp"
#include "adatsc/subgan.hpp"

// Composite objective, alternating training loop, inference and checkpoints.
namespace adatsc::trainkit {

using ad::Var;

enum class Ablation { None, Sel, CnnLstm, Gat };
Ablation parse_ablation(const std::string& name);  // "none", "sel", "cnn-lstm", "gat"
std::string ablation_name(Ablation a);

struct TrainConfig {
  int K = 3;
  stcoder::EncoderConfig encoder;
  bitgat::BitgatConfig bitgat;
  selfexpr::SEConfig se;
  subgan::SubGanConfig gan;
  decluster::TauSchedule tau;

  double lambda_bal = 1.0;
  double lambda_se = 0.1;   // weight of the whole SE loss in the objective
  double lambda_adv = 0.1;
  double ramp_fraction = 0.2;  // lambda_bal reaches its value after this share of epochs

  int epochs = 100;
  int warmup_epochs = 10;  // SE, clustering and adversarial terms start here
  int batch_size = 4;
  double lr_generator = 1e-3;
  double lr_discriminator = 1e-3;
  double coeff_init = 0.05;  // raw SE coefficients start at +-(threshold + U(0, coeff_init))
  int kmeans_restarts = 10;
  int coeff_fit_steps = 300;   // per-sequence C fitting for unseen sequences
  double coeff_fit_lr = 1e-2;
  std::uint64_t seed = 0;

  bool use_bitgat = true;
  bool use_se = true;
  bool use_adv = true;
  bool pool_before_bitgat = false;  // attention over one mean-pooled node per frame

  void validate() const;
  void apply(Ablation a);
  double lambda_bal_at(int epoch) const;
};

std::string config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const std::string& text);
std::uint64_t config_hash(const TrainConfig& cfg);
// Sets one field from its flat key (e.g. "lambda_bal", "encoder.filters" = "8,16,24,32").
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);

struct LossParts {
  double rec = 0, kl = 0, bal = 0, mi = 0, se = 0, adv = 0;
};

struct LossWeights {
  double bal = 0, se = 0, adv = 0;
};

// rec + kl + bal_w (bal + mi) + se_w se + adv_w adv. Throws NumericError naming a non-finite part.
double total_generator_loss(const LossParts& parts, const LossWeights& w);

// Concats [z_t | z_se_t | mean_t z_se | zbar] per step, projects with (4D, F) weights and
// broadcasts over the top grid: -> (B, T, top_h, top_w, F). An undefined z_se counts as zeros.
template <typename T>
Var<T> bottleneck_fuse(const Var<T>& z, const Var<T>& z_se, const Var<T>& zbar, const Var<T>& weight,
                       const Var<T>& bias, std::int64_t top_h, std::int64_t top_w);

struct Model {
  TrainConfig cfg;
  int channels = 0;
  std::int64_t steps = 0, height = 0, width = 0;
  int n_sequences = 0;  // rows of the per-sequence coefficient table

  ParamStore<float> params;
  stcoder::Encoder<float> encoder;
  stcoder::Decoder<float> decoder;
  bitgat::Bitgat<float> gat;
  decluster::ClusterHead<float> head;
  Var<float> coeff_raw;  // (n_sequences, T, T)
  subgan::SubspaceBank<float> bank;
  Var<float> fuse_w, fuse_b;

  int epoch = 0;  // completed epochs
  bool centers_ready = false;

  static Model create(const TrainConfig& cfg, int channels, std::int64_t steps, std::int64_t height,
                      std::int64_t width, int n_sequences);
  double tau() const { return decluster::anneal_tau(epoch, cfg.tau); }
  // Parameter names updated by the discriminator.
  static bool is_discriminator_param(const std::string& name);
};

struct ForwardPass {
  Var<float> x_hat;   // (B,T,H,W,C), undefined when the decoder was skipped
  Var<float> z;       // (B,T,D)
  Var<float> zbar;    // (B,D)
  Var<float> z_se;    // (B,T,D), undefined without SE
  Var<float> coeff;   // (B,T,T), undefined without SE
  double attn_entropy = 0.0;
};

// seq holds the coefficient-table row of every sequence in x; empty disables SE.
ForwardPass forward(const Model& m, const Var<float>& x, const std::vector<std::int64_t>& seq, bool decode,
                    bool keep_attention = false);

struct StepRecord {
  int epoch = 0;
  int step = 0;
  LossParts parts;
  double total = 0;
  double disc = 0;
  bool disc_skipped = true;
  bool gen_skipped = false;
  double tau = 0, lambda_bal = 0;
  double attn_entropy = 0;
};

struct DiagnosticRow {
  int epoch = 0;
  subgan::Diagnostics d;
};

class Trainer {
 public:
  explicit Trainer(Model& model);

  struct GeneratorResult {
    StepRecord record;
    std::vector<subgan::ClusterBatch<float>> latents;  // detached reals/fakes for the discriminator
  };
  // x is (b,T,H,W,C); seq are coefficient rows. Clustering terms need centers_ready.
  GeneratorResult generator_step(const Tensor<float>& x, const std::vector<std::int64_t>& seq, Rng& rng);
  // One step on L_D over the bases. Returns nullopt when no cluster had latents.
  std::optional<double> discriminator_step(const std::vector<subgan::ClusterBatch<float>>& latents);

  void set_learning_rates(double generator, double discriminator);
  std::vector<std::string>& incidents() { return incidents_; }

 private:
  Model& m_;
  Adam<float> gen_opt_, disc_opt_;
  std::vector<std::string> incidents_;
};

struct TrainResult {
  Model model;
  std::vector<StepRecord> history;
  std::vector<DiagnosticRow> diagnostics;
  std::vector<std::string> incidents;
};

struct EpochSummary {
  int epoch = 0;
  double mean_total = 0;
  double seconds = 0;
  const Model* model = nullptr;  // state after the epoch
};

// data is (B,T,H,W,C), already imputed and normalised. Each sequence gets its own coefficient row.
TrainResult train(const Tensor<float>& data, const TrainConfig& cfg,
                  const std::function<void(const EpochSummary&)>& on_epoch = {});
// Continues from an existing model until cfg.epochs total epochs.
TrainResult train(Model model, const Tensor<float>& data,
                  const std::function<void(const EpochSummary&)>& on_epoch = {});

std::string history_header(const TrainConfig& cfg);
std::string history_row(const TrainConfig& cfg, const StepRecord& r);
void write_history_csv(const std::string& path, const TrainConfig& cfg, const std::vector<StepRecord>& history);
void write_diagnostics_csv(const std::string& path, const std::vector<DiagnosticRow>& rows);

enum class CoeffSource { Fit, Stored };

struct Inference {
  MatD z;                 // (B*T, D)
  MatD q, q_tilde;        // (B*T, K)
  std::vector<int> labels;
  std::optional<std::vector<int>> refined;  // per sequence, renamed to agree with labels
  std::vector<MatD> coeff;                  // (T,T) per sequence when refining
};

// Stored uses the model's coefficient rows (data must be the training set); Fit solves for C per
// sequence with the embeddings held fixed.
Inference infer_labels(const Model& m, const Tensor<float>& data, bool refine,
                       CoeffSource source = CoeffSource::Fit);

// Renames labels to maximise agreement with a reference labelling (K! search, K <= 8).
std::vector<int> align_labels(const std::vector<int>& labels, const std::vector<int>& reference, int K);

class CheckpointError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Model& m, const std::string& path);
struct LoadedModel {
  Model model;
  std::vector<std::string> warnings;
};
// Warns when `expected` is given and its hash differs from the stored config.
LoadedModel load_checkpoint(const std::string& path, const TrainConfig* expected = nullptr);

}  // namespace adatsc::trainkit
