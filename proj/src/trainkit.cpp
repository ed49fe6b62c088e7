#include "adatsc/trainkit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace adatsc::trainkit {

using namespace adatsc::ad;
using nlohmann::ordered_json;

Ablation parse_ablation(const std::string& name) {
  if (name == "none") return Ablation::None;
  if (name == "sel") return Ablation::Sel;
  if (name == "cnn-lstm") return Ablation::CnnLstm;
  if (name == "gat") return Ablation::Gat;
  throw std::invalid_argument("unknown ablation '" + name + "' (none|sel|cnn-lstm|gat)");
}

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::Sel: return "sel";
    case Ablation::CnnLstm: return "cnn-lstm";
    case Ablation::Gat: return "gat";
    default: return "none";
  }
}

void TrainConfig::validate() const {
  if (K < 2) throw std::invalid_argument("K must be >= 2");
  encoder.validate();
  if (lambda_bal < 0 || lambda_se < 0 || lambda_adv < 0) throw std::invalid_argument("loss weights must be >= 0");
  if (se.threshold < 0 || se.sparsity < 0 || !(se.sigma_t > 0)) throw std::invalid_argument("bad self-expression settings");
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (warmup_epochs < 0 || warmup_epochs > epochs) throw std::invalid_argument("warmup_epochs must lie in [0, epochs]");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (lr_generator < 0 || lr_discriminator < 0) throw std::invalid_argument("learning rates must be >= 0");
  if (ramp_fraction < 0 || ramp_fraction > 1) throw std::invalid_argument("ramp_fraction must lie in [0, 1]");
  if (bitgat.heads < 1 || bitgat.D < 2) throw std::invalid_argument("bad attention settings");
  if (gan.rank < 1 || gan.rank >= bitgat.D) throw std::invalid_argument("subspace rank must lie in [1, D)");
  if (gan.reals_per_cluster < 2) throw std::invalid_argument("reals_per_cluster must be >= 2");
  if (coeff_init < 0) throw std::invalid_argument("coeff_init must be >= 0");
  if (kmeans_restarts < 1) throw std::invalid_argument("kmeans_restarts must be >= 1");
}

void TrainConfig::apply(Ablation a) {
  switch (a) {
    case Ablation::Sel:
      use_bitgat = false;
      use_adv = false;
      use_se = true;
      break;
    case Ablation::CnnLstm: encoder.variant = stcoder::EncoderVariant::CnnThenLstm; break;
    case Ablation::Gat: pool_before_bitgat = true; break;
    case Ablation::None: break;
  }
}

double TrainConfig::lambda_bal_at(int epoch) const {
  const double ramp = ramp_fraction * epochs;
  if (ramp <= 0) return lambda_bal;
  return lambda_bal * std::min(1.0, epoch / ramp);
}

namespace {

ordered_json to_json_obj(const TrainConfig& c) {
  ordered_json j;
  j["K"] = c.K;
  j["encoder"] = {{"filters", c.encoder.filters},
                  {"patch_h", c.encoder.patch_h},
                  {"patch_w", c.encoder.patch_w},
                  {"kernel", c.encoder.kernel},
                  {"variant", c.encoder.variant == stcoder::EncoderVariant::ConvLstm ? "conv-lstm" : "cnn-then-lstm"},
                  {"forget_bias", c.encoder.forget_bias}};
  j["bitgat"] = {{"heads", c.bitgat.heads}, {"d_head", c.bitgat.d_head}, {"D", c.bitgat.D}};
  j["se"] = {{"threshold", c.se.threshold},
             {"exclude_self", c.se.exclude_self},
             {"sigma_t", c.se.sigma_t},
             {"sparsity", c.se.sparsity}};
  j["gan"] = {{"rank", c.gan.rank},
              {"margin", c.gan.margin},
              {"ortho_weight", c.gan.ortho_weight},
              {"cross_weight", c.gan.cross_weight},
              {"reals_per_cluster", c.gan.reals_per_cluster},
              {"min_responsibility", c.gan.min_responsibility}};
  j["tau"] = {{"start", c.tau.start}, {"end", c.tau.end}, {"time_constant", c.tau.time_constant}};
  j["lambda_bal"] = c.lambda_bal;
  j["lambda_se"] = c.lambda_se;
  j["lambda_adv"] = c.lambda_adv;
  j["ramp_fraction"] = c.ramp_fraction;
  j["epochs"] = c.epochs;
  j["warmup_epochs"] = c.warmup_epochs;
  j["batch_size"] = c.batch_size;
  j["lr_generator"] = c.lr_generator;
  j["lr_discriminator"] = c.lr_discriminator;
  j["coeff_init"] = c.coeff_init;
  j["kmeans_restarts"] = c.kmeans_restarts;
  j["coeff_fit_steps"] = c.coeff_fit_steps;
  j["coeff_fit_lr"] = c.coeff_fit_lr;
  j["seed"] = c.seed;
  j["use_bitgat"] = c.use_bitgat;
  j["use_se"] = c.use_se;
  j["use_adv"] = c.use_adv;
  j["pool_before_bitgat"] = c.pool_before_bitgat;
  return j;
}

TrainConfig from_json_obj(const ordered_json& j) {
  TrainConfig c;
  const auto& e = j.at("encoder");
  c.K = j.at("K").get<int>();
  c.encoder.filters = e.at("filters").get<std::vector<int>>();
  c.encoder.patch_h = e.at("patch_h").get<int>();
  c.encoder.patch_w = e.at("patch_w").get<int>();
  c.encoder.kernel = e.at("kernel").get<int>();
  const auto variant = e.at("variant").get<std::string>();
  if (variant == "conv-lstm")
    c.encoder.variant = stcoder::EncoderVariant::ConvLstm;
  else if (variant == "cnn-then-lstm")
    c.encoder.variant = stcoder::EncoderVariant::CnnThenLstm;
  else
    throw std::invalid_argument("unknown encoder variant " + variant);
  c.encoder.forget_bias = e.at("forget_bias").get<double>();
  const auto& g = j.at("bitgat");
  c.bitgat.heads = g.at("heads").get<int>();
  c.bitgat.d_head = g.at("d_head").get<int>();
  c.bitgat.D = g.at("D").get<int>();
  const auto& s = j.at("se");
  c.se.threshold = s.at("threshold").get<double>();
  c.se.exclude_self = s.at("exclude_self").get<bool>();
  c.se.sigma_t = s.at("sigma_t").get<double>();
  c.se.sparsity = s.at("sparsity").get<double>();
  const auto& a = j.at("gan");
  c.gan.rank = a.at("rank").get<int>();
  c.gan.margin = a.at("margin").get<double>();
  c.gan.ortho_weight = a.at("ortho_weight").get<double>();
  c.gan.cross_weight = a.at("cross_weight").get<double>();
  c.gan.reals_per_cluster = a.at("reals_per_cluster").get<int>();
  c.gan.min_responsibility = a.at("min_responsibility").get<double>();
  const auto& t = j.at("tau");
  c.tau.start = t.at("start").get<double>();
  c.tau.end = t.at("end").get<double>();
  c.tau.time_constant = t.at("time_constant").get<double>();
  c.lambda_bal = j.at("lambda_bal").get<double>();
  c.lambda_se = j.at("lambda_se").get<double>();
  c.lambda_adv = j.at("lambda_adv").get<double>();
  c.ramp_fraction = j.at("ramp_fraction").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.warmup_epochs = j.at("warmup_epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.lr_generator = j.at("lr_generator").get<double>();
  c.lr_discriminator = j.at("lr_discriminator").get<double>();
  c.coeff_init = j.at("coeff_init").get<double>();
  c.kmeans_restarts = j.at("kmeans_restarts").get<int>();
  c.coeff_fit_steps = j.at("coeff_fit_steps").get<int>();
  c.coeff_fit_lr = j.at("coeff_fit_lr").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.use_bitgat = j.at("use_bitgat").get<bool>();
  c.use_se = j.at("use_se").get<bool>();
  c.use_adv = j.at("use_adv").get<bool>();
  c.pool_before_bitgat = j.at("pool_before_bitgat").get<bool>();
  return c;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r\n") - a + 1);
}

// Parses `text` into the JSON type of `slot`.
ordered_json parse_like(const ordered_json& slot, const std::string& key, const std::string& text) {
  const std::string v = trim(text);
  try {
    std::size_t used = 0;
    if (slot.is_boolean()) {
      if (v == "true" || v == "1") return true;
      if (v == "false" || v == "0") return false;
      throw std::invalid_argument("");
    }
    if (slot.is_number_unsigned()) {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("");
      const auto n = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument("");
      return n;
    }
    if (slot.is_number_integer()) {
      const auto n = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument("");
      return n;
    }
    if (slot.is_number()) {
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument("");
      return d;
    }
    if (slot.is_string()) return v;
    if (slot.is_array()) {
      ordered_json arr = ordered_json::array();
      std::size_t start = 0;
      while (start <= v.size()) {
        const auto comma = v.find(',', start);
        const auto item = trim(v.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
        const int n = std::stoi(item, &used);
        if (used != item.size()) throw std::invalid_argument("");
        arr.push_back(n);
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
      return arr;
    }
  } catch (const std::logic_error&) {
  }
  throw std::invalid_argument("bad value '" + text + "' for config key " + key);
}

}  // namespace

std::string config_to_json(const TrainConfig& cfg) { return to_json_obj(cfg).dump(); }

TrainConfig config_from_json(const std::string& text) {
  try {
    return from_json_obj(ordered_json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("bad config JSON: ") + e.what());
  }
}

std::uint64_t config_hash(const TrainConfig& cfg) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char ch : config_to_json(cfg)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  ordered_json j = to_json_obj(cfg);
  ordered_json* slot = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!slot->is_object() || !slot->contains(part)) throw std::invalid_argument("unknown config key " + key);
    slot = &(*slot)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (slot->is_object()) throw std::invalid_argument("config key " + key + " names a group");
  *slot = parse_like(*slot, key, value);
  cfg = from_json_obj(j);
}

double total_generator_loss(const LossParts& p, const LossWeights& w) {
  const std::pair<const char*, double> named[] = {{"L_rec", p.rec}, {"L_kl", p.kl}, {"L_bal", p.bal},
                                                  {"L_mi", p.mi},   {"L_se", p.se}, {"L_adv", p.adv}};
  for (const auto& [name, v] : named)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss term ") + name);
  return p.rec + p.kl + w.bal * (p.bal + p.mi) + w.se * p.se + w.adv * p.adv;
}

template <typename T>
Var<T> bottleneck_fuse(const Var<T>& z, const Var<T>& z_se, const Var<T>& zbar, const Var<T>& weight,
                       const Var<T>& bias, std::int64_t top_h, std::int64_t top_w) {
  if (z.rank() != 3 || zbar.rank() != 2 || zbar.dim(0) != z.dim(0) || zbar.dim(1) != z.dim(2))
    throw ShapeError("bottleneck_fuse: z " + to_string(z.shape()) + " zbar " + to_string(zbar.shape()));
  const std::int64_t B = z.dim(0), S = z.dim(1), D = z.dim(2);
  Var<T> se = z_se;
  if (!se.defined()) {
    se = Var<T>::constant(Tensor<T>(z.shape()));
  } else if (se.shape() != z.shape()) {
    throw ShapeError("bottleneck_fuse: z_se " + to_string(se.shape()) + " vs z " + to_string(z.shape()));
  }
  const Shape seq{B, S, D};
  auto se_mean = broadcast_to(mean_axis(se, 1, true), seq);
  auto global = broadcast_to(reshape(zbar, Shape{B, 1, D}), seq);
  auto cat = concat(std::vector<Var<T>>{z, se, se_mean, global}, -1);
  if (weight.rank() != 2 || weight.dim(0) != 4 * D)
    throw ShapeError("bottleneck_fuse: projection " + to_string(weight.shape()) + " needs " + std::to_string(4 * D) +
                     " input rows");
  auto proj = linear(cat, weight, bias);  // (B,S,F)
  const std::int64_t F = proj.dim(2);
  return broadcast_to(reshape(proj, Shape{B, S, 1, 1, F}), Shape{B, S, top_h, top_w, F});
}

template Var<float> bottleneck_fuse(const Var<float>&, const Var<float>&, const Var<float>&, const Var<float>&,
                                    const Var<float>&, std::int64_t, std::int64_t);
template Var<double> bottleneck_fuse(const Var<double>&, const Var<double>&, const Var<double>&, const Var<double>&,
                                     const Var<double>&, std::int64_t, std::int64_t);

namespace {

// Stream tags for Rng::derive.
enum : std::uint64_t {
  kInitStream = 100,
  kCoeffStream = 101,
  kShuffleStream = 1000,
  kFakeStream = 2000,
  kDiagStream = 3000,
  kKMeansStream = 4000,
  kFitStream = 5000,
  kSpectralStream = 6000,
};

Tensor<float> init_coeff(std::int64_t rows, std::int64_t steps, const TrainConfig& cfg, Rng& rng) {
  Tensor<float> c(Shape{rows, steps, steps});
  for (auto& v : c.values()) {
    const double mag = cfg.se.threshold + cfg.coeff_init * rng.uniform();
    v = static_cast<float>(rng.uniform() < 0.5 ? -mag : mag);
  }
  return c;
}

}  // namespace

Model Model::create(const TrainConfig& cfg, int channels, std::int64_t steps, std::int64_t height,
                    std::int64_t width, int n_sequences) {
  cfg.validate();
  if (channels < 1 || steps < 1 || height < 1 || width < 1 || n_sequences < 1)
    throw std::invalid_argument("model dimensions must be positive");
  Model m;
  m.cfg = cfg;
  m.channels = channels;
  m.steps = steps;
  m.height = height;
  m.width = width;
  m.n_sequences = n_sequences;
  Rng rng = Rng::derive(cfg.seed, kInitStream);
  const int top = cfg.encoder.filters.back(), D = cfg.bitgat.D;
  m.encoder = stcoder::Encoder<float>::create(m.params, "encoder", cfg.encoder, channels, rng);
  m.gat = bitgat::Bitgat<float>::create(m.params, "bitgat", cfg.bitgat, top, rng);
  m.fuse_w = m.params.add_glorot("fuse.w", Shape{4 * D, top}, 4 * D, top, rng);
  m.fuse_b = m.params.add_fill("fuse.b", Shape{top}, 0.0f);
  m.decoder = stcoder::Decoder<float>::create(m.params, "decoder", cfg.encoder, channels, rng);
  m.head = decluster::ClusterHead<float>::create(m.params, "cluster", cfg.K, D);
  Rng crng = Rng::derive(cfg.seed, kCoeffStream);
  m.coeff_raw = m.params.add("selfexpr.C", init_coeff(n_sequences, steps, cfg, crng));
  m.bank = subgan::SubspaceBank<float>::create(m.params, "subgan", cfg.K, D, cfg.gan.rank, rng);
  return m;
}

bool Model::is_discriminator_param(const std::string& name) { return name.rfind("subgan.", 0) == 0; }

ForwardPass forward(const Model& m, const Var<float>& x, const std::vector<std::int64_t>& seq, bool decode,
                    bool keep_attention) {
  ForwardPass fp;
  auto enc = m.encoder.forward(x);
  auto nodes = enc.nodes;
  if (m.cfg.pool_before_bitgat) nodes = mean_axis(nodes, 2, true);
  if (m.cfg.use_bitgat) {
    auto out = bitgat::bitgat_forward(nodes, m.gat, keep_attention);
    fp.z = out.z;
    fp.zbar = out.zbar;
    if (keep_attention)
      fp.attn_entropy = 0.5 * (bitgat::attention_entropy(out.attn_fwd) + bitgat::attention_entropy(out.attn_bwd));
  } else {
    fp.z = bitgat::pool_nodes(nodes, m.gat);
    fp.zbar = mean_axis(fp.z, 1);
  }
  if (!seq.empty()) {
    if (static_cast<std::int64_t>(seq.size()) != x.dim(0)) throw ShapeError("one coefficient row per sequence");
    fp.coeff = selfexpr::effective_coeff(gather(m.coeff_raw, 0, seq), m.cfg.se);
    fp.z_se = selfexpr::se_reconstruct(fp.coeff, fp.z);
  }
  if (decode) {
    const auto& top = enc.levels.back();
    auto fused = bottleneck_fuse(fp.z, fp.z_se, fp.zbar, m.fuse_w, m.fuse_b, top.dim(2), top.dim(3));
    fp.x_hat = m.decoder.forward(add(top, fused), enc.levels, enc.height, enc.width);
  }
  return fp;
}

namespace {

std::vector<Var<float>> partition(const ParamStore<float>& ps, bool discriminator) {
  std::vector<Var<float>> out;
  for (const auto& e : ps.entries())
    if (Model::is_discriminator_param(e.name) == discriminator) out.push_back(e.var);
  return out;
}

Tensor<float> rows_of(const Tensor<float>& data, const std::vector<std::int64_t>& idx) {
  Shape s = data.shape();
  const std::int64_t per = data.size() / s[0];
  s[0] = static_cast<std::int64_t>(idx.size());
  Tensor<float> out(s);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(data.data() + idx[i] * per, per, out.data() + static_cast<std::int64_t>(i) * per);
  return out;
}

}  // namespace

Trainer::Trainer(Model& model)
    : m_(model),
      gen_opt_(partition(model.params, false), {model.cfg.lr_generator}),
      disc_opt_(partition(model.params, true), {model.cfg.lr_discriminator}) {}

void Trainer::set_learning_rates(double generator, double discriminator) {
  gen_opt_.set_lr(generator);
  disc_opt_.set_lr(discriminator);
}

Trainer::GeneratorResult Trainer::generator_step(const Tensor<float>& x, const std::vector<std::int64_t>& seq,
                                                 Rng& rng) {
  const auto& cfg = m_.cfg;
  m_.params.zero_grad();
  GeneratorResult res;
  auto& rec = res.record;
  rec.epoch = m_.epoch;
  rec.tau = m_.tau();
  rec.lambda_bal = cfg.lambda_bal_at(m_.epoch);

  const bool clustering = m_.centers_ready;
  const bool se_on = cfg.use_se && m_.epoch >= cfg.warmup_epochs;
  const auto xv = Var<float>::constant(x);
  auto fp = forward(m_, xv, se_on ? seq : std::vector<std::int64_t>{}, true, cfg.use_bitgat);
  rec.attn_entropy = fp.attn_entropy;

  const std::int64_t B = x.dim(0), S = x.dim(1), D = fp.z.dim(2);
  const auto zero = Var<float>::constant(Tensor<float>::scalar(0.0f));
  Var<float> l_rec = stcoder::reconstruction_loss(xv, fp.x_hat);
  Var<float> l_kl = zero, l_bal = zero, l_mi = zero, l_se = zero, l_adv = zero;

  Var<float> q_tilde;
  if (clustering) {
    auto zf = reshape(fp.z, Shape{B * S, D});
    auto logits = decluster::student_t_logits(zf, m_.head);
    auto q = softmax_last(logits);
    q_tilde = decluster::temper_logits(logits, static_cast<float>(rec.tau));
    l_kl = decluster::kl_cluster_loss(decluster::target_distribution(q.value()), q);
    l_bal = decluster::balance_loss(q_tilde);
    l_mi = decluster::mi_redundancy_loss(q_tilde);

    if (cfg.use_adv) {
      std::vector<subgan::ClusterBatch<float>> batches;
      for (const auto& rs : subgan::select_real_latents(q_tilde.value(), cfg.gan.reals_per_cluster,
                                                        cfg.gan.min_responsibility)) {
        subgan::ClusterBatch<float> b;
        b.cluster = rs.cluster;
        b.reals = gather(zf, 0, rs.index);
        b.fakes = subgan::synth_fake_latents(
            b.reals, subgan::mixing_weights(rs.responsibility, cfg.gan.reals_per_cluster, rng));
        res.latents.push_back({b.cluster, Var<float>::constant(b.reals.value()), Var<float>::constant(b.fakes.value())});
        batches.push_back(std::move(b));
      }
      l_adv = subgan::generator_adv_loss(batches, m_.bank).loss;
    }
  }
  if (se_on) {
    Var<float> w;
    if (q_tilde.defined())
      w = selfexpr::affinity_weights(reshape(q_tilde, Shape{B, S, cfg.K}), cfg.se.sigma_t);
    else
      w = Var<float>::constant(Tensor<float>(fp.coeff.shape()));
    l_se = selfexpr::se_loss(fp.z, fp.coeff, w, cfg.se.sparsity);
  }

  rec.parts = {l_rec.item(), l_kl.item(), l_bal.item(), l_mi.item(), l_se.item(), l_adv.item()};
  const LossWeights lw{rec.lambda_bal, cfg.lambda_se, cfg.use_adv ? cfg.lambda_adv : 0.0};
  rec.total = total_generator_loss(rec.parts, lw);

  auto total = add(l_rec, l_kl);
  if (lw.bal != 0) total = add(total, scale(add(l_bal, l_mi), static_cast<float>(lw.bal)));
  if (se_on && lw.se != 0) total = add(total, scale(l_se, static_cast<float>(lw.se)));
  if (clustering && lw.adv != 0) total = add(total, scale(l_adv, static_cast<float>(lw.adv)));
  backward(total);
  if (!gen_opt_.step()) {
    rec.gen_skipped = true;
    incidents_.push_back("epoch " + std::to_string(rec.epoch) + ": non-finite generator gradient, step skipped");
  }
  // Keep the Student-t degrees of freedom positive.
  auto& dof = m_.head.dof.mutable_value();
  dof[0] = std::max(dof[0], 1e-3f);
  m_.params.zero_grad();
  return res;
}

std::optional<double> Trainer::discriminator_step(const std::vector<subgan::ClusterBatch<float>>& latents) {
  m_.params.zero_grad();
  auto res = subgan::discriminator_loss(latents, m_.bank, m_.cfg.gan);
  if (res.skipped) return std::nullopt;
  const double value = res.loss.item();
  if (!std::isfinite(value)) throw NumericError("non-finite loss term L_D");
  backward(res.loss);
  if (!disc_opt_.step()) incidents_.push_back("epoch " + std::to_string(m_.epoch) + ": non-finite discriminator gradient, step skipped");
  m_.params.zero_grad();
  return value;
}

namespace {

MatD embed_all(const Model& m, const Tensor<float>& data) {
  NoGradGuard guard;
  const std::int64_t B = data.dim(0), S = data.dim(1);
  const std::int64_t D = m.cfg.bitgat.D;
  MatD z(B * S, D);
  for (std::int64_t start = 0; start < B; start += m.cfg.batch_size) {
    std::vector<std::int64_t> idx;
    for (std::int64_t b = start; b < std::min(B, start + m.cfg.batch_size); ++b) idx.push_back(b);
    auto fp = forward(m, Var<float>::constant(rows_of(data, idx)), {}, false);
    const auto& v = fp.z.value();
    for (std::int64_t i = 0; i < v.size(); ++i) z(start * S + i / D, i % D) = v[i];
  }
  return z;
}

void init_centers(Model& m, const Tensor<float>& data) {
  const MatD z = embed_all(m, data);
  const auto km = kmeans(z, m.cfg.K, m.cfg.kmeans_restarts, m.cfg.seed ^ kKMeansStream);
  auto& c = m.head.centers.mutable_value();
  for (int k = 0; k < m.cfg.K; ++k)
    for (Eigen::Index d = 0; d < z.cols(); ++d) c[k * z.cols() + d] = static_cast<float>(km.centers(k, d));
  m.centers_ready = true;
}

MatD assignments(const Model& m, const MatD& z, double tau, MatD* tempered) {
  NoGradGuard guard;
  Tensor<float> zt(Shape{z.rows(), z.cols()});
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index d = 0; d < z.cols(); ++d) zt[i * z.cols() + d] = static_cast<float>(z(i, d));
  auto logits = decluster::student_t_logits(Var<float>::constant(zt), m.head);
  auto q = softmax_last(logits).value();
  auto qt = decluster::temper_logits(logits, static_cast<float>(tau)).value();
  const std::int64_t K = q.dim(1);
  MatD out(z.rows(), K);
  if (tempered) tempered->resize(z.rows(), K);
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (std::int64_t k = 0; k < K; ++k) {
      out(i, k) = q[i * K + k];
      if (tempered) (*tempered)(i, k) = qt[i * K + k];
    }
  return out;
}

Tensor<float> to_tensor(const MatD& a) {
  Tensor<float> t(Shape{a.rows(), a.cols()});
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) t[i * a.cols() + j] = static_cast<float>(a(i, j));
  return t;
}

// End-of-epoch subspace diagnostics over the whole training set.
std::vector<subgan::Diagnostics> epoch_diagnostics(const Model& m, const Tensor<float>& data, double tau, int epoch) {
  NoGradGuard guard;
  const MatD z = embed_all(m, data);
  MatD qt;
  assignments(m, z, tau, &qt);
  const auto zv = Var<float>::constant(to_tensor(z));
  Rng rng = Rng::derive(m.cfg.seed, kDiagStream + static_cast<std::uint64_t>(epoch));
  std::vector<subgan::ClusterBatch<float>> batches;
  for (const auto& rs : subgan::select_real_latents(to_tensor(qt), m.cfg.gan.reals_per_cluster,
                                                    m.cfg.gan.min_responsibility)) {
    subgan::ClusterBatch<float> b;
    b.cluster = rs.cluster;
    b.reals = gather(zv, 0, rs.index);
    b.fakes = subgan::synth_fake_latents(b.reals,
                                         subgan::mixing_weights(rs.responsibility, m.cfg.gan.reals_per_cluster, rng));
    batches.push_back(std::move(b));
  }
  return subgan::diagnostics(batches, m.bank);
}

}  // namespace

TrainResult train(const Tensor<float>& data, const TrainConfig& cfg,
                  const std::function<void(const EpochSummary&)>& on_epoch) {
  if (data.rank() != 5) throw ShapeError("train expects (B,T,H,W,C) data, got " + to_string(data.shape()));
  Model m = Model::create(cfg, static_cast<int>(data.dim(4)), data.dim(1), data.dim(2), data.dim(3),
                          static_cast<int>(data.dim(0)));
  return train(std::move(m), data, on_epoch);
}

TrainResult train(Model model, const Tensor<float>& data, const std::function<void(const EpochSummary&)>& on_epoch) {
  TrainResult out{std::move(model), {}, {}, {}};
  Model& m = out.model;
  const auto& cfg = m.cfg;
  if (data.rank() != 5 || data.dim(1) != m.steps || data.dim(4) != m.channels)
    throw ShapeError("training data " + to_string(data.shape()) + " does not match the model");
  if (data.dim(0) != m.n_sequences) throw ShapeError("training data must have one sequence per coefficient row");
  for (float v : data.values())
    if (!std::isfinite(v)) throw NumericError("training data contains non-finite values");

  Trainer trainer(m);
  const std::int64_t B = data.dim(0);
  for (int epoch = m.epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (!m.centers_ready && epoch >= cfg.warmup_epochs) init_centers(m, data);

    std::vector<std::int64_t> order(static_cast<std::size_t>(B));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = Rng::derive(cfg.seed, kShuffleStream + static_cast<std::uint64_t>(epoch));
    for (std::int64_t i = B - 1; i > 0; --i) std::swap(order[i], order[shuffle.below(i + 1)]);
    Rng fake_rng = Rng::derive(cfg.seed, kFakeStream + static_cast<std::uint64_t>(epoch));

    double sum_total = 0;
    int step = 0;
    for (std::int64_t start = 0; start < B; start += cfg.batch_size, ++step) {
      std::vector<std::int64_t> idx(order.begin() + start, order.begin() + std::min(B, start + cfg.batch_size));
      auto res = trainer.generator_step(rows_of(data, idx), idx, fake_rng);
      res.record.step = step;
      if (cfg.use_adv && !res.latents.empty()) {
        if (auto ld = trainer.discriminator_step(res.latents)) {
          res.record.disc = *ld;
          res.record.disc_skipped = false;
        }
      }
      sum_total += res.record.total;
      out.history.push_back(res.record);
    }
    if (cfg.use_adv && m.centers_ready)
      for (const auto& d : epoch_diagnostics(m, data, m.tau(), epoch)) out.diagnostics.push_back({epoch, d});
    m.epoch = epoch + 1;
    if (on_epoch) {
      EpochSummary s;
      s.epoch = epoch;
      s.mean_total = sum_total / std::max(step, 1);
      s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      s.model = &m;
      on_epoch(s);
    }
  }
  out.incidents = trainer.incidents();
  return out;
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string history_header(const TrainConfig& cfg) {
  std::string h = "epoch,step,L_total,L_rec,L_kl,L_bal,L_mi,L_se";
  if (cfg.use_adv) h += ",L_adv,L_D";
  h += ",tau,lambda_bal";
  if (cfg.use_bitgat) h += ",attn_entropy";
  return h;
}

std::string history_row(const TrainConfig& cfg, const StepRecord& r) {
  const auto& p = r.parts;
  std::string s = std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + num(r.total) + "," + num(p.rec) +
                  "," + num(p.kl) + "," + num(p.bal) + "," + num(p.mi) + "," + num(p.se);
  if (cfg.use_adv) s += "," + num(p.adv) + "," + (r.disc_skipped ? std::string() : num(r.disc));
  s += "," + num(r.tau) + "," + num(r.lambda_bal);
  if (cfg.use_bitgat) s += "," + num(r.attn_entropy);
  return s;
}

void write_history_csv(const std::string& path, const TrainConfig& cfg, const std::vector<StepRecord>& history) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << history_header(cfg) << '\n';
  for (const auto& r : history) f << history_row(cfg, r) << '\n';
  if (!f) throw std::runtime_error("write failed for " + path);
}

void write_diagnostics_csv(const std::string& path, const std::vector<DiagnosticRow>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "epoch,k,ortho_err,cross_err,mean_real_E,mean_fake_E\n";
  for (const auto& r : rows)
    f << r.epoch << ',' << r.d.cluster << ',' << num(r.d.ortho_err) << ',' << num(r.d.cross_err) << ','
      << num(r.d.mean_real_energy) << ',' << num(r.d.mean_fake_energy) << '\n';
  if (!f) throw std::runtime_error("write failed for " + path);
}

std::vector<int> align_labels(const std::vector<int>& labels, const std::vector<int>& reference, int K) {
  if (labels.size() != reference.size()) throw std::invalid_argument("align_labels: length mismatch");
  if (K < 1 || K > 8) throw std::invalid_argument("align_labels: K must lie in [1, 8]");
  std::vector<std::vector<int>> overlap(static_cast<std::size_t>(K), std::vector<int>(static_cast<std::size_t>(K)));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= K || reference[i] < 0 || reference[i] >= K)
      throw std::invalid_argument("align_labels: label out of range");
    ++overlap[labels[i]][reference[i]];
  }
  std::vector<int> perm(static_cast<std::size_t>(K)), best;
  std::iota(perm.begin(), perm.end(), 0);
  int best_score = -1;
  do {
    int score = 0;
    for (int k = 0; k < K; ++k) score += overlap[k][perm[k]];
    if (score > best_score) {
      best_score = score;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = best[labels[i]];
  return out;
}

namespace {

// Solves for one sequence's C with its embeddings and assignments held fixed.
MatD fit_coefficients(const MatD& z, const MatD& q_tilde, const TrainConfig& cfg, std::uint64_t tag) {
  const std::int64_t S = z.rows(), D = z.cols(), K = q_tilde.cols();
  Tensor<double> zt(Shape{S, D}), qt(Shape{S, K});
  for (std::int64_t i = 0; i < S; ++i) {
    for (std::int64_t d = 0; d < D; ++d) zt[i * D + d] = z(i, d);
    for (std::int64_t k = 0; k < K; ++k) qt[i * K + k] = q_tilde(i, k);
  }
  Rng rng = Rng::derive(cfg.seed, tag);
  const Tensor<float> init = init_coeff(1, S, cfg, rng);
  Tensor<double> c0(Shape{S, S});
  for (std::int64_t i = 0; i < S * S; ++i) c0[i] = init[i];
  auto c_raw = Var<double>::parameter(std::move(c0));
  const auto zv = Var<double>::constant(zt);
  Var<double> w;
  {
    NoGradGuard guard;
    w = Var<double>::constant(selfexpr::affinity_weights(Var<double>::constant(qt), cfg.se.sigma_t).value());
  }
  Adam<double> opt({c_raw}, {cfg.coeff_fit_lr});
  for (int it = 0; it < cfg.coeff_fit_steps; ++it) {
    opt.zero_grad();
    backward(selfexpr::se_loss(zv, selfexpr::effective_coeff(c_raw, cfg.se), w, cfg.se.sparsity));
    if (!opt.step()) break;
  }
  NoGradGuard guard;
  const auto c = selfexpr::effective_coeff(c_raw, cfg.se).value();
  MatD out(S, S);
  for (std::int64_t i = 0; i < S; ++i)
    for (std::int64_t j = 0; j < S; ++j) out(i, j) = c[i * S + j];
  return out;
}

}  // namespace

Inference infer_labels(const Model& m, const Tensor<float>& data, bool refine, CoeffSource source) {
  if (data.rank() != 5 || data.dim(1) != m.steps || data.dim(4) != m.channels)
    throw ShapeError("inference data " + to_string(data.shape()) + " does not match the model");
  const std::int64_t B = data.dim(0), S = data.dim(1);
  if (source == CoeffSource::Stored && refine && B != m.n_sequences)
    throw std::invalid_argument("stored coefficients need the training sequences");
  Inference out;
  out.z = embed_all(m, data);
  out.q = assignments(m, out.z, m.tau(), &out.q_tilde);
  {
    Tensor<double> qt(Shape{out.q.rows(), out.q.cols()});
    for (Eigen::Index i = 0; i < out.q.rows(); ++i)
      for (Eigen::Index k = 0; k < out.q.cols(); ++k) qt[i * out.q.cols() + k] = out.q(i, k);
    out.labels = decluster::hard_labels(qt);
  }
  if (!refine) return out;

  std::vector<int> refined;
  refined.reserve(out.labels.size());
  for (std::int64_t b = 0; b < B; ++b) {
    MatD c;
    if (source == CoeffSource::Stored) {
      NoGradGuard guard;
      const auto ct = selfexpr::effective_coeff(gather(m.coeff_raw, 0, {b}), m.cfg.se).value();
      c.resize(S, S);
      for (std::int64_t i = 0; i < S; ++i)
        for (std::int64_t j = 0; j < S; ++j) c(i, j) = ct[i * S + j];
    } else {
      c = fit_coefficients(out.z.middleRows(b * S, S), out.q_tilde.middleRows(b * S, S), m.cfg,
                           kFitStream + static_cast<std::uint64_t>(b));
    }
    const std::vector<int> argmax(out.labels.begin() + b * S, out.labels.begin() + (b + 1) * S);
    const auto r = selfexpr::spectral_refine(selfexpr::build_affinity(c), m.cfg.K,
                                             m.cfg.seed ^ (kSpectralStream + static_cast<std::uint64_t>(b)), argmax);
    const auto aligned = r.fallback ? r.labels : align_labels(r.labels, argmax, m.cfg.K);
    refined.insert(refined.end(), aligned.begin(), aligned.end());
    out.coeff.push_back(std::move(c));
  }
  out.refined = std::move(refined);
  return out;
}

}  // namespace adatsc::trainkit
