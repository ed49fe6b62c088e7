#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "adatsc/trainkit.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace adatsc;
using namespace adatsc::trainkit;
using testing::randn;

namespace {

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.K = 2;
  cfg.encoder.filters = {2, 3, 4, 5};
  cfg.encoder.patch_h = cfg.encoder.patch_w = 1;
  cfg.bitgat.heads = 1;
  cfg.bitgat.D = 4;
  cfg.gan.rank = 2;
  cfg.gan.reals_per_cluster = 4;
  cfg.epochs = 3;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 2;
  cfg.kmeans_restarts = 2;
  cfg.coeff_fit_steps = 20;
  cfg.seed = 7;
  return cfg;
}

Tensor<float> tiny_data(std::uint64_t seed = 3, std::int64_t B = 2) {
  Rng rng(seed);
  return testing::uniform<float>({B, 4, 8, 8, 1}, rng, 0, 1);
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("adatsc_trainkit_" + name)).string();
}

std::vector<Tensor<float>> snapshot(const Model& m) {
  std::vector<Tensor<float>> out;
  for (const auto& e : m.params.entries()) out.push_back(e.var.value());
  return out;
}

bool same_bits(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.size(); ++i)
    if (std::memcmp(&a[i], &b[i], sizeof(float)) != 0) return false;
  return true;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  f << bytes;
}

}  // namespace

TEST_CASE("total generator loss") {
  CHECK(total_generator_loss({}, {1, 1, 1}) == 0.0);
  LossParts p{1, 0.5, 0.2, 0.1, 0.3, 0.4};
  CHECK(std::abs(total_generator_loss(p, {0.5, 2, 0.25}) - 2.35) < 1e-12);
  // without the adversarial weight the adversarial part does not matter
  LossParts q = p;
  q.adv = 123;
  CHECK(total_generator_loss(p, {0.5, 2, 0}) == total_generator_loss(q, {0.5, 2, 0}));

  LossParts bad = p;
  bad.mi = std::numeric_limits<double>::quiet_NaN();
  try {
    total_generator_loss(bad, {0.5, 2, 0.25});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("mi") != std::string::npos);
  }
}

TEST_CASE("bottleneck fusion") {
  Rng rng(1);
  const std::int64_t B = 2, S = 3, D = 4, F = 5;
  auto z = Var<double>::constant(randn<double>({B, S, D}, rng));
  auto z_se = Var<double>::constant(randn<double>({B, S, D}, rng));
  auto zbar = Var<double>::constant(randn<double>({B, D}, rng));
  auto w = Var<double>::constant(randn<double>({4 * D, F}, rng));
  auto b = Var<double>::constant(randn<double>({F}, rng));
  auto out = bottleneck_fuse(z, z_se, zbar, w, b, 2, 3).value();
  CHECK(out.shape() == Shape{B, S, 2, 3, F});
  // constant over the grid
  for (std::int64_t g = 0; g < B * S; ++g)
    for (std::int64_t cell = 1; cell < 6; ++cell)
      for (std::int64_t f = 0; f < F; ++f) CHECK(out[(g * 6 + cell) * F + f] == out[g * 6 * F + f]);

  // by hand for step (0, 1)
  std::vector<double> fused;
  for (std::int64_t d = 0; d < D; ++d) fused.push_back(z.value()[(0 * S + 1) * D + d]);
  for (std::int64_t d = 0; d < D; ++d) fused.push_back(z_se.value()[(0 * S + 1) * D + d]);
  for (std::int64_t d = 0; d < D; ++d) {
    double m = 0;
    for (std::int64_t t = 0; t < S; ++t) m += z_se.value()[t * D + d];
    fused.push_back(m / S);
  }
  for (std::int64_t d = 0; d < D; ++d) fused.push_back(zbar.value()[d]);
  for (std::int64_t f = 0; f < F; ++f) {
    double v = b.value()[f];
    for (std::int64_t i = 0; i < 4 * D; ++i) v += fused[i] * w.value()[i * F + f];
    CHECK(std::abs(out[(1 * 6) * F + f] - v) < 1e-12);
  }

  // undefined SE features act as zeros
  auto zero_se = Var<double>::constant(Tensor<double>({B, S, D}));
  auto a1 = bottleneck_fuse(z, Var<double>(), zbar, w, b, 2, 3).value();
  auto a2 = bottleneck_fuse(z, zero_se, zbar, w, b, 2, 3).value();
  for (std::int64_t i = 0; i < a1.size(); ++i) CHECK(a1[i] == a2[i]);

  auto zero = [](Shape s) { return Var<double>::constant(Tensor<double>(std::move(s))); };
  auto none = bottleneck_fuse(zero({B, S, D}), zero({B, S, D}), zero({B, D}), w, zero({F}), 2, 3).value();
  for (double v : none.values()) CHECK(v == 0.0);

  CHECK_THROWS_AS(bottleneck_fuse(z, z_se, zbar, zero({3 * D, F}), b, 2, 3), ShapeError);
}

TEST_CASE("schedules") {
  TrainConfig cfg;
  cfg.epochs = 50;
  CHECK(cfg.lambda_bal_at(0) == 0.0);
  double prev = -1;
  for (int e = 0; e <= 50; ++e) {
    CHECK(cfg.lambda_bal_at(e) >= prev);
    prev = cfg.lambda_bal_at(e);
  }
  CHECK(cfg.lambda_bal_at(10) == doctest::Approx(cfg.lambda_bal));
  CHECK(cfg.lambda_bal_at(49) == cfg.lambda_bal);
  for (int e = 1; e < 200; ++e) CHECK(decluster::anneal_tau(e, cfg.tau) < decluster::anneal_tau(e - 1, cfg.tau));
}

TEST_CASE("config validation, ablations and JSON") {
  auto cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  auto bad = cfg;
  bad.lambda_se = -1;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.warmup_epochs = cfg.epochs + 1;
  CHECK_THROWS(bad.validate());

  CHECK(parse_ablation("none") == Ablation::None);
  CHECK(parse_ablation("cnn-lstm") == Ablation::CnnLstm);
  CHECK_THROWS(parse_ablation("bogus"));
  for (auto a : {Ablation::None, Ablation::Sel, Ablation::CnnLstm, Ablation::Gat})
    CHECK(parse_ablation(ablation_name(a)) == a);
  auto sel = cfg;
  sel.apply(Ablation::Sel);
  CHECK_FALSE(sel.use_bitgat);
  CHECK_FALSE(sel.use_adv);
  CHECK(sel.use_se);
  auto cl = cfg;
  cl.apply(Ablation::CnnLstm);
  CHECK(cl.encoder.variant == stcoder::EncoderVariant::CnnThenLstm);
  auto gat = cfg;
  gat.apply(Ablation::Gat);
  CHECK(gat.pool_before_bitgat);

  auto back = config_from_json(config_to_json(cfg));
  CHECK(config_hash(back) == config_hash(cfg));
  CHECK(config_to_json(back) == config_to_json(cfg));

  set_config_value(cfg, "lambda_bal", "0.5");
  CHECK(cfg.lambda_bal == 0.5);
  set_config_value(cfg, "encoder.filters", "8,16,24,32");
  CHECK(cfg.encoder.filters == std::vector<int>{8, 16, 24, 32});
  CHECK(config_hash(cfg) != config_hash(back));
  CHECK_THROWS(set_config_value(cfg, "no_such_key", "1"));
}

TEST_CASE("epochs = 0 returns the initial state") {
  auto cfg = tiny_config();
  cfg.epochs = 0;
  cfg.warmup_epochs = 0;
  auto data = tiny_data();
  auto res = train(data, cfg);
  CHECK(res.history.empty());
  CHECK(res.model.epoch == 0);
  auto fresh = Model::create(cfg, 1, 4, 8, 8, 2);
  auto a = snapshot(res.model), b = snapshot(fresh);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(same_bits(a[i], b[i]));
}

TEST_CASE("parameter partition and null steps") {
  auto cfg = tiny_config();
  auto data = tiny_data();
  auto res = train(data, cfg);
  Model& m = res.model;
  REQUIRE(m.centers_ready);
  Trainer trainer(m);
  Rng rng(11);

  auto before = snapshot(m);
  auto gen = trainer.generator_step(data, {0, 1}, rng);
  auto after_gen = snapshot(m);
  bool moved = false;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& name = m.params.entries()[i].name;
    if (Model::is_discriminator_param(name))
      CHECK_MESSAGE(same_bits(before[i], after_gen[i]), name);
    else
      moved = moved || !same_bits(before[i], after_gen[i]);
  }
  CHECK(moved);

  auto disc = trainer.discriminator_step(gen.latents);
  REQUIRE(disc.has_value());
  auto after_disc = snapshot(m);
  bool bases_moved = false;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& name = m.params.entries()[i].name;
    if (Model::is_discriminator_param(name))
      bases_moved = bases_moved || !same_bits(after_gen[i], after_disc[i]);
    else
      CHECK_MESSAGE(same_bits(after_gen[i], after_disc[i]), name);
  }
  CHECK(bases_moved);
  CHECK_FALSE(trainer.discriminator_step({}).has_value());

  trainer.set_learning_rates(0, 0);
  auto still = trainer.generator_step(data, {0, 1}, rng);
  trainer.discriminator_step(still.latents);
  CHECK(std::isfinite(still.record.total));
  CHECK(still.record.total > 0);
  auto after_null = snapshot(m);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(same_bits(after_disc[i], after_null[i]));
}

TEST_CASE("training is deterministic and logs every term") {
  auto cfg = tiny_config();
  auto data = tiny_data();
  auto a = train(data, cfg);
  auto b = train(data, cfg);
  REQUIRE(a.history.size() == b.history.size());
  CHECK(a.history.size() == 3);  // 3 epochs, one batch of 2
  for (std::size_t i = 0; i < a.history.size(); ++i)
    CHECK(history_row(cfg, a.history[i]) == history_row(cfg, b.history[i]));
  CHECK(history_header(cfg) ==
        "epoch,step,L_total,L_rec,L_kl,L_bal,L_mi,L_se,L_adv,L_D,tau,lambda_bal,attn_entropy");
  // terms past warm-up are active
  CHECK(a.history.back().parts.kl > 0);
  CHECK(a.history.back().parts.se > 0);
  CHECK_FALSE(a.history.back().disc_skipped);
  CHECK(a.history.front().parts.se == 0);

  const auto path = temp_path("hist.csv");
  write_history_csv(path, cfg, a.history);
  auto text = read_file(path);
  CHECK(std::count(text.begin(), text.end(), '\n') == 4);
  std::remove(path.c_str());
}

TEST_CASE("without the adversary the bases stay at their initial values") {
  auto cfg = tiny_config();
  cfg.use_adv = false;
  auto res = train(tiny_data(), cfg);
  auto fresh = Model::create(cfg, 1, 4, 8, 8, 2);
  for (std::size_t i = 0; i < fresh.params.size(); ++i)
    if (Model::is_discriminator_param(fresh.params.entries()[i].name))
      CHECK(same_bits(fresh.params.entries()[i].var.value(), res.model.params.entries()[i].var.value()));
  CHECK(history_header(cfg).find("L_D") == std::string::npos);
  CHECK(res.diagnostics.empty());

  auto sel = tiny_config();
  sel.apply(Ablation::Sel);
  CHECK(history_header(sel) == "epoch,step,L_total,L_rec,L_kl,L_bal,L_mi,L_se,tau,lambda_bal");
  CHECK(train(tiny_data(), sel).history.size() == 3);
}

TEST_CASE("reconstruction-only training descends") {
  auto cfg = tiny_config();
  cfg.use_adv = false;
  cfg.use_se = false;
  cfg.epochs = cfg.warmup_epochs = 15;
  cfg.lr_generator = 3e-3;
  auto res = train(tiny_data(5, 4), cfg);
  REQUIRE(res.history.size() == 30);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += res.history[i].parts.rec;
    tail += res.history[20 + i].parts.rec;
    CHECK(res.history[i].parts.kl == 0);
  }
  CHECK(tail < head);
}

TEST_CASE("inference labels and refinement") {
  auto cfg = tiny_config();
  auto data = tiny_data();
  auto res = train(data, cfg);
  auto inf = infer_labels(res.model, data, true);
  CHECK(inf.labels.size() == 8);
  CHECK(inf.z.rows() == 8);
  CHECK(inf.q.rows() == 8);
  for (int i = 0; i < 8; ++i) {
    CHECK(inf.labels[i] >= 0);
    CHECK(inf.labels[i] < cfg.K);
    CHECK(std::abs(inf.q.row(i).sum() - 1) < 1e-5);
    CHECK(std::abs(inf.q_tilde.row(i).sum() - 1) < 1e-5);
    int arg = 0;
    for (int k = 1; k < cfg.K; ++k)
      if (inf.q(i, k) > inf.q(i, arg)) arg = k;
    CHECK(inf.labels[i] == arg);
  }
  REQUIRE(inf.refined.has_value());
  CHECK(inf.refined->size() == 8);
  for (int l : *inf.refined) CHECK((l >= 0 && l < cfg.K));
  CHECK(inf.coeff.size() == 2);

  auto stored = infer_labels(res.model, data, true, CoeffSource::Stored);
  CHECK(stored.labels == inf.labels);
  auto plain = infer_labels(res.model, data, false);
  CHECK_FALSE(plain.refined.has_value());
}

TEST_CASE("label alignment") {
  CHECK(align_labels({1, 1, 0, 0}, {0, 0, 1, 1}, 2) == std::vector<int>{0, 0, 1, 1});
  CHECK(align_labels({2, 0, 1, 1}, {0, 1, 2, 2}, 3) == std::vector<int>{0, 1, 2, 2});
  CHECK(align_labels({0, 0}, {1, 1}, 2) == std::vector<int>{1, 1});
  CHECK_THROWS(align_labels({0}, {0, 1}, 2));
  CHECK_THROWS(align_labels({0, 3}, {0, 1}, 2));
}

TEST_CASE("checkpoint round trip") {
  auto cfg = tiny_config();
  auto data = tiny_data();
  auto res = train(data, cfg);
  const auto path = temp_path("model.adtc");
  save_checkpoint(res.model, path);
  auto loaded = load_checkpoint(path, &cfg);
  CHECK(loaded.warnings.empty());
  CHECK(loaded.model.epoch == res.model.epoch);
  CHECK(loaded.model.centers_ready == res.model.centers_ready);
  auto a = snapshot(res.model), b = snapshot(loaded.model);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(same_bits(a[i], b[i]));

  auto x = Var<float>::constant(data);
  auto fa = forward(res.model, x, {0, 1}, true);
  auto fb = forward(loaded.model, x, {0, 1}, true);
  CHECK(same_bits(fa.z.value(), fb.z.value()));
  CHECK(same_bits(fa.x_hat.value(), fb.x_hat.value()));

  auto other = cfg;
  other.lambda_adv = 0.7;
  CHECK(load_checkpoint(path, &other).warnings.size() == 1);

  const auto bytes = read_file(path);
  const auto broken = temp_path("broken.adtc");
  auto corrupt = bytes;
  corrupt[0] = 'X';
  write_file(broken, corrupt);
  CHECK_THROWS_AS(load_checkpoint(broken), CheckpointError);
  corrupt = bytes;
  corrupt[4] = static_cast<char>(kCheckpointVersion + 1);
  write_file(broken, corrupt);
  CHECK_THROWS_AS(load_checkpoint(broken), CheckpointError);
  corrupt = bytes;
  corrupt[12] = '#';  // inside the JSON header
  write_file(broken, corrupt);
  CHECK_THROWS_AS(load_checkpoint(broken), CheckpointError);
  write_file(broken, bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(load_checkpoint(broken), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(temp_path("missing.adtc")), CheckpointError);
  std::remove(path.c_str());
  std::remove(broken.c_str());
}

TEST_CASE("resuming from a checkpoint continues to the configured epoch count") {
  auto cfg = tiny_config();
  auto data = tiny_data();
  auto part = train(data, cfg);
  auto more = part.model;
  more.cfg.epochs = 4;
  auto res = train(std::move(more), data);
  CHECK(res.model.epoch == 4);
  CHECK(res.history.size() == 1);
  CHECK(res.history[0].epoch == 3);
}
