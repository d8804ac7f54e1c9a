#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "oracles.hpp"

using namespace pixpro;

namespace {

TrainRunConfig small_config() {
  TrainRunConfig c;
  c.stage_channels = {8, 8, 8};
  c.proj_hidden = 16;
  c.embed_dim = 8;
  c.inst_hidden = 16;
  c.inst_dim = 8;
  c.batch_size = 4;
  c.steps = 6;
  return c;
}

RunOptions opts(const std::filesystem::path& dir) {
  RunOptions o;
  o.out_dir = dir;
  return o;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::pair<std::string, Tensor<float>>> snapshot(EncoderParams<float>& p) {
  std::vector<std::pair<std::string, Tensor<float>>> out;
  for_each_param(p, [&](const std::string& n, ParamKind, Var<float>& v) { out.emplace_back(n, v.value()); });
  return out;
}

ParamRef<double> param(const std::string& name, ParamKind k, std::vector<double> w, std::vector<double> g) {
  const std::size_t n = w.size();
  auto v = Var<double>::leaf(Tensor<double>({n}, std::move(w)), true);
  auto& buf = v.node()->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] = g[i];
  return {name, k, v};
}

}  // namespace

TEST(Lars, ZeroGradientZeroDecayLeavesWeights) {
  LarsState<double> st;
  auto p = param("w", ParamKind::weight, {1.0, -2.0}, {0.0, 0.0});
  lars_step<double>({p}, st, 1.0, {0.0, 0.001, 0.9, 1e-9});
  EXPECT_EQ(p.var.value()[0], 1.0);
  EXPECT_EQ(p.var.value()[1], -2.0);
}

TEST(Lars, SingleWeightUpdateMagnitude) {
  LarsState<double> st;
  auto p = param("w", ParamKind::weight, {1.0}, {1.0});
  const auto local = lars_step<double>({p}, st, 1.0, {0.0, 0.001, 0.9, 1e-9});
  EXPECT_NEAR(1.0 - p.var.value()[0], 0.001, 1e-12);
  EXPECT_NEAR(local.at("w"), 0.001, 1e-12);
}

TEST(Lars, ProportionalGroupsShareLocalRate) {
  LarsState<double> st;
  auto a = param("a", ParamKind::weight, {1.0, 2.0}, {0.3, -0.1});
  auto b = param("b", ParamKind::weight, {5.0, 10.0}, {1.5, -0.5});
  const auto local = lars_step<double>({a, b}, st, 0.1, {1e-4, 0.001, 0.9, 0.0});
  EXPECT_NEAR(local.at("a"), local.at("b"), 1e-15);
}

TEST(Lars, BiasAndNormExcludedFromDecayAndTrust) {
  LarsState<double> st;
  auto w = param("w", ParamKind::weight, {2.0}, {0.0});
  auto b = param("b", ParamKind::bias, {2.0}, {0.0});
  auto n = param("n", ParamKind::norm, {2.0}, {0.5});
  const auto local = lars_step<double>({w, b, n}, st, 0.1, {0.01, 0.001, 0.9, 1e-9});
  EXPECT_NEAR(w.var.value()[0], 2.0 - 0.1 * 0.01 * 2.0, 1e-15);  // decay only, local rate 1
  EXPECT_EQ(b.var.value()[0], 2.0);
  EXPECT_NEAR(n.var.value()[0], 2.0 - 0.1 * 0.5, 1e-15);  // plain SGD step
  EXPECT_EQ(local.at("b"), 1.0);
  EXPECT_EQ(local.at("n"), 1.0);
}

TEST(Lars, HeavyBallMomentum) {
  LarsState<double> st;
  auto p = param("n", ParamKind::norm, {0.0}, {1.0});
  lars_step<double>({p}, st, 1.0, {0.0, 0.001, 0.9, 1e-9});
  lars_step<double>({p}, st, 1.0, {0.0, 0.001, 0.9, 1e-9});
  EXPECT_NEAR(p.var.value()[0], -1.0 - 1.9, 1e-15);
}

TEST(Lars, NonFiniteGradientNamesParameter) {
  LarsState<double> st;
  auto p = param("backbone.s0.c0.weight", ParamKind::weight, {1.0}, {std::nan("")});
  try {
    lars_step<double>({p}, st, 1.0, {});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("backbone.s0.c0.weight"), std::string::npos);
  }
}

TEST(CosineLr, Examples) {
  EXPECT_EQ(cosine_lr(10, 110, 0.5, 10), 0.5);
  EXPECT_NEAR(cosine_lr(110, 110, 0.5, 10), 0.0, 1e-15);
  EXPECT_NEAR(cosine_lr(60, 110, 0.5, 10), 0.25, 1e-15);
  EXPECT_NEAR(cosine_lr(5, 110, 0.5, 10), 0.25, 1e-15);
  EXPECT_EQ(cosine_lr(0, 110, 0.5, 10), 0.0);
  EXPECT_THROW(cosine_lr(111, 110, 0.5, 10), Error);
}

TEST(CosineLr, EffectiveRateScalesWithBatch) {
  TrainRunConfig c;
  for (int b : {32, 64, 128}) {
    c.batch_size = b;
    EXPECT_DOUBLE_EQ(c.effective_lr(), c.lr_base * b / 256.0);
  }
  TrainRunConfig a = c, d = c;
  a.batch_size = 32;
  d.batch_size = 64;
  for (long s = 0; s <= 100; s += 7)
    EXPECT_DOUBLE_EQ(cosine_lr(s, 100, d.effective_lr(), 5), 2 * cosine_lr(s, 100, a.effective_lr(), 5));
}

TEST(Config, ParseSerializeRoundTrip) {
  auto c = small_config();
  c.variant = "pixcontrast";
  c.gamma = 0.5;
  const auto back = TrainRunConfig::parse(c.serialize());
  EXPECT_EQ(back.serialize(), c.serialize());
  EXPECT_EQ(back.digest(), c.digest());
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(TrainRunConfig::parse("nonsense = 1\n"), Error);
  EXPECT_THROW(TrainRunConfig::parse("tau = abc\n"), Error);
  EXPECT_THROW(TrainRunConfig::parse("tau = -1\n"), Error);
  EXPECT_THROW(TrainRunConfig::parse("variant = moco\n"), Error);
  EXPECT_THROW(TrainRunConfig::parse("out_res = 30\n"), Error);
  EXPECT_THROW(TrainRunConfig::parse("just text\n"), Error);
  EXPECT_NO_THROW(TrainRunConfig::parse("# comment\n\ngamma = 4  # sharper\n"));
}

TEST(Config, PixContrastDropsTransform) {
  auto c = small_config();
  c.variant = "pixcontrast";
  EXPECT_FALSE(c.encoder().use_ppm);
  EXPECT_EQ(c.encoder().ppm_layers, 0);
  c.variant = "pixpro+instance";
  EXPECT_TRUE(c.encoder().instance_head);
}

TEST(Schedule, StepsAndBatches) {
  auto c = small_config();
  c.steps = 0;
  c.epochs = 3;
  EXPECT_EQ(steps_per_epoch(c, 10), 2);
  EXPECT_EQ(total_steps(c, 10), 6);
  EXPECT_EQ(warmup_steps(c, 100), 5);
  // An epoch covers distinct images; epochs reshuffle.
  auto b0 = batch_indices(c, 10, 0), b1 = batch_indices(c, 10, 1);
  std::set<std::size_t> seen(b0.begin(), b0.end());
  seen.insert(b1.begin(), b1.end());
  EXPECT_EQ(seen.size(), 8u);
  EXPECT_NE(batch_indices(c, 10, 0), batch_indices(c, 10, 2));
}

TEST(TrainStep, FrozenRunRepeatsLoss) {
  auto c = small_config();
  c.lr_base = 0;
  c.m_base = 1.0;
  const auto ds = oracle::scenes(4, 10);
  std::vector<Tensor<float>> imgs(ds.images.begin(), ds.images.end());
  std::vector<const Tensor<float>*> batch = {&imgs[0], &imgs[1], &imgs[2], &imgs[3]};
  auto s = TrainState<float>::fresh(c);
  const auto rng0 = s.rng.state();
  const auto r1 = train_step(s, batch, {0, 1, 2, 3}, 10);
  s.rng.set_state(rng0);
  s.step = 0;
  const auto r2 = train_step(s, batch, {0, 1, 2, 3}, 10);
  ASSERT_FALSE(r1.loss.skipped);
  EXPECT_EQ(r1.loss.total, r2.loss.total);
}

TEST(TrainStep, SkippedStepChangesNothing) {
  auto c = small_config();
  c.threshold = 1e-9;  // no pair of distinct crops has coincident cell centres
  c.scale_min = c.scale_max = 0.25;
  const auto ds = oracle::scenes(2, 20);
  std::vector<const Tensor<float>*> batch = {&ds.images[0], &ds.images[1]};
  auto s = TrainState<float>::fresh(c);
  const auto before = snapshot(s.online), before_t = snapshot(s.target);
  const auto r = train_step(s, batch, {0, 1}, 10);
  EXPECT_TRUE(r.loss.skipped);
  EXPECT_EQ(r.loss.pairs_used, 0u);
  EXPECT_EQ(r.loss.pix_component, 0.0);
  EXPECT_EQ(s.step, 1);
  EXPECT_EQ(snapshot(s.online), before);
  EXPECT_EQ(snapshot(s.target), before_t);
  EXPECT_TRUE(s.opt.velocity.empty());
}

TEST(TrainStep, VariantsReportLossNames) {
  const auto ds = oracle::scenes(4, 30);
  std::vector<const Tensor<float>*> batch = {&ds.images[0], &ds.images[1], &ds.images[2], &ds.images[3]};
  for (std::string v : {"pixpro", "pixcontrast", "pixpro+instance"}) {
    auto c = small_config();
    c.variant = v;
    auto s = TrainState<float>::fresh(c);
    const auto r = train_step(s, batch, {0, 1, 2, 3}, 10);
    EXPECT_EQ(r.loss_name, v);
    EXPECT_FALSE(r.loss.skipped);
    if (v == "pixcontrast") {
      EXPECT_GE(r.loss.pix_component, 0.0);
    }
    if (v == "pixpro") {
      EXPECT_LE(r.loss.pix_component, 2.0);
    }
    if (v == "pixpro+instance") {
      EXPECT_NEAR(r.loss.total, r.loss.pix_component + r.loss.instance_component, 1e-6);
    }
  }
}

TEST(TrainStep, MultiLevelRuns) {
  auto c = small_config();
  c.feat_levels = "p3,p4,p5,p6";
  const auto ds = oracle::scenes(4, 40);
  std::vector<const Tensor<float>*> batch = {&ds.images[0], &ds.images[1], &ds.images[2], &ds.images[3]};
  auto s = TrainState<float>::fresh(c);
  const auto r = train_step(s, batch, {0, 1, 2, 3}, 10);
  EXPECT_FALSE(r.loss.skipped);
  EXPECT_TRUE(std::isfinite(r.loss.total));
}

TEST(Checkpoint, FreshRoundTripIsBitwise) {
  auto s = TrainState<float>::fresh(small_config());
  const auto bytes = checkpoint_bytes(s);
  auto back = restore_state<float>(parse_checkpoint(std::vector<char>(bytes.begin(), bytes.end()), "mem"));
  EXPECT_EQ(checkpoint_bytes(back), bytes);
  EXPECT_EQ(back.rng.state(), s.rng.state());
}

TEST(Checkpoint, MidTrainingRoundTrip) {
  oracle::TempDir dir("ckpt");
  auto c = small_config();
  c.steps = 3;
  c.variant = "pixpro+instance";
  const auto res = run_pretrain<float>(c, oracle::scenes(8, 50), opts(dir.path()));
  auto s = load_checkpoint<float>(res.checkpoint);
  EXPECT_EQ(s.step, 3);
  EXPECT_FALSE(s.opt.velocity.empty());
  save_checkpoint(dir.path() / "again.pxp", s);
  EXPECT_EQ(slurp(dir.path() / "again.pxp"), slurp(res.checkpoint));
}

TEST(Checkpoint, CorruptionRejected) {
  auto s = TrainState<float>::fresh(small_config());
  const auto good = checkpoint_bytes(s);
  auto parse = [](std::string b) { return parse_checkpoint(std::vector<char>(b.begin(), b.end()), "mem"); };
  auto bad_magic = good;
  bad_magic[0] = 'Q';
  EXPECT_THROW(parse(bad_magic), Error);
  EXPECT_THROW(parse(good.substr(0, good.size() - 3)), Error);
  EXPECT_THROW(parse(good.substr(0, 40)), Error);
  auto bad_version = good;
  bad_version[6] = 9;
  try {
    parse(bad_version);
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("version 9"), std::string::npos) << msg;
    EXPECT_NE(msg.find("expected 1"), std::string::npos) << msg;
  }
  auto bad_digest = good;
  bad_digest[10] ^= 1;
  EXPECT_THROW(parse(bad_digest), Error);
}

TEST(Checkpoint, WrongDtypeRejectedWithoutPartialState) {
  auto s = TrainState<float>::fresh(small_config());
  const auto bytes = checkpoint_bytes(s);
  const auto f = parse_checkpoint(std::vector<char>(bytes.begin(), bytes.end()), "mem");
  EXPECT_THROW(restore_state<double>(f), Error);
}

TEST(RunPretrain, ZeroEpochsWritesInitialState) {
  oracle::TempDir dir("e0");
  auto c = small_config();
  c.steps = 0;
  c.epochs = 0;
  const auto res = run_pretrain<float>(c, oracle::scenes(4, 60), opts(dir.path()));
  EXPECT_TRUE(res.finished);
  const auto log = read_metrics(res.metrics);
  EXPECT_EQ(log.header["type"], "config");
  EXPECT_EQ(log.header["digest"], c.digest());
  EXPECT_TRUE(log.steps.empty());
  auto fresh = TrainState<float>::fresh(c);
  auto loaded = load_checkpoint<float>(res.checkpoint);
  EXPECT_EQ(checkpoint_bytes(loaded), checkpoint_bytes(fresh));
}

TEST(RunPretrain, EmptyDatasetRejected) {
  oracle::TempDir dir("empty");
  EXPECT_THROW(run_pretrain<float>(small_config(), Dataset{}, opts(dir.path())), Error);
}

TEST(RunPretrain, MetricsRecordFields) {
  oracle::TempDir dir("fields");
  auto c = small_config();
  c.steps = 2;
  const auto res = run_pretrain<float>(c, oracle::scenes(8, 70), opts(dir.path()));
  const auto log = read_metrics(res.metrics);
  ASSERT_EQ(log.steps.size(), 2u);
  for (const char* k : {"step", "lr", "m", "loss_total", "loss_pix", "loss_inst", "pairs_used", "pairs_skipped",
                        "embed_std_mean"})
    EXPECT_TRUE(log.steps[0].contains(k)) << k;
  EXPECT_EQ(log.steps[0]["m"], c.m_base);
  EXPECT_EQ(log.header["config"]["gamma"], c.get("gamma"));
}

TEST(RunPretrain, SameSeedSameMetrics) {
  oracle::TempDir a("det_a"), b("det_b");
  const auto ds = oracle::scenes(8, 80);
  const auto ra = run_pretrain<float>(small_config(), ds, opts(a.path()));
  const auto rb = run_pretrain<float>(small_config(), ds, opts(b.path()));
  EXPECT_EQ(slurp(ra.metrics), slurp(rb.metrics));
  EXPECT_EQ(slurp(ra.checkpoint), slurp(rb.checkpoint));
}

TEST(RunPretrain, ResumeMatchesUninterrupted) {
  oracle::TempDir a("res_a"), b("res_b");
  const auto ds = oracle::scenes(8, 90);
  auto c = small_config();
  c.checkpoint_interval = 2;
  const auto full = run_pretrain<float>(c, ds, opts(a.path()));
  auto halt = opts(b.path());
  halt.stop_at = 3;
  const auto part = run_pretrain<float>(c, ds, halt);
  EXPECT_FALSE(part.finished);
  EXPECT_EQ(part.steps_done, 3);
  auto resume = opts(b.path());
  resume.resume = true;
  const auto rest = run_pretrain<float>(c, ds, resume);
  EXPECT_TRUE(rest.finished);
  EXPECT_EQ(slurp(full.metrics), slurp(rest.metrics));
  EXPECT_EQ(slurp(full.checkpoint), slurp(rest.checkpoint));
}

TEST(RunPretrain, ResumeWithOtherConfigRejected) {
  oracle::TempDir d("res_cfg");
  const auto ds = oracle::scenes(8, 95);
  auto halt = opts(d.path());
  halt.stop_at = 1;
  run_pretrain<float>(small_config(), ds, halt);
  auto other = small_config();
  other.gamma = 4;
  auto resume = opts(d.path());
  resume.resume = true;
  EXPECT_THROW(run_pretrain<float>(other, ds, resume), Error);
}

TEST(Collapse, ConstantAndScaleInvariance) {
  Tensor<float> constant({6, 3}, 0.5f);
  const auto r = collapse_report<float>({constant, constant});
  EXPECT_TRUE(r.collapsed);
  EXPECT_NEAR(r.mean_std, 0.0, 1e-6);
  Rng rng(3);
  Tensor<float> x({10, 4});
  for (auto& v : x.data()) v = float(rng.normal());
  auto x10 = x;
  for (auto& v : x10.data()) v *= 10;
  const auto a = collapse_report<float>({x}), b = collapse_report<float>({x10});
  EXPECT_FALSE(a.collapsed);
  EXPECT_NEAR(a.mean_std, b.mean_std, 1e-6);
  ASSERT_EQ(a.channel_std.size(), 4u);
}
