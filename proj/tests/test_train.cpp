#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "passr/checkpoint.hpp"
#include "passr/image_io.hpp"
#include "passr/train.hpp"

using namespace passr;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("passr_train_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TrainConfig tiny_config() {
  TrainConfig c = TrainConfig::desk();
  c.net = NetworkConfig::desk(8, 2);
  c.batch = 2;
  c.steps = 4;
  c.steps_per_epoch = 2;
  c.patch = PatchSpec{8, 24, 4};
  c.max_disparity = 3.0;
  c.val_count = 2;
  c.val_height = 12;
  c.val_width = 32;
  return c;
}

ParamStore<float> two_params() {
  ParamStore<float> p;
  p.add("a", Tensor<float>({2, 3}, 0.5f));
  p.add("b", Tensor<float>({4}, -1.0f));
  return p;
}

std::vector<Tensor<float>> grads_like(const ParamStore<float>& p, float v) {
  std::vector<Tensor<float>> g;
  for (const auto& [name, t] : p.entries()) g.emplace_back(t.shape(), v);
  return g;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST(Adam, ZeroGradientFromFreshStateLeavesParameters) {
  auto p = two_params();
  const auto before = p;
  auto s = adam_init(p);
  adam_step(p, grads_like(p, 0.0f), s, 1e-3);
  EXPECT_TRUE(p == before);
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto p = two_params();
  auto s = adam_init(p);
  adam_step(p, grads_like(p, 1.0f), s, 1e-2);
  // Bias correction makes the first update lr * g / (|g| + eps).
  for (float v : p.at("a").data()) EXPECT_NEAR(v, 0.49f, 1e-7);
  for (float v : p.at("b").data()) EXPECT_NEAR(v, -1.01f, 1e-7);
  for (float v : s.m[0].data()) EXPECT_NEAR(v, 0.1f, 1e-7);
  for (float v : s.v[0].data()) EXPECT_NEAR(v, 1e-3f, 1e-9);
}

TEST(Adam, MomentsDecayUnderZeroGradient) {
  auto p = two_params();
  auto s = adam_init(p);
  adam_step(p, grads_like(p, 2.0f), s, 1e-3);
  const float m1 = s.m[0][0], v1 = s.v[0][0];
  adam_step(p, grads_like(p, 0.0f), s, 1e-3);
  EXPECT_NEAR(s.m[0][0], 0.9f * m1, 1e-7);
  EXPECT_NEAR(s.v[0][0], 0.999f * v1, 1e-9);
}

TEST(Adam, RejectsBadGradientsWithoutModifying) {
  auto p = two_params();
  auto s = adam_init(p);
  adam_step(p, grads_like(p, 1.0f), s, 1e-3);
  const auto p_before = p;
  const auto m_before = s.m, v_before = s.v;
  auto g = grads_like(p, 1.0f);
  g[1][2] = std::nanf("");
  EXPECT_THROW(adam_step(p, g, s, 1e-3), NumericError);
  g[1][2] = INFINITY;
  EXPECT_THROW(adam_step(p, g, s, 1e-3), NumericError);
  EXPECT_TRUE(p == p_before);
  EXPECT_EQ(s.m, m_before);
  EXPECT_EQ(s.v, v_before);
  EXPECT_EQ(s.step, 1u);

  auto wrong = grads_like(p, 1.0f);
  wrong[0] = Tensor<float>({3, 2});
  EXPECT_THROW(adam_step(p, wrong, s, 1e-3), ShapeError);
  wrong.pop_back();
  EXPECT_THROW(adam_step(p, wrong, s, 1e-3), ShapeError);
}

TEST(Adam, StateRoundTripsThroughStore) {
  auto p = two_params();
  auto s = adam_init(p);
  adam_step(p, grads_like(p, 0.3f), s, 1e-3);
  adam_step(p, grads_like(p, -0.7f), s, 1e-3);
  const auto back = adam_from_store(p, deserialize(serialize(adam_to_store(p, s))));
  EXPECT_EQ(back.step, 2u);
  EXPECT_EQ(back.m, s.m);
  EXPECT_EQ(back.v, s.v);
}

TEST(Schedule, HalvesEveryThirtyEpochs) {
  const TrainConfig c;
  EXPECT_DOUBLE_EQ(lr_schedule(0, c), 2e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(29, c), 2e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(30, c), 1e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(79, c), 5e-5);
  EXPECT_THROW(lr_schedule(80, c), std::out_of_range);
  for (std::size_t e = 0; e < 80; ++e) {
    EXPECT_DOUBLE_EQ(lr_schedule(e, c), 2e-4 * std::pow(0.5, std::floor(e / 30.0)));
  }
}

TEST(Config, DefaultsAreValidAndDeskIsSmaller) {
  EXPECT_NO_THROW(TrainConfig{}.validate());
  EXPECT_NO_THROW(TrainConfig::desk().validate());
  EXPECT_EQ(TrainConfig{}.total_steps(), 8000u);
  EXPECT_EQ(TrainConfig::desk().total_steps(), 300u);
  EXPECT_EQ(TrainConfig{}.batch, 32u);
}

TEST(Config, SetLoadAndTextRoundTrip) {
  TrainConfig a = TrainConfig::desk();
  a.set("channels", "24");
  a.set("lambda", "0.01");
  a.set("input", "replicated");
  a.set("dilations", "1,2");
  a.set("no_transition", "true");
  a.set("seed", "77");
  EXPECT_EQ(a.net.channels, 24u);
  EXPECT_EQ(a.loss.lambda, 0.01);
  EXPECT_EQ(a.input, InputMode::kReplicated);
  EXPECT_EQ(a.net.dilations, (std::vector<std::size_t>{1, 2}));

  const fs::path dir = scratch_dir("config");
  {
    std::ofstream f(dir / "c.txt");
    f << "# comment\n\n" << a.to_string();
  }
  TrainConfig b;
  b.load(dir / "c.txt");
  EXPECT_EQ(b.to_string(), a.to_string());
  EXPECT_EQ(config_hash(b), config_hash(a));
  EXPECT_NE(config_hash(a), config_hash(TrainConfig::desk()));
}

TEST(Config, RejectsBadKeysAndValues) {
  TrainConfig c;
  EXPECT_THROW(c.set("chanels", "8"), std::invalid_argument);
  EXPECT_THROW(c.set("channels", "-3"), std::invalid_argument);
  EXPECT_THROW(c.set("channels", "8x"), std::invalid_argument);
  EXPECT_THROW(c.set("lr", "fast"), std::invalid_argument);
  EXPECT_THROW(c.set("no_pam", "maybe"), std::invalid_argument);
  EXPECT_THROW(c.set("input", "mono"), std::invalid_argument);
  EXPECT_THROW(c.load("/nonexistent/passr.cfg"), IoError);
  TrainConfig z = TrainConfig::desk();
  z.batch = 0;
  EXPECT_THROW(z.validate(), std::invalid_argument);
  z = TrainConfig::desk();
  z.steps = z.epochs * z.steps_per_epoch + 1;
  EXPECT_THROW(z.validate(), std::invalid_argument);
}

TEST(Sampler, SyntheticStreamIsIndexDerived) {
  const auto cfg = tiny_config();
  auto s1 = synthetic_sampler(cfg), s2 = synthetic_sampler(cfg);
  const auto a = s1(5), b = s2(5), c = s1(6);
  EXPECT_TRUE(a.left_lr == b.left_lr);
  EXPECT_TRUE(a.right_hr == b.right_hr);
  EXPECT_FALSE(a.left_lr == c.left_lr);
  EXPECT_EQ(a.left_lr.shape(), (Shape{8, 24, 3}));
  EXPECT_EQ(a.left_hr.shape(), (Shape{16, 48, 3}));
}

TEST(Sampler, ValidationSetIsDisjointFromTraining) {
  auto cfg = tiny_config();
  const auto v = validation_set(cfg);
  ASSERT_EQ(v.size(), 2u);
  EXPECT_EQ(v[0].left_lr.shape(), (Shape{12, 32, 3}));
  EXPECT_TRUE(v[0].left_disparity.has_value());
  cfg.seed = 99;
  EXPECT_TRUE(validation_set(cfg)[1].left_lr == v[1].left_lr);
}

TEST(Sampler, ManifestPairsAreCroppedAndDegraded) {
  const fs::path dir = scratch_dir("manifest");
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < 2; ++i) {
    const auto pair = synth_stereo<float>(40 + i, 21, 61, DisparityProfile::constant(2), 1);
    const auto l = dir / ("l" + std::to_string(i) + ".png"), r = dir / ("r" + std::to_string(i) + ".png");
    save_image(l, pair.left_hr);
    save_image(r, pair.right_hr);
    entries.push_back({l, r, {}});
  }
  save_manifest(dir / "m.txt", entries);
  const auto p = load_pair(load_manifest(dir / "m.txt")[0], 2);
  EXPECT_EQ(p.left_hr.shape(), (Shape{20, 60, 3}));
  EXPECT_EQ(p.left_lr.shape(), (Shape{10, 30, 3}));

  auto cfg = tiny_config();
  cfg.manifest = dir / "m.txt";
  const auto s = manifest_sampler(cfg)(3);
  EXPECT_EQ(s.left_lr.shape(), (Shape{8, 24, 3}));
  EXPECT_EQ(s.left_hr.shape(), (Shape{16, 48, 3}));

  { std::ofstream(dir / "empty.txt") << "# nothing\n"; }
  cfg.manifest = dir / "empty.txt";
  EXPECT_THROW(manifest_sampler(cfg), std::invalid_argument);
}

TEST(Train, DeterministicCheckpointsAndLogs) {
  const auto cfg = tiny_config();
  const fs::path a = scratch_dir("det_a"), b = scratch_dir("det_b");
  std::ostringstream log_a, log_b;
  const auto ra = train(cfg, TrainIo{&log_a, a, false});
  const auto rb = train(cfg, TrainIo{&log_b, b, false});
  EXPECT_EQ(read_file(a / "last.bin"), read_file(b / "last.bin"));
  EXPECT_EQ(read_file(a / "best.bin"), read_file(b / "best.bin"));
  EXPECT_EQ(log_a.str(), log_b.str());
  EXPECT_TRUE(ra.params == load_checkpoint((a / "last.bin").string()));
  ASSERT_EQ(ra.steps.size(), 4u);
  ASSERT_EQ(ra.epochs.size(), 2u);
  EXPECT_EQ(ra.epochs[1].step, 4u);
  for (const auto& r : ra.steps) EXPECT_TRUE(std::isfinite(r.total));
  for (const char* f : {"config.txt", "train.log", "last.adam", "epochs.txt"}) EXPECT_TRUE(fs::exists(a / f)) << f;
  EXPECT_NE(log_a.str().find("config_hash=" + config_hash(cfg)), std::string::npos);
  EXPECT_NE(log_a.str().find("override batch=2"), std::string::npos);
  EXPECT_NE(log_a.str().find("val_psnr="), std::string::npos);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  auto cfg = tiny_config();
  const fs::path whole = scratch_dir("resume_whole"), split = scratch_dir("resume_split");
  train(cfg, TrainIo{nullptr, whole, false});
  auto half = cfg;
  half.steps = 2;
  train(half, TrainIo{nullptr, split, false});
  const auto r = train(cfg, TrainIo{nullptr, split, true});
  EXPECT_EQ(r.steps.size(), 2u);
  EXPECT_EQ(r.epochs.size(), 2u);
  EXPECT_EQ(read_file(whole / "last.bin"), read_file(split / "last.bin"));
  EXPECT_EQ(read_file(whole / "last.adam"), read_file(split / "last.adam"));
  EXPECT_EQ(read_file(whole / "epochs.txt"), read_file(split / "epochs.txt"));
}

TEST(Train, AuxiliaryWeightChangesTrajectory) {
  auto with = tiny_config();
  auto without = with;
  without.loss.lambda = 0.0;
  const auto a = train(with), b = train(without);
  EXPECT_FALSE(a.params == b.params);
  for (const auto& r : b.steps) {
    EXPECT_EQ(r.photometric, 0.0);
    EXPECT_EQ(r.total, r.sr);
  }
  for (const auto& r : a.steps) {
    EXPECT_TRUE(std::isfinite(r.total));
    EXPECT_GT(r.photometric, 0.0);
  }
}

TEST(Train, SingleInputNetworkSkipsCorrespondenceTerms) {
  auto cfg = tiny_config();
  cfg.net.single_input = true;
  cfg.steps = 2;
  const auto r = train(cfg);
  for (const auto& s : r.steps) EXPECT_EQ(s.total, s.sr);
  EXPECT_TRUE(std::isnan(r.epochs.back().val.attention_mass));
}

TEST(Evaluate, ReportsBicubicBaselineAndAttention) {
  const auto cfg = tiny_config();
  const auto params = build<float>(cfg.net, 3);
  const auto s = evaluate(params, cfg.net, validation_set(cfg), cfg.input, eval_config_for_scale(2));
  EXPECT_EQ(s.per_image_psnr.size(), 2u);
  EXPECT_GT(s.bicubic_psnr, 15.0);
  EXPECT_GE(s.attention_mass, 0.0);
  EXPECT_LE(s.attention_mass, 1.0 + 1e-6);
}

TEST(Ablation, VariantsAndErrors) {
  const auto base = tiny_config();
  for (const auto& axis : ablation_axes()) {
    const auto v = ablation_variants(axis, base);
    if (axis == "loss-subsets") {
      EXPECT_EQ(v.size(), 4u);
    } else {
      ASSERT_EQ(v.size(), 2u);
      EXPECT_EQ(v[0].first, "full");
      EXPECT_NE(v[1].second.to_string(), base.to_string());
    }
  }
  EXPECT_THROW(ablation_variants("no_such_axis", base), std::invalid_argument);
}

TEST(Ablation, NoPamRowHasFewerParameters) {
  auto base = tiny_config();
  base.steps = 2;
  const auto rows = ablate("no_pam", base);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_GT(rows[0].params, rows[1].params);
  const std::string table = format_ablation("no_pam", rows);
  EXPECT_NE(table.find("full"), std::string::npos);
  EXPECT_NE(table.find("no_pam"), std::string::npos);
  EXPECT_NE(table.find(std::to_string(rows[0].params)), std::string::npos);
}
