#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "vmx/vmx.hpp"

using namespace vmx;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("vmx_train_" + name)).string();
}

std::vector<ModalityPair> micro_dataset(std::size_t count) {
  PhantomSpec spec;
  spec.size = 16;
  spec.tumor_radius_min = 0.15;
  spec.tumor_radius_max = 0.25;
  spec.vessel_radius_min = 0.06;
  spec.vessel_radius_max = 0.1;
  return generate_dataset(spec, count);
}

TrainConfig micro_train_config() {
  TrainConfig c;
  c.model = ModelConfig::micro();
  c.epochs = 2;
  c.batch_size = 4;
  c.base_lr = 1e-3;
  c.checkpoint_path.clear();
  return c;
}

std::vector<std::vector<double>> snapshot(VMambaX& m) {
  std::vector<std::vector<double>> out;
  for (auto& [name, t] : m.named_parameters()) out.push_back(t.values());
  return out;
}

}  // namespace

TEST(AdamW, ZeroGradsZeroDecayLeaveParamsUnchanged) {
  std::vector<Tensor> p{Tensor(Shape{3}, std::vector<double>{1.0, -2.0, 0.5})};
  AdamWState st;
  AdamWOptions opt;
  opt.weight_decay = 0.0;
  for (int i = 0; i < 5; ++i) adamw_step(p, {{0.0, 0.0, 0.0}}, st, 0.1, opt);
  EXPECT_EQ(p[0].values(), (std::vector<double>{1.0, -2.0, 0.5}));
  EXPECT_EQ(st.step, 5u);
}

TEST(AdamW, SingleStepClosedForm) {
  for (double g : {0.3, -2.0, 1e-3}) {
    std::vector<Tensor> p{Tensor(Shape{1}, 1.5)};
    AdamWState st;
    AdamWOptions opt;
    opt.weight_decay = 0.0;
    const double lr = 0.01;
    adamw_step(p, {{g}}, st, lr, opt);
    // Bias correction makes mhat = g and vhat = g^2 after one step.
    EXPECT_NEAR(p[0][0], 1.5 - lr * g / (std::abs(g) + opt.eps), 1e-15);
    EXPECT_NEAR(p[0][0], 1.5 - lr * (g > 0 ? 1 : -1), 1e-7);
  }
}

TEST(AdamW, DecayIsDecoupledMultiplicativeShrink) {
  std::vector<Tensor> p{Tensor(Shape{2}, std::vector<double>{2.0, -4.0})};
  AdamWState st;
  AdamWOptions opt;
  opt.weight_decay = 0.1;
  adamw_step(p, {{0.0, 0.0}}, st, 0.5, opt);
  EXPECT_EQ(p[0][0], 2.0 - 0.5 * 0.1 * 2.0);
  EXPECT_EQ(p[0][1], -4.0 - 0.5 * 0.1 * -4.0);
}

TEST(AdamW, ShapeMismatchRejected) {
  std::vector<Tensor> p{Tensor(Shape{2}, 0.0)};
  AdamWState st;
  EXPECT_THROW(adamw_step(p, {{1.0}}, st, 0.1, {}), DimensionError);
  EXPECT_THROW(adamw_step(p, {}, st, 0.1, {}), DimensionError);
}

TEST(AdamW, ReadsGradientsFromTensors) {
  Tensor x(Shape{2}, std::vector<double>{1.0, 2.0}, true);
  backward(sum(mul(x, x)));
  std::vector<Tensor> p{x}, q{Tensor(Shape{2}, std::vector<double>{1.0, 2.0})};
  AdamWState a, b;
  adamw_step(p, a, 0.1, {});
  adamw_step(q, {{2.0, 4.0}}, b, 0.1, {});
  EXPECT_EQ(p[0].values(), q[0].values());
}

TEST(CosineLr, Endpoints) {
  EXPECT_EQ(cosine_lr(0, 100, 6e-5), 6e-5);
  EXPECT_EQ(cosine_lr(100, 100, 6e-5), 0.0);
  EXPECT_NEAR(cosine_lr(50, 100, 6e-5), 3e-5, 1e-20);
  EXPECT_EQ(cosine_lr(150, 100, 6e-5), 0.0);
  for (std::uint64_t s = 1; s <= 100; ++s) EXPECT_LE(cosine_lr(s, 100, 1.0), cosine_lr(s - 1, 100, 1.0));
}

TEST(Config, ParsesKeysAndComments) {
  const TrainConfig c = parse_train_config_string(
      "# toy run\n"
      "epochs = 12\n"
      "batch_size=4   # trailing comment\n"
      "\n"
      "base_lr = 2e-3\n"
      "augment = false\n"
      "stage_channels = 8, 16, 32, 32\n"
      "state_dim = 4\n"
      "data = some/path.vmds\n");
  EXPECT_EQ(c.epochs, 12u);
  EXPECT_EQ(c.batch_size, 4u);
  EXPECT_EQ(c.base_lr, 2e-3);
  EXPECT_FALSE(c.augment);
  EXPECT_EQ(c.model.stage_channels, (std::vector<std::size_t>{8, 16, 32, 32}));
  EXPECT_EQ(c.model.state_dim, 4u);
  EXPECT_EQ(c.data_path, "some/path.vmds");
  EXPECT_EQ(c.weight_decay, 0.01);
  EXPECT_EQ(c.loss_mix, 0.5);
}

TEST(Config, UnknownKeyNamedInError) {
  try {
    parse_train_config_string("epochs = 3\nlearning_rate = 0.1\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'learning_rate'"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_train_config_string("epochs = many\n"), ConfigError);
  EXPECT_THROW(parse_train_config_string("loss_mix = 1.5\n"), ConfigError);
  EXPECT_THROW(parse_train_config_string("epochs = 0\n"), ConfigError);
  EXPECT_THROW(parse_train_config_string("batch_size = -2\n"), ConfigError);
  EXPECT_THROW(parse_train_config_string("just words\n"), ConfigError);
  EXPECT_THROW(parse_train_config_string("stage_channels = 8, 16\n"), ConfigError);
  EXPECT_THROW(load_train_config(temp_path("missing.cfg")), ConfigError);
}

TEST(Checkpoint, RoundTripGivesBitIdenticalOutputs) {
  VMambaX m = VMambaX::make(ModelConfig::micro());
  const auto data = micro_dataset(10);
  // Move BN running statistics away from their defaults first.
  const Batch b = make_batch(data, {0, 1, 2, 3}, 16);
  m.forward(b.ct, b.pet, true);
  const std::string path = temp_path("roundtrip.ckpt");
  AdamWState st;
  st.step = 7;
  for (auto& [name, t] : m.named_parameters()) {
    st.m.emplace_back(t.numel(), 0.25);
    st.v.emplace_back(t.numel(), 0.5);
  }
  save_checkpoint(path, m, &st, {{"epoch", 3.0}, {"val_dice", 0.75}});
  Checkpoint ck;
  VMambaX loaded = load_model(path, &ck);
  EXPECT_EQ(loaded.forward(b.ct, b.pet, false).logits.values(), m.forward(b.ct, b.pet, false).logits.values());
  const DatasetMetrics before = evaluate_dataset(m, data), after = evaluate_dataset(loaded, data);
  EXPECT_EQ(before.mean_dice, after.mean_dice);
  EXPECT_EQ(before.mean_iou, after.mean_iou);
  EXPECT_EQ(before.mean_hd95, after.mean_hd95);
  EXPECT_EQ(ck.scalars.at("epoch"), 3.0);
  EXPECT_EQ(ck.scalars.at("val_dice"), 0.75);
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.optimizer->step, 7u);
  EXPECT_EQ(ck.optimizer->m, st.m);
  EXPECT_TRUE(loaded.encoder_shared());
  std::filesystem::remove(path);
}

TEST(Checkpoint, SharedEncoderStoredOnceUnderCanonicalNames) {
  VMambaX m = VMambaX::make(ModelConfig::micro());
  const auto entries = checkpoint_entries(m, nullptr, {});
  std::size_t encoder = 0;
  for (const auto& e : entries) {
    EXPECT_EQ(e.name.find("encoder_"), std::string::npos) << e.name;
    encoder += e.name.rfind("encoder.", 0) == 0;
  }
  std::size_t visited = 0;
  m.ct_encoder->visit("encoder", [&](const std::string&, Tensor&, bool) { ++visited; });
  EXPECT_EQ(encoder, visited);
}

TEST(Checkpoint, CorruptionRaisesChecksumError) {
  VMambaX m = VMambaX::make(ModelConfig::micro());
  auto bytes = checkpoint_encode(checkpoint_entries(m, nullptr, {}));
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x01;
  EXPECT_THROW(checkpoint_decode(flipped), ChecksumError);
  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  EXPECT_THROW(checkpoint_decode(truncated), ChecksumError);
  auto magic = bytes;
  magic[1] = 'X';
  EXPECT_THROW(checkpoint_decode(magic), FormatError);
  const std::string path = temp_path("corrupt.ckpt");
  io::write_file(path, flipped);
  EXPECT_THROW(load_model(path), ChecksumError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_model(temp_path("absent.ckpt")), IoError);
  EXPECT_THROW(checkpoint_encode({{"a", Shape{1}, {1.0}}, {"a", Shape{1}, {2.0}}}), FormatError);
}

TEST(Checkpoint, Float32EntriesWidenExactly) {
  const std::vector<NamedTensor> in{{"w", Shape{2, 2}, {0.1, -1.0 / 3.0, 1e30, 2.5}, DType::f32}};
  const auto out = checkpoint_decode(checkpoint_encode(in));
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].dtype, DType::f32);
  EXPECT_EQ(out[0].shape, (Shape{2, 2}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(out[0].values[i], static_cast<double>(static_cast<float>(in[0].values[i])));
}

TEST(Checkpoint, ShapeMismatchOnLoadRejected) {
  VMambaX small = VMambaX::make(ModelConfig::micro());
  ModelConfig other = ModelConfig::micro();
  other.state_dim = 3;
  VMambaX big = VMambaX::make(other);
  const std::string path = temp_path("mismatch.ckpt");
  save_checkpoint(path, big);
  EXPECT_THROW(load_weights(small, read_checkpoint(path)), FormatError);
  std::filesystem::remove(path);
}

TEST(Train, SameSeedGivesBitIdenticalFirstStepLoss) {
  const auto data = micro_dataset(10);
  TrainConfig cfg = micro_train_config();
  TrainOptions opt;
  opt.max_steps = 1;
  opt.validate = false;
  VMambaX a = VMambaX::make(cfg.model), b = VMambaX::make(cfg.model);
  const TrainResult ra = train(a, cfg, data, opt), rb = train(b, cfg, data, opt);
  EXPECT_TRUE(std::isfinite(ra.first_step_loss));
  EXPECT_EQ(ra.first_step_loss, rb.first_step_loss);
  EXPECT_EQ(snapshot(a), snapshot(b));
  cfg.seed = 1;
  VMambaX c = VMambaX::make(cfg.model);
  EXPECT_NE(train(c, cfg, data, opt).first_step_loss, ra.first_step_loss);
}

TEST(Train, ZeroLearningRateLeavesWeightsUnchanged) {
  const auto data = micro_dataset(10);
  TrainConfig cfg = micro_train_config();
  cfg.base_lr = 0.0;
  cfg.augment = false;
  cfg.batch_size = 8;  // the whole training split in one batch
  cfg.epochs = 3;
  VMambaX m = VMambaX::make(cfg.model);
  const auto before = snapshot(m);
  TrainOptions opt;
  opt.validate = false;
  const TrainResult r = train(m, cfg, data, opt);
  EXPECT_EQ(snapshot(m), before);
  ASSERT_EQ(r.step_losses.size(), 3u);
  for (double l : r.step_losses) EXPECT_NEAR(l, r.step_losses[0], 1e-12);
}

TEST(Train, NonFiniteLossNamesStep) {
  const auto data = micro_dataset(10);
  TrainConfig cfg = micro_train_config();
  VMambaX m = VMambaX::make(cfg.model);
  m.head.classifier.bias.data_mut()[1] = std::numeric_limits<double>::quiet_NaN();
  try {
    train(m, cfg, data);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
}

TEST(Train, LogsEpochsAndCheckpointReproducesBestDice) {
  const auto data = micro_dataset(20);
  TrainConfig cfg = micro_train_config();
  cfg.epochs = 3;
  cfg.checkpoint_path = temp_path("best.ckpt");
  VMambaX m = VMambaX::make(cfg.model);
  std::ostringstream log;
  TrainOptions opt;
  opt.log = &log;
  const TrainResult r = train(m, cfg, data, opt);
  ASSERT_EQ(r.epochs.size(), 3u);
  EXPECT_EQ(r.steps, 3u * 4);
  std::istringstream lines(log.str());
  std::string line;
  for (std::size_t e = 1; std::getline(lines, line); ++e) {
    EXPECT_EQ(line.rfind("epoch " + std::to_string(e) + " loss ", 0), 0u) << line;
    EXPECT_NE(line.find(" val_dice "), std::string::npos);
    EXPECT_NE(line.find(" gate3 "), std::string::npos);
  }
  Checkpoint ck;
  VMambaX best = load_model(cfg.checkpoint_path, &ck);
  const DatasetMetrics again = evaluate_dataset(best, data, split_dataset(data.size()).val);
  EXPECT_EQ(again.mean_dice, r.best_val_dice);
  EXPECT_EQ(ck.scalars.at("val_dice"), r.best_val_dice);
  EXPECT_EQ(static_cast<std::size_t>(ck.scalars.at("epoch")), r.best_epoch);
  std::filesystem::remove(cfg.checkpoint_path);
}

TEST(Train, SplitIsEightyTwentyByIndex) {
  const Split s = split_dataset(250);
  EXPECT_EQ(s.train.size(), 200u);
  EXPECT_EQ(s.val.size(), 50u);
  EXPECT_EQ(s.train.back(), 199u);
  EXPECT_EQ(s.val.front(), 200u);
}

TEST(Gradcheck, MicroConfigWithinTolerance) {
  const GradcheckReport r = gradcheck();
  EXPECT_GE(r.probes.size(), 200u);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  for (const char* group : {"encoder", "cgm", "fusion", "decoder", "head"}) EXPECT_TRUE(r.group_max.count(group)) << group;
  VMambaX m = VMambaX::make(ModelConfig::micro());
  EXPECT_EQ(r.tensors_covered, m.named_parameters().size());
}
