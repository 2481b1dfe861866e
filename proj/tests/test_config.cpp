#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace remixse;
using namespace remixse::testing;

namespace {

RunConfig from_text(const std::string& text) {
  std::istringstream in(text);
  return RunConfig::parse(in, "test.cfg");
}

std::string parse_error(const std::string& text) {
  try {
    from_text(text);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ParseError);
    return e.what();
  }
  ADD_FAILURE() << "parsed: " << text;
  return {};
}

}  // namespace

TEST(RunConfig, ParsesCommentsBlanksAndLaterAssignmentsWin) {
  const auto c = from_text("# run\n\ntrain.epochs = 12\r\n  train.loss=mse  \ntrain.epochs=13\n");
  EXPECT_EQ(c.integer("train.epochs", 0), 13);
  EXPECT_EQ(c.str("train.loss"), "mse");
  EXPECT_FALSE(c.has("train.lr"));
  EXPECT_EQ(c.real("train.lr", 0.25), 0.25);
  EXPECT_EQ(c.to_text(), "train.epochs=13\ntrain.loss=mse\n");
}

TEST(RunConfig, ErrorsCarryLineNumbers) {
  auto msg = parse_error("train.epochs=1\nno equals sign\n");
  EXPECT_NE(msg.find("test.cfg:2"), std::string::npos) << msg;
  msg = parse_error("\n\ntrain.epoch=3\n");
  EXPECT_NE(msg.find("test.cfg:3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("train.epoch"), std::string::npos) << msg;
}

TEST(RunConfig, TypedAccessorsRejectMalformedValues) {
  const auto c = from_text("train.epochs=12x\ntrain.lr=fast\naugment.shift=maybe\ntrain.seed=\n");
  EXPECT_THROW(c.integer("train.epochs", 0), Error);
  EXPECT_THROW(c.real("train.lr", 0.0), Error);
  EXPECT_THROW(c.boolean("augment.shift", true), Error);
  EXPECT_THROW(c.integer("train.seed", 0), Error);
  RunConfig d;
  EXPECT_THROW(d.set("bogus.key", "1"), Error);
  EXPECT_THROW(RunConfig::load("/nonexistent/run.cfg"), Error);
}

TEST(RunConfig, ModelPresetsAndOverrides) {
  EXPECT_EQ(model_config_from(RunConfig{}), ModelConfig::tiny());
  auto c = from_text("model.preset=large\n");
  EXPECT_EQ(model_config_from(c), ModelConfig::large());
  c.set("model.hidden", "16");
  auto m = model_config_from(c);
  EXPECT_EQ(m.hidden, 16);
  EXPECT_EQ(m.depth, 5);
  EXPECT_THROW(model_config_from(from_text("model.preset=huge\n")), Error);
  EXPECT_THROW(model_config_from(from_text("model.kernel=2\nmodel.stride=4\n")), Error);
}

TEST(RunConfig, TrainDefaultsMatchPublishedRecipe) {
  const TrainConfig t = train_config_from(RunConfig{});
  EXPECT_EQ(t.epochs, 500);
  EXPECT_EQ(t.batch_size, 16u);
  EXPECT_EQ(t.learning_rate, 3e-4);
  EXPECT_EQ(t.loss, LossKind::Mae);
  EXPECT_EQ(t.strategy, MixStrategy::Nytt1);
  EXPECT_FALSE(t.tup.is_ema());
  EXPECT_EQ(t.tup.gamma, 0.005);
}

TEST(RunConfig, TrainOverridesApply) {
  const auto t = train_config_from(
      from_text("train.epochs=35\ntrain.tup=ema\ntrain.gamma=0.01\ntrain.strategy=nytt2\ntrain.loss=mse\n"
                "augment.bandmask=off\naugment.max_shift=10\ntrain.snr_lo=-2\n"));
  EXPECT_EQ(t.epochs, 35);
  EXPECT_TRUE(t.tup.is_ema());
  EXPECT_EQ(t.tup.gamma, 0.01);
  EXPECT_EQ(t.strategy, MixStrategy::Nytt2);
  EXPECT_EQ(t.loss, LossKind::Mse);
  EXPECT_FALSE(t.augment.bandmask);
  EXPECT_EQ(t.augment.max_shift_samples, 10u);
  EXPECT_EQ(t.snr_lo_db, -2.0);
  for (const char* bad : {"train.tup=sometimes\n", "train.gamma=0\n", "train.gamma=1.5\n", "train.batch_size=-1\n",
                          "train.strategy=nytt4\n", "train.loss=l3\n"})
    EXPECT_THROW(train_config_from(from_text(bad)), Error) << bad;
}

TEST(RunConfig, SynthSpecFromConfig) {
  const auto s = synth_spec_from(from_text("synth.seed=7\nsynth.num=64\nsynth.duration=1\n"));
  EXPECT_EQ(s.seed, 7u);
  EXPECT_EQ(s.num_utterances, 64u);
  EXPECT_EQ(s.duration_s, 1.0);
  EXPECT_THROW(synth_spec_from(from_text("synth.num=0\n")), Error);
  EXPECT_THROW(synth_spec_from(from_text("synth.seed=-3\n")), Error);
  EXPECT_THROW(synth_spec_from(from_text("synth.duration=0.2\n")), Error);
}
