#include <gtest/gtest.h>

#include <cstring>
#include <string>

#include "support.hpp"

using namespace remixse;
using namespace remixse::testing;

namespace {

ErrorKind decode_error(const std::vector<unsigned char>& bytes, const std::optional<ModelConfig>& expected = {}) {
  try {
    decode_checkpoint(bytes, expected);
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "decode succeeded";
  return ErrorKind::InvalidArgument;
}

Checkpoint trained_checkpoint() {
  Checkpoint ck;
  ck.model = init_model(ModelConfig::tiny(), 21);
  std::vector<const ad::Tensor*> cp;
  std::vector<ad::Tensor*> p;
  for (auto& q : ck.model.params) {
    cp.push_back(&q.value);
    p.push_back(&q.value);
  }
  AdamState st = AdamState::for_parameters(cp);
  auto x = random_batch(2, 300, 1), y = random_batch(2, 300, 2);
  for (int i = 0; i < 2; ++i) {
    auto lg = loss_and_gradients(ck.model, x, y, LossKind::Mae);
    adam_step(p, lg.grads, st);
  }
  ck.optimizer = st;
  ck.seed = 123456789012345ull;
  ck.epoch = 2;
  return ck;
}

// Replaces the first occurrence of `from` in the text part of the image.
std::vector<unsigned char> patch(std::vector<unsigned char> bytes, const std::string& from, const std::string& to) {
  std::string s(bytes.begin(), bytes.end());
  const auto at = s.find(from);
  EXPECT_NE(at, std::string::npos) << from;
  EXPECT_EQ(from.size(), to.size());
  std::memcpy(bytes.data() + at, to.data(), to.size());
  return bytes;
}

}  // namespace

TEST(Checkpoint, RoundTripIsExactOnFloat32Values) {
  Checkpoint ck;
  ck.model = quantize_to_checkpoint_precision(init_model(ModelConfig::tiny(), 4));
  ck.seed = 9;
  ck.epoch = 17;
  const auto back = decode_checkpoint(encode_checkpoint(ck));
  EXPECT_EQ(back.model, ck.model);
  EXPECT_EQ(back.seed, 9u);
  EXPECT_EQ(back.epoch, 17);
  EXPECT_FALSE(back.optimizer.has_value());
}

TEST(Checkpoint, UnquantizedModelRoundsToNearestFloat) {
  Checkpoint ck;
  ck.model = init_model(ModelConfig::tiny(), 5);
  const auto back = decode_checkpoint(encode_checkpoint(ck));
  EXPECT_EQ(back.model, quantize_to_checkpoint_precision(ck.model));
}

TEST(Checkpoint, ResaveIsByteIdentical) {
  TempDir dir("ckpt");
  const auto ck = trained_checkpoint();
  save_checkpoint(dir / "a.ckpt", ck);
  const auto loaded = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(dir / "b.ckpt", loaded);
  EXPECT_EQ(read_file_bytes(dir / "a.ckpt"), read_file_bytes(dir / "b.ckpt"));
  EXPECT_EQ(sha256_file(dir / "a.ckpt"), sha256_file(dir / "b.ckpt"));
}

TEST(Checkpoint, OptimizerStateRoundTrips) {
  const auto ck = trained_checkpoint();
  const auto back = decode_checkpoint(encode_checkpoint(ck));
  ASSERT_TRUE(back.optimizer.has_value());
  const auto& a = *ck.optimizer;
  const auto& b = *back.optimizer;
  EXPECT_EQ(b.timestep, 2);
  EXPECT_EQ(b.hyper.step_size, a.hyper.step_size);
  EXPECT_EQ(b.hyper.beta1, a.hyper.beta1);
  EXPECT_EQ(b.hyper.beta2, a.hyper.beta2);
  EXPECT_EQ(b.hyper.epsilon, a.hyper.epsilon);
  ASSERT_EQ(b.first_moment.size(), a.first_moment.size());
  for (std::size_t i = 0; i < a.first_moment.size(); ++i)
    for (std::size_t k = 0; k < a.first_moment[i].size(); ++k) {
      EXPECT_EQ(b.first_moment[i][k], static_cast<double>(static_cast<float>(a.first_moment[i][k])));
      EXPECT_EQ(b.second_moment[i][k], static_cast<double>(static_cast<float>(a.second_moment[i][k])));
    }
}

TEST(Checkpoint, StartsWithMagicAndEndsWithPayloadCrc) {
  const auto bytes = encode_checkpoint(trained_checkpoint());
  ASSERT_GT(bytes.size(), 11u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 7), "RMXSE1\n");
  // Header is ASCII; the payload follows it and the last 4 bytes are the CRC.
  const std::string text(bytes.begin(), bytes.end());
  const auto hb = text.find("header_bytes=");
  const auto nl = text.find('\n', hb);
  const std::size_t header_bytes = std::stoul(text.substr(hb + 13, nl - hb - 13));
  const std::size_t payload_start = nl + 1 + header_bytes;
  const std::span<const unsigned char> payload(bytes.data() + payload_start, bytes.size() - payload_start - 4);
  EXPECT_EQ(payload.size() % 4, 0u);
  const unsigned char* tail = bytes.data() + bytes.size() - 4;
  const std::uint32_t stored = tail[0] | (tail[1] << 8) | (tail[2] << 16) | (static_cast<std::uint32_t>(tail[3]) << 24);
  EXPECT_EQ(stored, crc32_of(payload));
}

TEST(Checkpoint, TruncationIsCorruptHeader) {
  const auto bytes = encode_checkpoint(trained_checkpoint());
  for (std::size_t keep : {std::size_t{0}, std::size_t{3}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<unsigned char> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(keep));
    EXPECT_EQ(decode_error(cut), ErrorKind::CorruptHeader) << keep;
  }
  auto padded = bytes;
  padded.push_back(0);
  EXPECT_EQ(decode_error(padded), ErrorKind::CorruptHeader);
}

TEST(Checkpoint, PayloadBitFlipFailsChecksum) {
  auto bytes = encode_checkpoint(trained_checkpoint());
  bytes[bytes.size() - 100] ^= 0x10;
  EXPECT_EQ(decode_error(bytes), ErrorKind::CorruptHeader);
}

TEST(Checkpoint, BadMagicIsCorruptHeader) {
  auto bytes = patch(encode_checkpoint(trained_checkpoint()), "RMXSE1", "WAVE01");
  EXPECT_EQ(decode_error(bytes), ErrorKind::CorruptHeader);
}

TEST(Checkpoint, OtherFormatVersionIsVersionMismatch) {
  const auto bytes = encode_checkpoint(trained_checkpoint());
  EXPECT_EQ(decode_error(patch(bytes, "RMXSE1", "RMXSE2")), ErrorKind::VersionMismatch);
  EXPECT_EQ(decode_error(patch(bytes, "format_version=1", "format_version=7")), ErrorKind::VersionMismatch);
}

TEST(Checkpoint, ExpectedConfigIsEnforced) {
  TempDir dir("ckpt_cfg");
  Checkpoint ck;
  ck.model = init_model(ModelConfig::tiny(), 1);
  save_checkpoint(dir / "m.ckpt", ck);
  EXPECT_NO_THROW(load_checkpoint(dir / "m.ckpt", ModelConfig::tiny()));
  ModelConfig other = ModelConfig::tiny();
  other.hidden = 8;
  try {
    load_checkpoint(dir / "m.ckpt", other);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ConfigMismatch);
  }
}

TEST(Checkpoint, MissingFileIsIoError) {
  TempDir dir("ckpt_missing");
  try {
    load_checkpoint(dir / "nope.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
  }
}

TEST(Checkpoint, LoadedModelForwardMatchesQuantizedModel) {
  const auto m = quantize_to_checkpoint_precision(init_model(ModelConfig::tiny(), 8));
  Checkpoint ck;
  ck.model = m;
  const auto back = decode_checkpoint(encode_checkpoint(ck));
  auto x = random_batch(1, 640, 3);
  EXPECT_EQ(forward(back.model, x).speech, forward(m, x).speech);
}
