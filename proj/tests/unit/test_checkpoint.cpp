#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "rmx/checkpoint.hpp"

using namespace rmx;
using rmx::test::bit_equal;
using rmx::test::random_tensor;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.base_channels = 4;
  c.stages = 2;
  c.blocks_per_stage = 2;
  c.window_base = 4;
  c.window_step = 4;
  c.ssm_state = 2;
  c.init_seed = 5;
  return c;
}

void put_u64(std::string& s, std::size_t at, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s[at + i] = static_cast<char>((v >> (8 * i)) & 0xff);
}

// re-seals a modified byte string with a fresh checksum
std::string reseal(std::string s) {
  s.resize(s.size() - 8);
  const auto h = fnv1a64(s.data(), s.size());
  s.resize(s.size() + 8);
  put_u64(s, s.size() - 8, h);
  return s;
}

}  // namespace

TEST_CASE("fnv1a reference values") {
  CHECK(fnv1a64("", 0) == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a", 1) == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64("foobar", 6) == 0x85944171f73967e8ull);
}

TEST_CASE("record encoding round trip keeps every bit") {
  Checkpoint c;
  c.config_text = "base_channels = 4\n";
  c.put("a", {2, 3}, {1.5, -0.0, INFINITY, -INFINITY, std::nan(""), 5e-324});
  c.put("scalar", {}, {42.0});
  c.put("empty", {0}, {});
  const auto bytes = encode_checkpoint(c);
  CHECK(bytes.compare(0, 8, "RMXCKPT1") == 0);
  CHECK(static_cast<unsigned char>(bytes[8]) == 1);
  CHECK(bytes[9] == 0);
  const auto back = decode_checkpoint(bytes);
  CHECK(back.config_text == c.config_text);
  REQUIRE(back.records.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.records[i].name == c.records[i].name);
    CHECK(back.records[i].shape == c.records[i].shape);
    REQUIRE(back.records[i].values.size() == c.records[i].values.size());
    for (std::size_t j = 0; j < c.records[i].values.size(); ++j)
      CHECK(std::bit_cast<std::uint64_t>(back.records[i].values[j]) ==
            std::bit_cast<std::uint64_t>(c.records[i].values[j]));
  }
  CHECK(encode_checkpoint(back) == bytes);
}

TEST_CASE("corruption is detected") {
  Checkpoint c;
  c.config_text = "x = 1\n";
  c.put("w", {4}, {1, 2, 3, 4});
  const auto good = encode_checkpoint(c);

  auto flipped = good;
  flipped[30] ^= 0x10;
  CHECK_THROWS_WITH_AS(decode_checkpoint(flipped), doctest::Contains("checksum"), IoError);
  CHECK_THROWS_AS(decode_checkpoint(good.substr(0, good.size() - 3)), IoError);
  auto magic = good;
  magic[0] = 'X';
  CHECK_THROWS_WITH_AS(decode_checkpoint(reseal(magic)), doctest::Contains("magic"), IoError);
  auto version = good;
  version[8] = 9;
  CHECK_THROWS_WITH_AS(decode_checkpoint(reseal(version)), doctest::Contains("version 9"), IoError);
  // record count larger than the payload
  auto count = good;
  put_u64(count, 12 + 8 + c.config_text.size(), 5);
  CHECK_THROWS_WITH_AS(decode_checkpoint(reseal(count)), doctest::Contains("truncated"), IoError);
}

TEST_CASE("model save and load is bit-exact") {
  Model m(tiny());
  const Tensor x = random_tensor({1, 3, 16, 16}, 3, 0, 1);
  m.forward(x, NormMode::train);  // moves the running statistics away from their defaults
  const auto before = m.forward(x, NormMode::eval);

  const auto path = (std::filesystem::temp_directory_path() / "rmx_ckpt_model.ckpt").string();
  write_checkpoint(path, capture_model(m));
  Model loaded = load_model(read_checkpoint(path));
  CHECK(loaded.config() == m.config());
  const auto after = loaded.forward(x, NormMode::eval);
  for (std::size_t s = 0; s < before.scales.size(); ++s) CHECK(bit_equal(before.scales[s], after.scales[s]));
  CHECK(read_checkpoint(path).find("enc0.block0.bn1.running_mean") != nullptr);
}

TEST_CASE("restore rejects mismatched models") {
  Model m(tiny());
  auto ck = capture_model(m);
  ModelConfig wider = tiny();
  wider.base_channels = 8;
  Model w(wider);
  CHECK_THROWS_WITH_AS(restore_model(w, ck), doctest::Contains("stem.weight"), IoError);
  ck.records.erase(ck.records.begin());
  CHECK_THROWS_AS(restore_model(m, ck), IoError);
  CHECK_THROWS_AS(read_checkpoint("/nonexistent/dir/x.ckpt"), IoError);
}
