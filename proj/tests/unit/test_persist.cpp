#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "gradmatch/errors.hpp"
#include "gradmatch/persist.hpp"

using namespace gradmatch;
using namespace gradmatch::persist;
namespace fs = std::filesystem;

namespace {

data::SyntheticSet random_set(std::size_t classes, std::size_t ipc, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Tensor t({classes * ipc, 1, 3, 2});
  for (double& v : t.data()) v = g(rng);
  return data::make_synthetic(std::move(t), ipc, classes);
}

std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return b[at] | b[at + 1] << 8 | b[at + 2] << 16 | static_cast<std::uint32_t>(b[at + 3]) << 24;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "gradmatch-test-persist";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Crc32, StandardCheckValue) {
  const std::string s = "123456789";
  EXPECT_EQ(crc32({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}), 0xCBF43926u);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto set = random_set(3, 2, 1);
  const auto back = decode_checkpoint(encode_checkpoint(set, ad::Precision::f64));
  EXPECT_EQ(back.set.images, set.images);
  EXPECT_EQ(back.set.labels, set.labels);
  EXPECT_EQ(back.set.ipc, 2u);
  EXPECT_EQ(back.precision, ad::Precision::f64);
  EXPECT_EQ(decode_checkpoint(encode_checkpoint(set, ad::Precision::f32)).precision, ad::Precision::f32);
}

TEST(Checkpoint, HeaderLayout) {
  const auto b = encode_checkpoint(random_set(3, 2, 1), ad::Precision::f64);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 6), "DCSET1");
  EXPECT_EQ(b[6] | b[7] << 8, 1);
  EXPECT_EQ(b[8] | b[9] << 8, 64);
  EXPECT_EQ(le32(b, 10), 3u);
  EXPECT_EQ(le32(b, 14), 2u);
  EXPECT_EQ(le32(b, 18), 1u);
  EXPECT_EQ(le32(b, 22), 3u);
  EXPECT_EQ(le32(b, 26), 2u);
  EXPECT_EQ(le32(b, 30 + 4 * 5), 2u);  // sixth label
  EXPECT_EQ(b.size(), 30 + 6 * 4 + 36 * 8 + 4u);
}

TEST(Checkpoint, FlippedPayloadBitFailsTheChecksum) {
  auto b = encode_checkpoint(random_set(2, 1, 2), ad::Precision::f64);
  b[30 + 8 + 3] ^= 0x10;
  try {
    decode_checkpoint(b);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }
}

TEST(Checkpoint, CorruptHeadersRejected) {
  const auto good = encode_checkpoint(random_set(2, 1, 2), ad::Precision::f64);
  auto bad = good;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad = good;
  bad[6] = 2;
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad = good;
  bad[8] = 16;
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad.assign(good.begin(), good.end() - 5);
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad = good;
  bad[30] = 1;  // first label no longer class-major
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
}

TEST(Checkpoint, FileRoundTripAndMissingFile) {
  const auto set = random_set(2, 3, 5);
  const auto p = scratch("ck.dcset");
  save_checkpoint(p, set, ad::Precision::f64);
  EXPECT_EQ(load_checkpoint(p).set.images, set.images);
  EXPECT_THROW(load_checkpoint(scratch("missing.dcset")), IoError);
}

TEST(Pgm, GridDimensionsAndClamping) {
  Tensor t({4, 1, 2, 3}, 5.0);  // far above 1 after de-normalization
  const auto set = data::make_synthetic(std::move(t), 2, 2);
  const auto p = scratch("grid.pgm");
  write_pgm_grid(p, set, data::NormStats::identity(1));
  const auto bytes = read_file(p);
  const std::string text(bytes.begin(), bytes.end());
  std::istringstream in(text);
  std::string magic;
  std::size_t w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  EXPECT_EQ(magic, "P5");
  EXPECT_EQ(w, 7u);  // two 3-wide tiles and a 1-pixel gap
  EXPECT_EQ(h, 5u);
  EXPECT_EQ(maxv, 255u);
  const std::size_t start = bytes.size() - w * h;
  ASSERT_EQ(text.substr(start - 1, 1), "\n");
  EXPECT_EQ(bytes[start], 255);     // clamped to white
  EXPECT_EQ(bytes[start + 3], 0);   // gap column
  EXPECT_EQ(bytes[start + 2 * w], 0);  // gap row
}

TEST(Csv, EscapesQuotesAndCommas) {
  EXPECT_EQ(csv_escape("plain"), "plain");
  EXPECT_EQ(csv_escape("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_escape("say \"hi\""), "\"say \"\"hi\"\"\"");
}

TEST(Csv, HeaderWrittenOnce) {
  const auto p = scratch("rows.csv");
  fs::remove(p);
  const std::vector<std::string> header{"a", "b"};
  append_csv_row(p, header, std::vector<std::string>{"1", "2"});
  append_csv_row(p, header, std::vector<std::string>{"3", "x,y"});
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), "a,b\n1,2\n3,\"x,y\"\n");
  EXPECT_THROW(append_csv_row(p, header, std::vector<std::string>{"1"}), ContractError);
}

TEST(Json, RoundTripAndMalformedInput) {
  const auto p = scratch("x.json");
  write_json(p, {{"k", 1.5}, {"v", {1, 2}}});
  EXPECT_EQ(read_json(p)["k"], 1.5);
  const std::string junk = "{not json";
  write_file(p, {reinterpret_cast<const std::uint8_t*>(junk.data()), junk.size()});
  EXPECT_THROW(read_json(p), ConfigError);
}
