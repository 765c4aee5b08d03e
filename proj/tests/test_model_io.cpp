#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "cprune/error.hpp"
#include "cprune/model_io.hpp"
#include "reference.hpp"

using namespace cprune;

TEST(ModelIo, RoundTripIsBitExact) {
  const Model m = build_model(reference::toy_spec(2, 2, 4, 16, 32), 77);
  const auto bytes = serialize_model(m);
  EXPECT_EQ(std::memcmp(bytes.data(), "CPRM", 4), 0);
  EXPECT_TRUE(deserialize_model(bytes) == m);
  EXPECT_EQ(serialize_model(deserialize_model(bytes)), bytes);
}

TEST(ModelIo, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "cprune_model_io_test.cprm";
  const Model m = build_model(reference::toy_spec(1, 1, 4, 8, 8), 5);
  save_model(m, path);
  EXPECT_TRUE(load_model(path) == m);
  std::filesystem::remove(path);
  EXPECT_THROW(load_model(path), IoError);
}

TEST(ModelIo, RejectsCorruptInput) {
  const Model m = build_model(reference::toy_spec(1, 1, 4, 8, 8), 5);
  auto bytes = serialize_model(m);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_model(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 99;
  EXPECT_THROW(deserialize_model(bad_version), FormatError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize_model(truncated), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(deserialize_model(trailing), FormatError);
}
