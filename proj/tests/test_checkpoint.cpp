#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "moe/checkpoint.hpp"
#include "moe/error.hpp"
#include "moe/hetero.hpp"
#include "moe/moe.hpp"
#include "oracles.hpp"

using namespace moe;

namespace {

ErrorKind kind_of(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("decode accepted corrupted bytes");
  return ErrorKind::InvalidArgument;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(static_cast<bool>(in));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::filesystem::path temp_path(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("round trip is bit-exact") {
  Checkpoint m = build_model(ModelConfig{}, 17);
  m.metadata["note"] = "x";
  m.tensors.at("embed.weight")[0] = -0.0f;
  const Checkpoint back = decode_checkpoint(encode_checkpoint(m));
  CHECK(back.config == m.config);
  CHECK(back.metadata == m.metadata);
  CHECK(bit_equal(back.tensors, m.tensors));

  const auto path = temp_path("moe_roundtrip.moef");
  save_checkpoint(m, path);
  CHECK(bit_equal(load_checkpoint(path).tensors, m.tensors));
  std::filesystem::remove(path);
}

TEST_CASE("golden file matches the C++ encoder byte for byte") {
  const auto golden = read_file("data/golden_dense.moef");
  const Checkpoint expected = testing::golden_model();
  CHECK(encode_checkpoint(expected) == golden);
  const Checkpoint decoded = decode_checkpoint(golden);
  CHECK(decoded.config == expected.config);
  CHECK(decoded.metadata == expected.metadata);
  CHECK(bit_equal(decoded.tensors, expected.tensors));
}

TEST_CASE("corruptions map to distinct error kinds") {
  const auto good = encode_checkpoint(build_model(ModelConfig{}, 3));

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(kind_of(bad_magic) == ErrorKind::BadMagic);

  auto bad_version = good;
  bad_version[4] = 2;
  CHECK(kind_of(bad_version) == ErrorKind::VersionMismatch);

  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, std::size_t{40}, good.size() - 1}) {
    CAPTURE(cut);
    CHECK(kind_of(std::vector<std::uint8_t>(good.begin(), good.begin() + static_cast<long>(cut))) ==
          ErrorKind::Truncated);
  }

  auto trailing = good;
  trailing.push_back(0);
  CHECK(kind_of(trailing) == ErrorKind::Format);

  auto bad_json = good;
  bad_json[16] = '#';
  CHECK(kind_of(bad_json) == ErrorKind::Format);
}

TEST_CASE("load validates dense tensors against the schema") {
  Checkpoint m = build_model(ModelConfig{}, 3);
  m.tensors.erase("layer.0.attn.wq");
  const auto path = temp_path("moe_schema.moef");
  save_checkpoint(m, path);
  try {
    load_checkpoint(path);
    FAIL("expected a throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::SchemaMismatch);
  }
  std::filesystem::remove(path);
  try {
    load_checkpoint(temp_path("moe_missing_file.moef"));
    FAIL("expected a throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Io);
  }
}

TEST_CASE("mixture checkpoints round-trip through the container") {
  const ModelConfig c{};
  const Checkpoint base = build_model(c, 1);
  const std::vector<Checkpoint> experts{build_model(c, 2), build_model(c, 3)};
  const MoEModel moe = assemble_moe(base, experts, MergeRecipe{}, AttentionMode::Merged, 2, 7);
  const MoEModel back = moe_from_checkpoint(decode_checkpoint(encode_checkpoint(to_checkpoint(moe))));
  CHECK(back.n_experts == 2);
  CHECK(back.top_k == 2);
  CHECK(bit_equal(back.tensors, moe.tensors));

  ModelConfig small{3, 8, 2, 16, 64, 64};
  const HeteroMoEModel h = assemble_hetero_moe({build_model(c, 4), build_model(small, 5)}, 1, 9);
  const Checkpoint hc = decode_checkpoint(encode_checkpoint(to_checkpoint(h)));
  CHECK(hc.metadata.at("kind") == "hetero_moe");
  CHECK(hc.metadata.at("dims") == "[16,8]");
  CHECK(hc.metadata.at("layers") == "[2,3]");
  const HeteroMoEModel hb = hetero_from_checkpoint(hc);
  CHECK(hb.expert_configs == h.expert_configs);
  CHECK(bit_equal(hb.tensors, h.tensors));
  CHECK_THROWS_AS(moe_from_checkpoint(hc), Error);
}
