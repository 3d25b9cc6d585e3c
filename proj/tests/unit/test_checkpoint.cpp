#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "helpers.hpp"
#include "protogap/checkpoint.hpp"
#include "protogap/error.hpp"
#include "protogap/fixtures.hpp"

using namespace protogap;

namespace {

std::string payload_of(const std::string& bytes) {
  std::uint64_t n = 0;
  for (int b = 7; b >= 0; --b) n = (n << 8) | static_cast<unsigned char>(bytes[b]);
  return bytes.substr(8 + n);
}

}  // namespace

TEST_CASE("golden fixture shape") {
  const Checkpoint ck = fixtures::golden_fixture();
  CHECK(ck.n_layers() == 2);
  CHECK(ck.config.d_model == 8);
  validate_checkpoint(ck);
}

TEST_CASE("save, load and re-save is byte identical") {
  for (auto pe : {PeType::absolute, PeType::rotary, PeType::alibi}) {
    fixtures::FixtureOptions o;
    o.pe_type = pe;
    o.n_layers = 3;
    o.tied_lm_head = pe == PeType::alibi;
    o.qk_norm = pe == PeType::rotary;
    const Checkpoint ck = fixtures::random_checkpoint(o);
    const std::string path = testutil::temp_path("ck_roundtrip.bin");
    save_checkpoint(ck, path);
    const Checkpoint back = load_checkpoint(path);
    CHECK(back == ck);
    CHECK(serialize_checkpoint(back) == serialize_checkpoint(ck));
    CHECK(payload_of(serialize_checkpoint(back)) == payload_of(serialize_checkpoint(ck)));
    CHECK(payload_hash(back) == payload_hash(ck));
    std::filesystem::remove(path);
  }
}

TEST_CASE("inconsistent Wq shape names the tensor") {
  fixtures::FixtureOptions o;
  o.n_layers = 4;
  Checkpoint ck = fixtures::random_checkpoint(o);
  ck.layers[3].wq = Tensor({ck.config.d_model, ck.config.d_model + 2});
  try {
    parse_checkpoint(serialize_checkpoint(ck));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("layers.3.Wq") != std::string::npos);
  }
}

TEST_CASE("corrupt containers are rejected") {
  const std::string good = serialize_checkpoint(fixtures::golden_fixture());
  CHECK_THROWS_AS(parse_checkpoint(good.substr(0, 4)), ParseError);
  CHECK_THROWS_AS(parse_checkpoint(good.substr(0, good.size() - 4)), ParseError);
  std::string bad_header = good;
  bad_header[9] = '#';
  CHECK_THROWS_AS(parse_checkpoint(bad_header), ParseError);
}

TEST_CASE("non-finite weights are rejected") {
  Checkpoint ck = fixtures::golden_fixture();
  ck.layers[1].w_up.data()[0] = NAN;
  CHECK_THROWS_AS(validate_checkpoint(ck), NumericalError);
}

TEST_CASE("materialize_pruned") {
  fixtures::FixtureOptions o;
  o.n_layers = 4;
  const Checkpoint ck = fixtures::random_checkpoint(o);

  const Checkpoint same = materialize_pruned(ck, {});
  CHECK(same == ck);

  const Checkpoint p = materialize_pruned(ck, {1, 2});
  CHECK(p.n_layers() == 2);
  CHECK(p.config.n_layers == 2);
  CHECK(p.layers[0] == ck.layers[0]);
  CHECK(p.layers[1] == ck.layers[3]);

  CHECK_THROWS_AS(materialize_pruned(ck, {0, 1, 2, 3}), SpecError);
  CHECK_THROWS_AS(materialize_pruned(ck, {4}), SpecError);
}

TEST_CASE("file hash is a sha256 of the bytes") {
  const std::string path = testutil::temp_path("hash.bin");
  {
    std::ofstream f(path, std::ios::binary);
    f << "abc";
  }
  CHECK(file_hash(path) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  std::filesystem::remove(path);
}
