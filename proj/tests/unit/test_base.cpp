#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "exact/config.h"
#include "exact/error.h"
#include "exact/rng.h"
#include "exact/tensor.h"

using namespace exact;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  fs::path p = fs::temp_directory_path() / "exact_test_base";
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("tensor file round-trips bit-exactly") {
  Tensor t({3, 2, 4, 4});
  Rng rng(11, "t");
  for (auto& v : t.data) v = static_cast<double>(static_cast<float>(rng.uniform(-2.0, 2.0)));
  fs::path path = temp_dir() / "roundtrip.stsr";
  write_tensor_file(path.string(), t, DType::F32);
  Tensor back = read_float_tensor(path.string());
  REQUIRE(back.dims == t.dims);
  for (std::size_t i = 0; i < t.data.size(); ++i) CHECK(back.data[i] == t.data[i]);
}

TEST_CASE("mask file round-trips") {
  MaskTensor m(5, 7);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = static_cast<std::uint16_t>(i % 9);
  m.data[3] = kIgnoreLabel;
  fs::path path = temp_dir() / "mask.stsr";
  write_mask_file(path.string(), m);
  MaskTensor back = read_mask_tensor(path.string());
  REQUIRE(back.dims == m.dims);
  CHECK(back.data == m.data);
}

TEST_CASE("f64 payload survives exactly") {
  Tensor t({5});
  t.data = {1.0 / 3.0, -2.5e-17, 3.14159265358979, 0.0, -0.0};
  fs::path path = temp_dir() / "f64.stsr";
  write_tensor_file(path.string(), t, DType::F64);
  Tensor back = read_float_tensor(path.string());
  for (std::size_t i = 0; i < t.data.size(); ++i) CHECK(back.data[i] == t.data[i]);
}

TEST_CASE("bad magic is a format error") {
  fs::path path = temp_dir() / "badmagic.stsr";
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE" << std::string(32, '\0');
  }
  CHECK_THROWS_AS(read_tensor_file(path.string()), FormatError);
}

TEST_CASE("wrong version is a format error") {
  Tensor t({2});
  t.data = {1.0, 2.0};
  auto bytes = encode_tensor(t, DType::F32);
  bytes[4] = 9;  // version field
  CHECK_THROWS_AS(decode_tensor(bytes.data(), bytes.size()), FormatError);
}

TEST_CASE("dims/payload mismatch is a format error") {
  Tensor t({4});
  t.data = {1.0, 2.0, 3.0, 4.0};
  auto bytes = encode_tensor(t, DType::F32);
  bytes.resize(bytes.size() - 4);  // drop one element
  CHECK_THROWS_AS(decode_tensor(bytes.data(), bytes.size()), FormatError);
  bytes = encode_tensor(t, DType::F32);
  bytes.push_back(0);  // trailing garbage
  CHECK_THROWS_AS(decode_tensor(bytes.data(), bytes.size()), FormatError);
}

TEST_CASE("truncated header is a format error") {
  std::vector<std::uint8_t> bytes = {'S', 'T', 'S', 'R', 1, 0};
  CHECK_THROWS_AS(decode_tensor(bytes.data(), bytes.size()), FormatError);
}

TEST_CASE("rank above four rejected") {
  Tensor t;
  t.dims = {1, 1, 1, 1, 1};
  t.data = {0.5};
  CHECK_THROWS_AS(encode_tensor(t, DType::F32), ContractError);
}

TEST_CASE("rng streams are deterministic and independent") {
  Rng a(42, "data"), b(42, "data"), c(42, "init");
  for (int i = 0; i < 100; ++i) {
    CHECK(a.next_u64() == b.next_u64());
  }
  Rng a2(42, "data");
  bool differs = false;
  for (int i = 0; i < 10; ++i) differs |= (a2.next_u64() != c.next_u64());
  CHECK(differs);
}

TEST_CASE("rng normal moments are sane") {
  Rng rng(7, "norm");
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double v = rng.normal();
    sum += v;
    sq += v * v;
  }
  double mean = sum / n;
  double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("uniform_index stays in range and covers values") {
  Rng rng(3, "idx");
  std::vector<int> seen(7, 0);
  for (int i = 0; i < 2000; ++i) ++seen[rng.uniform_index(7)];
  for (int count : seen) CHECK(count > 0);
}

TEST_CASE("config parses, merges, and round-trips") {
  Config c = Config::from_string("# comment\ntrain.lr 0.001\nmodel.d = 32\n\ndata.K 4\n");
  CHECK(c.get_double("train.lr", 0) == doctest::Approx(0.001));
  CHECK(c.get_int("model.d", 0) == 32);
  Config o;
  o.set_int("model.d", 64);
  c.merge(o);
  CHECK(c.get_int("model.d", 0) == 64);

  c.set_double("x.pi", 3.141592653589793);
  Config back = Config::from_string(c.serialize());
  CHECK(back.get_double("x.pi", 0) == 3.141592653589793);
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(Config::from_string("novalue\n"), ConfigError);
  Config c = Config::from_string("a.b notanumber\n");
  CHECK_THROWS_AS(c.get_double("a.b", 0), ConfigError);
  CHECK_THROWS_AS(c.get("missing.key"), ConfigError);
  CHECK(c.get_or("missing.key", "x") == "x");
}

TEST_CASE("format_double round-trips exactly") {
  for (double v : {0.1, 1e-300, -3.0, 0.3333333333333333, 1e17, 2.2250738585072014e-308}) {
    double back = std::stod(format_double(v));
    CHECK(back == v);
  }
}

TEST_CASE("fnv1a is stable") {
  CHECK(fnv1a(std::string("")) == 0xcbf29ce484222325ULL);
  CHECK(fnv1a(std::string("a")) != fnv1a(std::string("b")));
}
