#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>

#include "pnmf/rng.hpp"
#include "pnmf/tensor_store.hpp"
#include "unit/support.hpp"

using namespace pnmf;

namespace {

std::vector<unsigned char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void dump(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// FNV-1a-64 written out from the published offset basis and prime.
std::uint64_t fnv_oracle(const unsigned char* p, std::size_t n) {
  std::uint64_t h = 14695981039346656037ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t read_u64(const std::vector<unsigned char>& b, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[at + static_cast<std::size_t>(i)];
  return v;
}

TensorManifest manifest(const std::string& name) {
  TensorManifest m;
  m.name = name;
  m.role = TensorRole::weights;
  m.created_by_stage = "test";
  m.created_by_seed = 7;
  return m;
}

}  // namespace

TEST_SUITE("tensor_store") {
  TEST_CASE("fnv1a64 published vectors") {
    CHECK(fnv1a64(std::string_view("")) == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64(std::string_view("a")) == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64(std::string_view("foobar")) == 0x85944171f73967e8ULL);
  }

  TEST_CASE("1x1 zero matrix layout") {
    testing::TempDir dir("ts");
    const auto path = dir / "z.pnmf";
    write_tensor(DenseMatrix(1, 1, 0.0f), manifest("z"), path);
    const auto bytes = slurp(path);
    REQUIRE(bytes.size() == 5 + 16 + 4 + 8);
    CHECK(std::memcmp(bytes.data(), "PNMF1", 5) == 0);
    CHECK(read_u64(bytes, 5) == 1);
    CHECK(read_u64(bytes, 13) == 1);
    const unsigned char zeros[4] = {0, 0, 0, 0};
    CHECK(read_u64(bytes, 25) == fnv_oracle(zeros, 4));
    CHECK(std::filesystem::exists(sidecar_path(path)));
  }

  TEST_CASE("identity round trip and manifest echo") {
    testing::TempDir dir("ts");
    DenseMatrix eye(2, 2);
    eye(0, 0) = eye(1, 1) = 1.0f;
    const auto written = write_tensor(eye, manifest("eye"), dir / "eye.pnmf");
    const auto [m, man] = read_tensor(dir / "eye.pnmf");
    CHECK(m == eye);
    CHECK(man.name == "eye");
    CHECK(man.role == TensorRole::weights);
    CHECK(man.shape == std::vector<std::uint64_t>{2, 2});
    CHECK(man.checksum == written.checksum);
    CHECK(man.created_by_stage == "test");
    CHECK(man.created_by_seed == 7);
  }

  TEST_CASE("random matrices round trip bitwise, including signed zero and subnormals") {
    testing::TempDir dir("ts");
    std::mt19937_64 gen(11);
    for (int trial = 0; trial < 20; ++trial) {
      std::uniform_int_distribution<std::size_t> dim(1, 9);
      DenseMatrix m = testing::random_matrix(dim(gen), dim(gen), gen, -1e6, 1e6);
      m.data()[0] = -0.0f;
      if (m.size() > 1) m.data()[1] = std::numeric_limits<float>::denorm_min();
      write_tensor(m, manifest("r"), dir / "r.pnmf");
      CHECK(read_tensor(dir / "r.pnmf").first == m);
    }
  }

  TEST_CASE("non-finite entries are rejected") {
    testing::TempDir dir("ts");
    DenseMatrix m(2, 2, 1.0f);
    m(1, 0) = std::numeric_limits<float>::quiet_NaN();
    CHECK_ERROR_CODE(write_tensor(m, manifest("n"), dir / "n.pnmf"), ErrorCode::WriteRejected);
    m(1, 0) = std::numeric_limits<float>::infinity();
    CHECK_ERROR_CODE(write_tensor(m, manifest("n"), dir / "n.pnmf"), ErrorCode::WriteRejected);
    CHECK_FALSE(std::filesystem::exists(dir / "n.pnmf"));
  }

  TEST_CASE("bad magic, truncation and missing sidecar") {
    testing::TempDir dir("ts");
    const auto path = dir / "m.pnmf";
    write_tensor(DenseMatrix(3, 2, 0.5f), manifest("m"), path);
    auto bytes = slurp(path);

    auto bad = bytes;
    bad[0] = 'X';
    dump(path, bad);
    CHECK_ERROR_CODE(read_tensor(path), ErrorCode::FormatError);

    bad = bytes;
    bad.resize(bytes.size() - 5);
    dump(path, bad);
    CHECK_ERROR_CODE(read_tensor(path), ErrorCode::CorruptFile);

    dump(path, bytes);
    std::filesystem::remove(sidecar_path(path));
    try {
      read_tensor(path);
      FAIL("missing sidecar accepted");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::FormatError);
      CHECK(std::string(e.what()).find("sidecar") != std::string::npos);
    }
  }

  TEST_CASE("every single-byte payload corruption is detected") {
    testing::TempDir dir("ts");
    const auto path = dir / "c.pnmf";
    std::mt19937_64 gen(3);
    write_tensor(testing::random_matrix(3, 4, gen), manifest("c"), path);
    const auto bytes = slurp(path);
    const std::size_t payload_begin = 21, payload_end = bytes.size() - 8;
    for (std::size_t i = payload_begin; i < payload_end; ++i) {
      for (unsigned char flip : {0x01, 0x80}) {
        auto bad = bytes;
        bad[i] ^= flip;
        dump(path, bad);
        CHECK_ERROR_CODE(read_tensor(path), ErrorCode::CorruptFile);
      }
    }
  }

  TEST_CASE("tampered sidecar checksum is corrupt") {
    testing::TempDir dir("ts");
    const auto path = dir / "s.pnmf";
    write_tensor(DenseMatrix(2, 3, 0.25f), manifest("s"), path);
    TensorManifest other = manifest("s");
    write_tensor(DenseMatrix(2, 3, 0.5f), other, dir / "other.pnmf");
    std::filesystem::copy_file(sidecar_path(dir / "other.pnmf"), sidecar_path(path),
                               std::filesystem::copy_options::overwrite_existing);
    CHECK_ERROR_CODE(read_tensor(path), ErrorCode::CorruptFile);
  }

  TEST_CASE("roles parse back from their names") {
    for (auto role : {TensorRole::V_train, TensorRole::W, TensorRole::H, TensorRole::X_test, TensorRole::labels,
                      TensorRole::schedule, TensorRole::weights, TensorRole::pairs, TensorRole::probs}) {
      const auto parsed = parse_role(to_string(role));
      REQUIRE(parsed.has_value());
      CHECK(*parsed == role);
    }
    CHECK_FALSE(parse_role("bogus").has_value());
  }

  TEST_CASE("keyed rng streams are pure functions of their key") {
    KeyedRng a(5, "s", 1, 2), b(5, "s", 1, 2), c(5, "s", 2, 1), d(5, "t", 1, 2);
    const auto va = a.next_u64();
    CHECK(va == b.next_u64());
    CHECK(va != c.next_u64());
    CHECK(va != d.next_u64());
    KeyedRng u(9, "u");
    double lo = 1.0, hi = 0.0;
    for (int i = 0; i < 10000; ++i) {
      const double x = u.uniform();
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    CHECK(lo >= 0.0);
    CHECK(hi < 1.0);
  }
}
