#include <doctest.h>

#include <set>

#include "saesens/error.hpp"
#include "saesens/io.hpp"
#include "saesens/rng.hpp"
#include "support/helpers.hpp"

using namespace saesens;

TEST_SUITE("basics") {
  TEST_CASE("rng streams are reproducible and bounded") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
    Rng r(1);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 2000; ++i) {
      const auto v = r.below(7);
      CHECK(v < 7);
      seen.insert(v);
      const double u = r.uniform();
      CHECK(u >= 0.0);
      CHECK(u < 1.0);
    }
    CHECK(seen.size() == 7);
    CHECK(derive_seed(1, 2) != derive_seed(1, 3));
    CHECK(derive_seed(1, 2) == derive_seed(1, 2));
  }

  TEST_CASE("normal draws have roughly unit variance") {
    Rng r(3);
    double s = 0, s2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      const double x = r.normal();
      s += x;
      s2 += x * x;
    }
    CHECK(std::abs(s / n) < 0.05);
    CHECK(std::abs(s2 / n - 1.0) < 0.05);
  }

  TEST_CASE("sha256 of known strings") {
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  }

  TEST_CASE("base64 round trip") {
    CHECK(base64_encode("hello", 5) == "aGVsbG8=");
    const auto bytes = base64_decode("aGVsbG8=");
    CHECK(std::string(bytes.begin(), bytes.end()) == "hello");
  }

  TEST_CASE("atomic write then read") {
    testing::TempDir dir("io");
    write_file_atomic(dir / "x.txt", "payload");
    CHECK(read_file(dir / "x.txt") == "payload");
    CHECK_THROWS_AS(read_file(dir / "missing"), IoError);
  }
}
