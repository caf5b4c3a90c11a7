#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "mbfa/io.hpp"
#include "mbfa/linalg.hpp"
#include "mbfa/rng.hpp"
#include "mbfa/threads.hpp"
#include "mbfa/tokens.hpp"

using namespace mbfa;

TEST_SUITE_BEGIN("foundation");

TEST_CASE("derived seeds separate streams") {
    CHECK(derive_seed(7, "gibbs") != derive_seed(7, "train"));
    CHECK(derive_seed(7, "gibbs", 0) != derive_seed(7, "gibbs", 1));
    CHECK(derive_seed(7, "gibbs", 3) == derive_seed(7, "gibbs", 3));
}

TEST_CASE("rng uniform and categorical behave") {
    Rng rng(123);
    double sum = 0.0;
    for (int i = 0; i < 20000; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        sum += u;
    }
    CHECK(std::abs(sum / 20000 - 0.5) < 0.02);

    const double w[3] = {0.2, 0.5, 0.3};
    int counts[3] = {0, 0, 0};
    for (int i = 0; i < 30000; ++i) ++counts[rng.categorical({w, 3})];
    CHECK(std::abs(counts[1] / 30000.0 - 0.5) < 0.02);
}

TEST_CASE("rng normal moments") {
    Rng rng(5);
    double m1 = 0.0, m2 = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        m1 += x;
        m2 += x * x;
    }
    CHECK(std::abs(m1 / n) < 0.01);
    CHECK(std::abs(m2 / n - 1.0) < 0.02);
}

TEST_CASE("jacobi eigendecomposition reconstructs") {
    Rng rng(3);
    const std::size_t n = 6;
    Mat a(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            a(i, j) = rng.normal();
            a(j, i) = a(i, j);
        }
    const auto eig = jacobi_eigensym(a);
    // A v_k = lambda_k v_k for every k
    for (std::size_t k = 0; k < n; ++k) {
        std::vector<double> v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = eig.vectors(i, k);
        const auto av = matvec(a, v);
        for (std::size_t i = 0; i < n; ++i)
            CHECK(av[i] == doctest::Approx(eig.values[k] * v[i]).epsilon(1e-9));
    }
}

TEST_CASE("cholesky round trip and failure") {
    Mat spd(2, 2);
    spd(0, 0) = 4.0;
    spd(0, 1) = spd(1, 0) = 1.0;
    spd(1, 1) = 3.0;
    const auto l = cholesky(spd);
    const auto rebuilt = matmul(l, transpose(l));
    for (std::size_t k = 0; k < 4; ++k)
        CHECK(rebuilt.data[k] == doctest::Approx(spd.data[k]).epsilon(1e-12));

    Mat indef(2, 2);
    indef(0, 0) = 1.0;
    indef(1, 1) = -1.0;
    CHECK_THROWS(cholesky(indef));
}

TEST_CASE("least squares solves consistent systems") {
    Mat a(4, 2);
    a(0, 0) = 1;
    a(1, 1) = 2;
    a(2, 0) = 3;
    a(2, 1) = 1;
    a(3, 0) = 1;
    a(3, 1) = 1;
    std::vector<double> x_true{0.7, -0.3};
    std::vector<double> b(4, 0.0);
    for (std::size_t r = 0; r < 4; ++r)
        b[r] = a(r, 0) * x_true[0] + a(r, 1) * x_true[1];
    const auto x = least_squares(a, b);
    CHECK(x[0] == doctest::Approx(0.7).epsilon(1e-10));
    CHECK(x[1] == doctest::Approx(-0.3).epsilon(1e-10));
}

TEST_CASE("byte round trip is exact") {
    ByteWriter w;
    w.magic("MBTK");
    w.u32(0xdeadbeefu);
    w.u64(0x0123456789abcdefull);
    w.f64(-0.1);
    w.u8(7);
    ByteReader r(w.buffer());
    r.expect_magic("MBTK", "test");
    CHECK(r.u32() == 0xdeadbeefu);
    CHECK(r.u64() == 0x0123456789abcdefull);
    CHECK(r.f64() == -0.1);
    CHECK(r.u8() == 7);
    CHECK(r.exhausted());
}

TEST_CASE("dataset save/load round trip") {
    TokenDataset ds;
    ds.length = 3;
    ds.vocab = 4;
    ds.provenance = Provenance::clone;
    ds.tokens = {1, 2, 3, 4, 4, 1};
    const auto path = std::filesystem::temp_directory_path() / "mbfa_test_ds.mbtk";
    save_dataset(path, ds);
    const auto loaded = load_dataset(path);
    CHECK(loaded.length == 3);
    CHECK(loaded.vocab == 4);
    CHECK(loaded.provenance == Provenance::clone);
    CHECK(loaded.tokens == ds.tokens);
    std::filesystem::remove(path);
}

TEST_CASE("sequence validation catches violations") {
    CHECK_THROWS(validate_sequence(std::vector<std::uint32_t>{1, 2}, 3, 4, 1));  // wrong L
    CHECK_THROWS(validate_sequence(std::vector<std::uint32_t>{1, 9, 2}, 3, 4, 1));  // id > V
    CHECK_THROWS(validate_sequence(std::vector<std::uint32_t>{0, 0, 2}, 3, 4, 1));  // two masks
    CHECK_NOTHROW(validate_sequence(std::vector<std::uint32_t>{0, 3, 2}, 3, 4, 1));
    CHECK(masked_position(std::vector<std::uint32_t>{4, 0, 2}) == 1);
    CHECK_THROWS(masked_position(std::vector<std::uint32_t>{4, 1, 2}));
}

TEST_CASE("parallel chunks cover the range once") {
    std::vector<int> hits(1000, 0);
    parallel_chunks(1000, 7, [&](std::size_t, std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) ++hits[i];
    });
    for (int h : hits) CHECK(h == 1);
}

TEST_SUITE_END();
