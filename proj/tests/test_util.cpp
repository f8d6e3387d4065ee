#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cmv/philox.hpp"
#include "cmv/util.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

using namespace cmv;

TEST_CASE("philox4x32-10 known answers") {
    // published test vectors for the 10-round 4x32 variant
    auto out = Philox4x32::block({0, 0, 0, 0}, {0, 0});
    CHECK(out[0] == 0x6627e8d5u);
    CHECK(out[1] == 0xe169c58du);
    CHECK(out[2] == 0xbc57ac4cu);
    CHECK(out[3] == 0x9b00dbd8u);

    out = Philox4x32::block({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                            {0xffffffffu, 0xffffffffu});
    CHECK(out[0] == 0x408f276du);
    CHECK(out[1] == 0x41c83b0eu);
    CHECK(out[2] == 0xa20bc7c6u);
    CHECK(out[3] == 0x6d5451fdu);

    out = Philox4x32::block({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                            {0xa4093822u, 0x299f31d0u});
    CHECK(out[0] == 0xd16cfe09u);
    CHECK(out[1] == 0x94fdccebu);
    CHECK(out[2] == 0x5001e420u);
    CHECK(out[3] == 0x24126ea1u);
}

TEST_CASE("gaussian streams are reproducible and key-separated") {
    GaussianStream a(42, 7, StreamClass::Private, 3);
    GaussianStream b(42, 7, StreamClass::Private, 3);
    GaussianStream c(42, 7, StreamClass::Private, 4);
    bool same = true, differ = false;
    for (int i = 0; i < 64; ++i) {
        const double va = a.next();
        same = same && (va == b.next());
        differ = differ || (va != c.next());
    }
    CHECK(same);
    CHECK(differ);
}

TEST_CASE("gaussian stream moments") {
    GaussianStream g(1, 0, StreamClass::Aux, 0);
    const int n = 200000;
    double s = 0.0, s2 = 0.0, s4 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = g.next();
        s += z;
        s2 += z * z;
        s4 += z * z * z * z;
    }
    CHECK(std::fabs(s / n) < 4.0 / std::sqrt(double(n)));
    CHECK(std::fabs(s2 / n - 1.0) < 4.0 * std::sqrt(2.0 / n));
    CHECK(std::fabs(s4 / n - 3.0) < 5.0 * std::sqrt(96.0 / n));
}

TEST_CASE("pairwise sum matches serial result and order") {
    std::vector<double> xs(1001);
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = std::sin(double(i)) * 1e-3 + 1.0;
    double serial = 0.0;
    for (double x : xs) serial += x;
    CHECK(pairwise_sum(xs) == doctest::Approx(serial).epsilon(1e-13));
    CHECK(pairwise_sum(xs) == pairwise_sum(xs));
}

TEST_CASE("median handles even and odd sizes") {
    std::vector<double> odd = {3.0, 1.0, 2.0};
    CHECK(median(odd) == 2.0);
    std::vector<double> even = {4.0, 1.0, 3.0, 2.0};
    CHECK(median(even) == 2.5);
}

TEST_CASE("fit_loglog recovers exact power laws") {
    std::vector<double> xs = {8, 16, 32, 64, 128};
    std::vector<double> ys;
    for (double x : xs) ys.push_back(3.0 * std::pow(x, -0.5));
    const auto fit = fit_loglog(xs, ys);
    CHECK(fit.exponent == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(fit.r2 == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("sha1 and content hash") {
    CHECK(sha1_hex("abc") == "a9993e364706816aba3e25717850c26c9cd0d89d");
    CHECK(sha1_hex("") == "da39a3ee5e6b4b0d3255bfef95601890afd80709");
    // git hashes the empty blob to a well-known id
    CHECK(content_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST_CASE("atomic write replaces content") {
    const std::string path = "util_test_out/file.txt";
    atomic_write_file(path, "one\n");
    atomic_write_file(path, "two\n");
    std::ifstream in(path);
    std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(body == "two\n");
    std::filesystem::remove_all("util_test_out");
}

TEST_CASE("parallel_for covers every index deterministically") {
    std::vector<double> out(500, 0.0);
    parallel_for(out.size(), 4, [&](std::size_t i) { out[i] = std::sqrt(double(i)); });
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == std::sqrt(double(i)));
}

TEST_CASE("ks statistic on identical samples is zero") {
    std::vector<double> a = {1, 2, 3, 4, 5};
    CHECK(ks_statistic(a, a) == 0.0);
    std::vector<double> b = {10, 11, 12, 13, 14};
    CHECK(ks_statistic(a, b) == 1.0);
}
