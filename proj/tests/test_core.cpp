#include <doctest.h>

#include <filesystem>
#include <set>

#include "coreseg/hash.hpp"
#include "coreseg/npy.hpp"
#include "coreseg/rng.hpp"
#include "coreseg/tensor.hpp"

#include "support.hpp"

using namespace coreseg;

TEST_CASE("tensor basics and concat") {
    Tensor3<double> a(2, 3, 2);
    a.at(0, 0, 0) = 1.0;
    a.at(1, 2, 1) = -4.0;
    CHECK(a.pixels() == 6);
    CHECK(a.data(0, 0) == 1.0);
    CHECK(a.data(1, 5) == -4.0);

    Tensor3<double> b(2, 3, 1);
    b.data.setConstant(7.0);
    const Tensor3<double> c = concat_channels<double>({&a, &b});
    CHECK(c.channels == 3);
    CHECK(c.data(2, 0) == 7.0);
    CHECK(c.data(0, 0) == 1.0);

    Tensor3<double> bad(3, 3, 1);
    CHECK_THROWS_AS(concat_channels<double>({&a, &bad}), ShapeError);
}

TEST_CASE("rng determinism and derangement property") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());

    // no fixed points, and the mapping is a permutation
    Rng rng(7);
    for (int n = 2; n <= 16; ++n) {
        for (int rep = 0; rep < 50; ++rep) {
            const auto p = rng.cyclic_derangement(n);
            std::set<int> seen(p.begin(), p.end());
            CHECK(static_cast<int>(seen.size()) == n);
            for (int i = 0; i < n; ++i) CHECK(p[static_cast<std::size_t>(i)] != i);
        }
    }
    CHECK_THROWS_AS(Rng(1).cyclic_derangement(1), ValueError);
}

TEST_CASE("seed derivation separates streams") {
    CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
    CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
    CHECK(derive_seed(3, "x", 0) != derive_seed(3, "x", 1));
}

TEST_CASE("fnv1a hashing is stable and order sensitive") {
    Fnv1a64 h1, h2;
    h1.update_string("ab");
    h1.update_string("c");
    h2.update_string("a");
    h2.update_string("bc");
    CHECK(h1.digest() != h2.digest());

    Eigen::MatrixXd m(2, 2);
    m << 1, 2, 3, 4;
    Fnv1a64 ha, hb;
    ha.update_matrix(m);
    hb.update_matrix(m);
    CHECK(ha.hex_digest() == hb.hex_digest());
    m(1, 1) += 1e-12;
    Fnv1a64 hc;
    hc.update_matrix(m);
    CHECK(ha.hex_digest() != hc.hex_digest());
}

TEST_CASE("npy round trip") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "coreseg_npy_test";
    fs::create_directories(dir);

    std::vector<float> data = {1.5f, -2.0f, 0.0f, 4.25f, 9.0f, -0.5f};
    save_npy((dir / "a.npy").string(), {2, 3}, data);
    const auto back = load_npy<float>((dir / "a.npy").string());
    REQUIRE(back.shape == std::vector<std::size_t>{2, 3});
    CHECK(back.data == data);

    std::vector<std::int16_t> mask = {0, -1, 3, 2};
    save_npy((dir / "m.npy").string(), {4}, mask);
    const auto mask_back = load_npy<std::int16_t>((dir / "m.npy").string());
    CHECK(mask_back.data == mask);

    CHECK_THROWS_AS(load_npy<double>((dir / "a.npy").string()), IoError);  // dtype mismatch
    fs::remove_all(dir);
}
