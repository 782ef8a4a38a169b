#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "traffictl/matrix.hpp"

using namespace traffictl;
using Catch::Approx;

TEST_CASE("matmul identity") {
    Matrix a{{1, 2}, {3, 4}};
    Matrix r = matmul(Matrix::identity(2), a);
    CHECK(r == a);
}

TEST_CASE("matmul dot product") {
    Matrix a{{1, 2}};
    Matrix b{{3}, {4}};
    Matrix r = matmul(a, b);
    REQUIRE(r.rows() == 1);
    REQUIRE(r.cols() == 1);
    CHECK(r(0, 0) == Approx(11.0));
}

TEST_CASE("matmul with zero matrix annihilates") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> d(-2, 2);
    Matrix a(3, 4);
    for (double& v : a.values()) v = d(rng);
    Matrix z(4, 5);
    Matrix r = matmul(a, z);
    REQUIRE(r.rows() == 3);
    REQUIRE(r.cols() == 5);
    for (double v : r.values()) CHECK(v == 0.0);
}

TEST_CASE("matmul shape error names both shapes") {
    Matrix a(2, 3), b(4, 5);
    CHECK_THROWS_WITH(matmul(a, b), Catch::Matchers::ContainsSubstring("2x3") &&
                                        Catch::Matchers::ContainsSubstring("4x5"));
}

TEST_CASE("sigmoid at zero is one half") {
    Matrix r = sigmoid(Matrix(1, 1, 0.0));
    CHECK(r(0, 0) == Approx(0.5));
}

TEST_CASE("sigmoid is stable and bounded for extreme inputs") {
    Matrix x{{-1e4, -31.0, 0.0, 31.0, 1e4}};
    Matrix y = sigmoid(x);
    CHECK(y.all_finite());
    for (double v : y.values()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    Matrix t = tanh_m(x);
    CHECK(t.all_finite());
    for (double v : t.values()) {
        CHECK(v > -1.0 - 1e-15);
        CHECK(v < 1.0 + 1e-15);
    }
}

TEST_CASE("relu definition") {
    Matrix r = relu(Matrix{{-1, 2}});
    CHECK(r(0, 0) == 0.0);
    CHECK(r(0, 1) == 2.0);
}

TEST_CASE("softmax of equal logits is uniform") {
    Matrix r = softmax_rows(Matrix{{0, 0}});
    CHECK(r(0, 0) == Approx(0.5));
    CHECK(r(0, 1) == Approx(0.5));
}

TEST_CASE("softmax rows sum to one on random input") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> d(-30, 30);
    Matrix x(20, 6);
    for (double& v : x.values()) v = d(rng);
    Matrix y = softmax_rows(x);
    for (int i = 0; i < y.rows(); ++i) {
        double s = 0;
        for (int j = 0; j < y.cols(); ++j) s += y(i, j);
        CHECK(s == Approx(1.0).epsilon(0).margin(1e-12));
    }
}

TEST_CASE("concat and slice are inverses") {
    Matrix a{{1, 2}, {3, 4}};
    Matrix b{{5}, {6}};
    Matrix c = concat_cols(a, b);
    CHECK(slice_cols(c, 0, 2) == a);
    CHECK(slice_cols(c, 2, 3) == b);
}

TEST_CASE("transpose involution") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> d(-1, 1);
    Matrix a(4, 7);
    for (double& v : a.values()) v = d(rng);
    CHECK(transpose(transpose(a)) == a);
}
