#include "doctest.h"

#include "gradcheck.hpp"
#include "op_cases.hpp"
#include "oracles.hpp"

#include "fda/error.hpp"
#include "fda/tensor.hpp"

#include <cmath>
#include <limits>
#include <sstream>

using namespace fda;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an fda::Error");
    return ErrorKind::InvalidConfig;
}

} // namespace

TEST_CASE("tensor construction invariants") {
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.at(1, 2) == 6);
    CHECK(kind_of([] { Tensor({2, 2}, {1, 2, 3}); }) == ErrorKind::ShapeMismatch);
    CHECK(kind_of([] { Tensor({1}, {std::numeric_limits<Scalar>::quiet_NaN()}); }) == ErrorKind::NonFinite);
    CHECK(kind_of([] { Tensor({2}, {1, std::numeric_limits<Scalar>::infinity()}); }) == ErrorKind::NonFinite);
    set_checked_mode(false);
    CHECK_NOTHROW(Tensor({1}, {std::numeric_limits<Scalar>::infinity()}));
    set_checked_mode(true);
}

TEST_CASE("matmul") {
    SUBCASE("identity") {
        Tensor c = matmul(Tensor::matrix({{1, 0}, {0, 1}}), Tensor::matrix({{3, 4}, {5, 6}}));
        CHECK(bitwise_equal(c, Tensor::matrix({{3, 4}, {5, 6}})));
    }
    SUBCASE("1x1") { CHECK(matmul(Tensor::matrix({{2}}), Tensor::matrix({{7}})).item() == 14); }
    SUBCASE("shape mismatch") {
        CHECK(kind_of([] { matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})); }) == ErrorKind::ShapeMismatch);
    }
    SUBCASE("random 5x4 * 4x3 against triple loop") {
        Rng rng(7);
        Tensor a = oracle::random_tensor(rng, {5, 4});
        Tensor b = oracle::random_tensor(rng, {4, 3});
        CHECK(oracle::max_abs_diff(oracle::matmul(oracle::to_mat(a), oracle::to_mat(b)), matmul(a, b)) < 1e-6);
    }
    SUBCASE("shapes up to 8x8x8 against triple loop") {
        Rng rng(11);
        for (std::size_t m = 1; m <= 8; ++m)
            for (std::size_t k = 1; k <= 8; k += 3)
                for (std::size_t n = 1; n <= 8; n += 2) {
                    Tensor a = oracle::random_tensor(rng, {m, k});
                    Tensor b = oracle::random_tensor(rng, {k, n});
                    CHECK(oracle::max_abs_diff(oracle::matmul(oracle::to_mat(a), oracle::to_mat(b)), matmul(a, b)) < 1e-12);
                }
    }
}

TEST_CASE("transpose and concat against loops") {
    Rng rng(3);
    for (std::size_t m = 1; m <= 8; m += 2) {
        for (std::size_t n = 1; n <= 8; n += 3) {
            Tensor x = oracle::random_tensor(rng, {m, n});
            Tensor t = transpose(x);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) CHECK(t.at(j, i) == x.at(i, j));

            Tensor y = oracle::random_tensor(rng, {m, 2});
            Tensor c = concat({x, y}, 1);
            REQUIRE(c.shape() == Shape{m, n + 2});
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) CHECK(c.at(i, j) == x.at(i, j));
                for (std::size_t j = 0; j < 2; ++j) CHECK(c.at(i, n + j) == y.at(i, j));
            }
            Tensor r = concat({x, x}, 0);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) CHECK(r.at(m + i, j) == x.at(i, j));
        }
    }
    CHECK(kind_of([] { concat({Tensor::zeros({2, 2}), Tensor::zeros({3, 3})}, 1); }) == ErrorKind::ShapeMismatch);
}

TEST_CASE("softmax") {
    SUBCASE("uniform") {
        Tensor s = softmax(Tensor::vector({0, 0, 0}), 0);
        for (Scalar v : s.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));
    }
    SUBCASE("ln 2") {
        Tensor s = softmax(Tensor::vector({0, std::log(2.0)}), 0);
        CHECK(s[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
        CHECK(s[1] == doctest::Approx(2.0 / 3).epsilon(1e-12));
    }
    SUBCASE("large inputs do not overflow") {
        Tensor s = softmax(Tensor::vector({1000, 1000}), 0);
        CHECK(s[0] == 0.5);
        CHECK(s[1] == 0.5);
    }
    SUBCASE("invalid axis") {
        CHECK(kind_of([] { softmax(Tensor::zeros({2, 2}), 2); }) == ErrorKind::InvalidAxis);
        CHECK(kind_of([] { softmax(Tensor::zeros({2, 2}), -3); }) == ErrorKind::InvalidAxis);
    }
    SUBCASE("slices sum to one on random shapes, both axes") {
        Rng rng(5);
        for (int trial = 0; trial < 40; ++trial) {
            const std::size_t m = 1 + rng.index(9), n = 1 + rng.index(9);
            Tensor x = oracle::random_tensor(rng, {m, n}, -20, 20);
            Tensor rows = softmax(x, -1), cols = softmax(x, -2);
            for (std::size_t i = 0; i < m; ++i) {
                double total = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    CHECK(rows.at(i, j) >= 0);
                    total += rows.at(i, j);
                }
                CHECK(std::abs(total - 1) <= 1e-6);
            }
            for (std::size_t j = 0; j < n; ++j) {
                double total = 0;
                for (std::size_t i = 0; i < m; ++i) total += cols.at(i, j);
                CHECK(std::abs(total - 1) <= 1e-6);
            }
        }
    }
}

TEST_CASE("backward basics") {
    SUBCASE("sum of squares") {
        Tensor x = Tensor::vector({1, 2, 3}, true);
        GradientTape tape;
        {
            TapeScope scope(tape);
            Tensor root = sum(mul(x, x));
            backward(root, tape);
        }
        REQUIRE(x.has_grad());
        CHECK(x.grad()[0] == 2);
        CHECK(x.grad()[1] == 4);
        CHECK(x.grad()[2] == 6);
    }
    SUBCASE("non-scalar root") {
        Tensor x = Tensor::vector({1, 2}, true);
        GradientTape tape;
        TapeScope scope(tape);
        Tensor y = scale(x, 2);
        CHECK(kind_of([&] { tape.backward(y); }) == ErrorKind::NotScalar);
    }
    SUBCASE("detached root") {
        GradientTape tape;
        Tensor c = Tensor::scalar(3);
        CHECK(kind_of([&] { tape.backward(c); }) == ErrorKind::DetachedTensor);
        GradientTape other;
        Tensor x = Tensor::scalar(1, true);
        Tensor y;
        {
            TapeScope scope(other);
            y = scale(x, 2);
        }
        CHECK(kind_of([&] { tape.backward(y); }) == ErrorKind::DetachedTensor);
    }
    SUBCASE("no tape means no recording") {
        Tensor x = Tensor::scalar(1, true);
        Tensor y = scale(x, 2);
        CHECK_FALSE(y.requires_grad());
    }
    SUBCASE("elementwise_min ties route to the first argument") {
        Tensor a = Tensor::vector({1, 2, 3}, true);
        Tensor b = Tensor::vector({1, 1, 5}, true);
        GradientTape tape;
        {
            TapeScope scope(tape);
            tape.backward(sum(elementwise_min(a, b)));
        }
        CHECK(a.grad()[0] == 1);
        CHECK(b.grad()[0] == 0);
        CHECK(a.grad()[1] == 0);
        CHECK(b.grad()[1] == 1);
        CHECK(a.grad()[2] == 1);
    }
}

TEST_CASE("softmax-then-dot composite matches finite differences") {
    Rng rng(21);
    Tensor x = oracle::random_tensor(rng, {4});
    Tensor w = oracle::random_tensor(rng, {4});
    x.set_requires_grad(true);
    GradientTape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum(mul(softmax(x, 0), w)));
    }
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    auto numeric = oracle::numeric_gradient(x, [&] { return sum(mul(softmax(x, 0), w)).item(); });
    CHECK(oracle::relative_error(analytic, numeric) < 1e-4);
}

TEST_CASE("matmul loss gradient matches finite differences") {
    Rng rng(22);
    std::vector<Tensor> leaves = {oracle::random_tensor(rng, {3, 3}), oracle::random_tensor(rng, {3, 3})};
    auto build = [](const std::vector<Tensor>& l) {
        Tensor c = matmul(l[0], l[1]);
        return sum(mul(c, c));
    };
    CHECK(gradcheck::max_relative_error(leaves, build, 1) < 1e-4);
}

TEST_CASE("every differentiable op matches finite differences over 20 seeds") {
    auto cases = opcases::tensor_ops();
    for (auto& c : opcases::attention_ops()) cases.push_back(c);
    for (const auto& c : cases) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            Rng rng(seed * 97 + 13);
            std::vector<Tensor> leaves;
            for (const Shape& s : c.shapes) leaves.push_back(oracle::random_tensor(rng, s, -2, 2));
            const double err = gradcheck::max_relative_error(leaves, c.build, seed);
            INFO(c.name << " seed " << seed << " err " << err);
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("determinism of forward ops") {
    Rng r1(99), r2(99);
    Tensor a = oracle::random_tensor(r1, {6, 6});
    Tensor b = oracle::random_tensor(r2, {6, 6});
    CHECK(bitwise_equal(softmax(matmul(a, a), -1), softmax(matmul(b, b), -1)));
}

TEST_CASE("FTEN round trip and format errors") {
    Rng rng(4);
    Tensor t = oracle::random_tensor(rng, {2, 3, 4});
    const std::string bytes = encode_ften(t);
    CHECK(bytes.substr(0, 4) == "FTEN");
    CHECK(static_cast<int>(bytes[4]) == 1);
    CHECK(static_cast<int>(bytes[6]) == 3);
    CHECK(bytes.size() == 7 + 3 * 8 + 24 * sizeof(Scalar));
    CHECK(bitwise_equal(decode_ften(bytes), t));

    CHECK(kind_of([&] { decode_ften(bytes.substr(0, bytes.size() - 1)); }) == ErrorKind::FormatError);
    std::string bad = bytes;
    bad[0] = 'X';
    CHECK(kind_of([&] { decode_ften(bad); }) == ErrorKind::FormatError);
    bad = bytes;
    bad[4] = 2;
    CHECK(kind_of([&] { decode_ften(bad); }) == ErrorKind::FormatError);

    // f32 payloads widen on load
    Tensor small = Tensor::vector({0.5, -2.25});
    Tensor back = decode_ften(encode_ften(small, FtenDtype::F32));
    CHECK(bitwise_equal(back, small));
}
