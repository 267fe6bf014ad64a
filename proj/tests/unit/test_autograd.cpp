#include "doctest.h"

#include <cmath>

#include "support.hpp"

using namespace fact;
using fact::testing::gradient_errors;
using fact::testing::random_matrix;
using V = ag::Var<double>;

namespace {

V weighted_sum(ag::Tape<double>& t, const V& x, std::uint64_t seed) {
    // A random linear functional keeps every output entry in the gradient.
    return ag::sum(ag::mul(x, t.constant(random_matrix(x.rows(), x.cols(), seed))));
}

void check_all(const std::vector<double>& errors, double tol = 1e-6) {
    for (double e : errors) CHECK(e < tol);
}

}  // namespace

TEST_CASE("matmul add sub mul gradients") {
    check_all(gradient_errors([](auto& t, const auto& x) { return weighted_sum(t, ag::matmul(x[0], x[1]), 1); },
                              {random_matrix(3, 4, 1), random_matrix(4, 2, 2)}));
    check_all(gradient_errors(
        [](auto& t, const auto& x) { return weighted_sum(t, ag::mul(ag::add(x[0], x[1]), ag::sub(x[0], x[1])), 2); },
        {random_matrix(3, 3, 3), random_matrix(3, 3, 4)}));
}

TEST_CASE("scale_by add_row tanh gelu silu gradients") {
    check_all(gradient_errors([](auto& t, const auto& x) { return weighted_sum(t, ag::scale_by(x[0], x[1]), 3); },
                              {random_matrix(2, 5, 5), random_matrix(1, 1, 6)}));
    check_all(gradient_errors([](auto& t, const auto& x) { return weighted_sum(t, ag::add_row(x[0], x[1]), 4); },
                              {random_matrix(4, 3, 7), random_matrix(1, 3, 8)}));
    check_all(gradient_errors(
        [](auto& t, const auto& x) { return weighted_sum(t, ag::silu(ag::gelu(ag::tanh(x[0]))), 5); },
        {random_matrix(3, 4, 9)}));
}

TEST_CASE("linear and layer_norm gradients") {
    check_all(gradient_errors([](auto& t, const auto& x) { return weighted_sum(t, ag::linear(x[0], x[1], x[2]), 6); },
                              {random_matrix(5, 3, 10), random_matrix(3, 4, 11), random_matrix(1, 4, 12)}));
    check_all(gradient_errors(
        [](auto& t, const auto& x) { return weighted_sum(t, ag::layer_norm(x[0], x[1], x[2]), 7); },
        {random_matrix(4, 6, 13), random_matrix(1, 6, 14), random_matrix(1, 6, 15)}));
}

TEST_CASE("attention gradients, one and two heads") {
    for (int heads : {1, 2}) {
        check_all(gradient_errors(
            [heads](auto& t, const auto& x) { return weighted_sum(t, ag::attention(x[0], x[1], x[2], heads), 8); },
            {random_matrix(3, 4, 16), random_matrix(5, 4, 17), random_matrix(5, 4, 18)}));
    }
}

TEST_CASE("concat_rows and slice_rows gradients") {
    check_all(gradient_errors(
        [](auto& t, const auto& x) { return weighted_sum(t, ag::slice_rows(ag::concat_rows(x[0], x[1]), 1, 3), 9); },
        {random_matrix(2, 3, 19), random_matrix(3, 3, 20)}));
}

TEST_CASE("attention matches an explicit softmax on two tokens") {
    ag::Tape<double> t;
    Matrix<double> q(1, 2), k(2, 2), v(2, 2);
    q << 1, 0;
    k << 1, 0, 0, 1;
    v << 1, 2, 3, 4;
    auto out = ag::attention(t.constant(q), t.constant(k), t.constant(v), 1).value();
    // scores (1, 0) / sqrt(2)
    const double a = std::exp(1 / std::sqrt(2.0)), b = 1.0;
    const double p0 = a / (a + b), p1 = b / (a + b);
    CHECK(out(0, 0) == doctest::Approx(p0 * 1 + p1 * 3).epsilon(1e-14));
    CHECK(out(0, 1) == doctest::Approx(p0 * 2 + p1 * 4).epsilon(1e-14));
}

TEST_CASE("layer_norm output rows have zero mean and unit variance") {
    ag::Tape<double> t;
    auto y = ag::layer_norm(t.constant(random_matrix(3, 8, 21, 5.0)), V{}, V{}, 0.0).value();
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
        CHECK(std::abs(y.row(r).mean()) < 1e-12);
        CHECK(std::abs((y.row(r).array() - y.row(r).mean()).square().mean() - 1.0) < 1e-10);
    }
}

TEST_CASE("shape mismatches are rejected") {
    ag::Tape<double> t;
    CHECK_THROWS_AS(ag::matmul(t.constant(random_matrix(2, 3, 1)), t.constant(random_matrix(2, 3, 2))), InvalidInput);
    CHECK_THROWS_AS(ag::attention(t.constant(random_matrix(2, 3, 1)), t.constant(random_matrix(2, 3, 2)),
                                  t.constant(random_matrix(2, 3, 3)), 2),
                    InvalidInput);
}

TEST_CASE("gradients accumulate over repeated use of one leaf") {
    ag::Tape<double> t;
    auto x = t.leaf(Matrix<double>::Constant(1, 1, 3.0), true);
    t.backward(ag::mul(x, x));
    CHECK(x.grad()(0, 0) == 6.0);
}
