#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "disa/gradcheck.hpp"
#include "disa/ops.hpp"
#include "disa/tensor.hpp"

using namespace disa;
using ad::Tensor;

namespace {

std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> d;
    std::vector<double> v(n);
    for (double& x : v) x = d(rng);
    return v;
}

std::vector<double> probabilities(std::size_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.01, 1.0);
    std::vector<double> v(n);
    double s = 0;
    for (double& x : v) s += (x = u(rng));
    for (double& x : v) x /= s;
    return v;
}

}  // namespace

TEST_CASE("tensor construction validates shape against value count") {
    CHECK_THROWS_AS(Tensor::from({2, 3}, std::vector<double>(5)), std::invalid_argument);
    CHECK_THROWS_AS(Tensor::from({2, 0}, {}), std::invalid_argument);
    const Tensor t = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK(t.at(1, 2) == 6.0);
    CHECK_FALSE(t.requires_grad());
}

TEST_CASE("matmul of 2x3 and 3x1 all-ones gives 3 everywhere") {
    const Tensor a = Tensor::full({2, 3}, 1.0), b = Tensor::full({3, 1}, 1.0);
    const Tensor c = ad::matmul(a, b);
    REQUIRE(c.shape() == ad::Shape{2, 1});
    CHECK(c[0] == 3.0);
    CHECK(c[1] == 3.0);
}

TEST_CASE("matmul agrees with a triple loop") {
    std::mt19937_64 rng(5);
    const std::size_t m = 7, k = 9, n = 5;
    const auto av = random_vector(m * k, rng), bv = random_vector(k * n, rng);
    const Tensor c = ad::matmul(Tensor::matrix(m, k, av), Tensor::matrix(k, n, bv));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0;
            for (std::size_t p = 0; p < k; ++p) s += av[i * k + p] * bv[p * n + j];
            CHECK(c.at(i, j) == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("shape mismatch errors name the primitive and both shapes") {
    const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({2, 2});
    try {
        ad::matmul(a, b);
        FAIL("expected a throw");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[2x2]") != std::string::npos);
    }
    CHECK_THROWS_AS(ad::add(a, b), std::invalid_argument);
}

TEST_CASE("log and sqrt reject non-positive inputs") {
    CHECK_THROWS_AS(ad::log(Tensor::vector({1.0, 0.0})), std::domain_error);
    CHECK_THROWS_AS(ad::sqrt(Tensor::vector({-1.0})), std::domain_error);
    CHECK(ad::log(Tensor::vector({std::exp(1.0)}))[0] == doctest::Approx(1.0));
}

TEST_CASE("layer-norm of a constant vector is all zeros") {
    const Tensor y = ad::layer_norm(Tensor::vector({3.0, 3.0, 3.0, 3.0}));
    for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("layer-norm matches mean/variance formula") {
    std::mt19937_64 rng(2);
    const auto x = random_vector(6, rng);
    const Tensor y = ad::layer_norm(Tensor::vector(x));
    double mu = 0, var = 0;
    for (double v : x) mu += v / 6;
    for (double v : x) var += (v - mu) * (v - mu) / 6;
    for (std::size_t i = 0; i < 6; ++i) CHECK(y[i] == doctest::Approx((x[i] - mu) / std::sqrt(var + 1e-5)).epsilon(1e-12));
}

TEST_CASE("gelu(0) is 0 and follows the tanh form") {
    CHECK(ad::gelu(Tensor::vector({0.0}))[0] == 0.0);
    const double x = 1.3;
    const double ref = 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x)));
    CHECK(ad::gelu(Tensor::vector({x}))[0] == doctest::Approx(ref).epsilon(1e-14));
}

TEST_CASE("softmax with temperature") {
    SUBCASE("uniform input gives uniform output") {
        for (double tau : {0.07, 1.0, 5.0}) {
            const Tensor p = ad::softmax(Tensor::vector({2.5, 2.5, 2.5, 2.5}), tau);
            for (double v : p.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
        }
    }
    SUBCASE("(1, 0) at tau 1 is (e/(e+1), 1/(e+1))") {
        const Tensor p = ad::softmax(Tensor::vector({1.0, 0.0}), 1.0);
        CHECK(p[0] == doctest::Approx(0.7311).epsilon(1e-4));
        CHECK(p[1] == doctest::Approx(0.2689).epsilon(1e-4));
        CHECK(p[0] == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)).epsilon(1e-15));
    }
    SUBCASE("sharpens monotonically as tau shrinks") {
        double prev = 0.0;
        for (double tau : {1.0, 0.1, 0.01}) {
            const double p0 = ad::softmax(Tensor::vector({1.0, 0.0}), tau)[0];
            CHECK(p0 > prev);
            prev = p0;
        }
        CHECK(prev == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("large logits do not overflow") {
        const Tensor p = ad::softmax(Tensor::vector({1000.0, 999.0}), 1.0);
        CHECK(std::isfinite(p[0]));
        CHECK(p[0] + p[1] == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK_THROWS(ad::softmax(Tensor::vector({1.0}), 0.0));
}

TEST_CASE("softmax sums to one and is shift invariant") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        auto v = random_vector(8, rng);
        const Tensor p = ad::softmax(Tensor::vector(v), 0.07);
        double s = 0;
        for (double x : p.values()) s += x;
        CHECK(std::abs(s - 1.0) <= 1e-12);
        for (double& x : v) x += 3.7;
        const Tensor q = ad::softmax(Tensor::vector(v), 0.07);
        for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(p[i] - q[i]) <= 1e-12);
    }
}

TEST_CASE("cosine similarity examples") {
    const Tensor a = Tensor::vector({0.3, -1.2, 2.0});
    CHECK(ad::cosine_similarity(a, a).item() == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(ad::cosine_similarity(Tensor::vector({1, 0}), Tensor::vector({0, 1})).item() == 0.0);
    CHECK(ad::cosine_similarity(Tensor::vector({1, 0}), Tensor::vector({-1, 0})).item() == -1.0);
    CHECK_THROWS_AS(ad::cosine_similarity(Tensor::vector({0, 0}), Tensor::vector({1, 0})), std::domain_error);
    CHECK_THROWS_AS(ad::cosine_similarity(Tensor::vector({1, 0}), Tensor::vector({1, 0, 0})), std::invalid_argument);
}

TEST_CASE("cosine similarity is stationary at a = b") {
    const Tensor a = Tensor::vector({0.5, -0.25, 1.5}, true);
    const Tensor b = Tensor::vector({0.5, -0.25, 1.5});
    ad::backward(ad::cosine_similarity(a, b));
    for (double g : a.grad()) CHECK(std::abs(g) < 1e-15);
}

TEST_CASE("kl divergence examples") {
    CHECK(ad::kl_divergence(Tensor::vector({0.2, 0.8}), Tensor::vector({0.2, 0.8})).item() == 0.0);
    CHECK(ad::kl_divergence(Tensor::vector({1.0, 0.0}), Tensor::vector({0.5, 0.5})).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK_THROWS_AS(ad::kl_divergence(Tensor::vector({1.0}), Tensor::vector({0.5, 0.5})), std::invalid_argument);
}

TEST_CASE("kl divergence matches a direct sum and is non-negative") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        const auto p = probabilities(8, rng), q = probabilities(8, rng);
        double ref = 0;
        for (std::size_t i = 0; i < 8; ++i) ref += p[i] * std::log(p[i] / q[i]);
        const double kl = ad::kl_divergence(Tensor::vector(p), Tensor::vector(q)).item();
        CHECK(std::abs(kl - ref) <= 1e-10);
        CHECK(kl >= 0.0);
    }
}

TEST_CASE("kl divergence floors q so saturated softmaxes stay finite") {
    const double kl = ad::kl_divergence(Tensor::vector({0.5, 0.5}), Tensor::vector({1.0, 0.0})).item();
    CHECK(std::isfinite(kl));
    CHECK(kl == doctest::Approx(0.5 * std::log(0.5 / 1.0) + 0.5 * std::log(0.5 / ad::kKlFloor)));
}

TEST_CASE("backward of x*x at 3 is 6") {
    const Tensor x = Tensor::scalar(3.0, true);
    ad::backward(ad::mul(x, x));
    CHECK(x.grad()[0] == 6.0);
}

TEST_CASE("backward contract") {
    const Tensor x = Tensor::vector({1.0, 2.0}, true);
    const Tensor c = Tensor::vector({4.0, 5.0});
    SUBCASE("non-scalar root is rejected") { CHECK_THROWS_AS(ad::backward(ad::mul(x, c)), std::invalid_argument); }
    SUBCASE("second backward on the same root is rejected") {
        const Tensor root = ad::sum_all(ad::mul(x, c));
        ad::backward(root);
        CHECK_THROWS_AS(ad::backward(root), std::logic_error);
    }
    SUBCASE("constants never accumulate gradient") {
        ad::backward(ad::sum_all(ad::mul(x, c)));
        CHECK_FALSE(c.has_grad());
        CHECK(x.grad()[0] == 4.0);
        CHECK(x.grad()[1] == 5.0);
    }
    SUBCASE("ops on constants record nothing") {
        const Tensor y = ad::mul(c, c);
        CHECK_FALSE(y.requires_grad());
        CHECK(y.values()[1] == 25.0);
    }
}

TEST_CASE("shared subexpressions accumulate gradient from every use") {
    const Tensor x = Tensor::vector({0.5, -1.0}, true);
    const Tensor y = ad::exp(x);
    ad::backward(ad::sum_all(ad::add(y, ad::mul(y, y))));
    for (std::size_t i = 0; i < 2; ++i) {
        const double e = std::exp(x[i]);
        CHECK(x.grad()[i] == doctest::Approx(e + 2 * e * e).epsilon(1e-14));
    }
}

TEST_CASE("forward evaluation is bit-deterministic") {
    std::mt19937_64 rng(3);
    const auto a = random_vector(20, rng), b = random_vector(20, rng);
    auto run = [&] {
        const Tensor m = ad::matmul(Tensor::matrix(4, 5, a), ad::transpose(Tensor::matrix(4, 5, b)));
        const Tensor out = ad::softmax(ad::gelu(m), std::size_t{1});
        return std::vector<double>(out.values().begin(), out.values().end());
    };
    CHECK(run() == run());
}

TEST_CASE("relative error uses the floor for near-zero derivatives") {
    CHECK(gradcheck::relative_error(1.0, 1.0) == 0.0);
    CHECK(gradcheck::relative_error(2.0, 1.0) == doctest::Approx(0.5));
    CHECK(gradcheck::relative_error(0.0, 1e-9) == doctest::Approx(1e-9 / gradcheck::kFloor));
}

TEST_CASE("finite-difference oracle catches a wrong vector-Jacobian rule") {
    // x -> x^2 with a deliberately halved derivative.
    gradcheck::Function broken = [](const std::vector<Tensor>& in) {
        const Tensor& a = in[0];
        std::vector<double> v;
        for (double x : a.values()) v.push_back(x * x);
        return Tensor::make(a.shape(), std::move(v), "broken-square", {a}, [](ad::detail::Node& self) {
            auto& parent = *self.parents[0];
            if (!parent.requires_grad) return;
            parent.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) parent.grad[i] += self.grad[i] * parent.value[i];
        });
    };
    gradcheck::Function honest = [](const std::vector<Tensor>& in) { return ad::mul(in[0], in[0]); };
    std::mt19937_64 rng(4);
    const std::vector<Tensor> inputs{Tensor::vector({0.7, -1.3, 2.1})};
    CHECK(gradcheck::check_case(broken, inputs, rng).max_rel_error > 0.4);
    CHECK(gradcheck::check_case(honest, inputs, rng).max_rel_error < 1e-8);
}

TEST_CASE("every primitive passes the gradient oracle over 100 random cases") {
    gradcheck::Options o;
    o.cases = 100;
    o.include_encoder = false;
    const auto checks = gradcheck::run(o);
    const char* required[] = {"add", "sub", "mul", "scale", "matmul", "transpose", "concat", "slice", "mean-axis",
                              "sum-axis", "exp", "log", "sqrt", "power", "gelu", "layer-norm", "embedding-lookup",
                              "softmax-axis", "softmax-temperature", "cosine-similarity", "kl-divergence"};
    for (const char* name : required) {
        const auto it = std::find_if(checks.begin(), checks.end(), [&](const auto& c) { return c.name == name; });
        REQUIRE_MESSAGE(it != checks.end(), name);
        CHECK_MESSAGE(it->cases >= 100, name);
        CHECK_MESSAGE(it->max_rel_error <= 1e-4, name << " max rel err " << it->max_rel_error);
    }
}
