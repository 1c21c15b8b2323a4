#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "disa/data.hpp"
#include "disa/encoders.hpp"
#include "disa/ops.hpp"
#include "disa/regularizers.hpp"

using namespace disa;
using namespace disa::regularizers;
using ad::Tensor;

namespace {

std::vector<double> randn(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> d;
    std::vector<double> v(n);
    for (double& x : v) x = d(rng);
    return v;
}

// Reference softmax and KL, written out in plain loops.
std::vector<double> softmax_ref(const std::vector<double>& z, double tau) {
    double m = z[0];
    for (double x : z) m = std::max(m, x);
    std::vector<double> p(z.size());
    double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp((z[i] - m) / tau));
    for (double& x : p) x /= s;
    return p;
}

double kl_ref(const std::vector<double>& p, const std::vector<double>& q) {
    double k = 0;
    for (std::size_t i = 0; i < p.size(); ++i) k += p[i] * (std::log(p[i]) - std::log(q[i]));
    return k;
}

ScoreVector tagged(std::vector<double> sims, Pairing tag, ImageInput input = ImageInput::full) {
    return {Tensor::vector(std::move(sims)), tag, input};
}

std::vector<double> values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST_CASE("score_vector: orthonormal rows, shape, cosine oracle, provenance tag") {
    const Tensor eye = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    const auto s = score_vector({Tensor::vector({0, 2.5, 0}), Branch::prompted}, {eye, Branch::frozen});
    CHECK(values(s.sims) == std::vector<double>{0, 1, 0});
    CHECK(s.tag == Pairing::po);

    std::mt19937_64 rng(1);
    const auto f = randn(16, rng), m = randn(5 * 16, rng);
    const auto sims = values(cosine_scores(Tensor::vector(f), Tensor::matrix(5, 16, m)));
    REQUIRE(sims.size() == 5);
    for (std::size_t r = 0; r < 5; ++r) {
        const std::span<const double> row(m.data() + r * 16, 16);
        CHECK(std::abs(sims[r] - ad::cosine_similarity_value(f, row)) <= 1e-12);
    }
    CHECK_THROWS_AS(cosine_scores(Tensor::zeros({3}), eye), std::domain_error);
    CHECK_THROWS_AS(cosine_scores(Tensor::vector({1, 2}), eye), std::invalid_argument);
}

TEST_CASE("cross-entropy") {
    CHECK(cross_entropy(Tensor::vector({0.3, 0.3, 0.3, 0.3}), 2, 0.07).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-9));
    CHECK(std::abs(cross_entropy(Tensor::vector({0.3, 0.3, 0.3, 0.3}), 2, 0.07).item() - 1.3863) <= 1e-4);
    CHECK(cross_entropy(Tensor::vector({-1, 1, -1}), 1, 0.01).item() < 0.01);
    CHECK_THROWS_AS(cross_entropy(Tensor::vector({0, 0}), 2, 0.07), std::out_of_range);
    CHECK_THROWS_AS(cross_entropy(Tensor::vector({0, 0}), 0, 0.0), std::invalid_argument);

    const Tensor sims = Tensor::vector({0.2, 0.2, 0.2, 0.2}, true);
    ad::backward(cross_entropy(sims, 1, 0.07));
    CHECK(sims.grad()[1] < 0.0);  // descent raises sims[y]
    for (std::size_t i : {0u, 2u, 3u}) CHECK(sims.grad()[i] > 0.0);
}

TEST_CASE("cir and sr match a softmax-then-KL composition oracle") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = randn(8, rng), b = randn(8, rng);
        for (double& x : a) x *= 0.3;
        for (double& x : b) x *= 0.3;
        const double ref = kl_ref(softmax_ref(a, 0.07), softmax_ref(b, 0.07));
        const double cir = cir_loss(tagged(a, Pairing::po, ImageInput::masked), tagged(b, Pairing::op), 0.07).item();
        const double sr = sr_loss(tagged(a, Pairing::pp), tagged(b, Pairing::oo), 0.07).item();
        CHECK(std::abs(cir - ref) <= 1e-10);
        CHECK(std::abs(sr - ref) <= 1e-12 * std::max(1.0, ref));
        CHECK(cir >= 0.0);
        CHECK(sr >= 0.0);
    }
}

TEST_CASE("KL losses vanish on identical scores and reject length mismatch") {
    const std::vector<double> s{0.1, -0.3, 0.5, 0.2};
    CHECK(cir_loss(tagged(s, Pairing::po, ImageInput::masked), tagged(s, Pairing::op), 0.07).item() ==
          doctest::Approx(0.0));
    CHECK(sr_loss(tagged(s, Pairing::pp), tagged(s, Pairing::oo), 0.07).item() == doctest::Approx(0.0));
    CHECK_THROWS_AS(sr_loss(tagged(s, Pairing::pp), tagged({0.1, 0.2}, Pairing::oo), 0.07), std::invalid_argument);
}

TEST_CASE("feature pairing discipline is enforced through tags") {
    const std::vector<double> s{0.1, 0.2, 0.3};
    // cir's first argument must come from the masked image.
    CHECK_THROWS_AS(cir_loss(tagged(s, Pairing::po), tagged(s, Pairing::op), 0.07), std::invalid_argument);
    CHECK_THROWS_AS(cir_loss(tagged(s, Pairing::pp, ImageInput::masked), tagged(s, Pairing::op), 0.07),
                    std::invalid_argument);
    CHECK_THROWS_AS(cir_loss(tagged(s, Pairing::po, ImageInput::masked), tagged(s, Pairing::oo), 0.07),
                    std::invalid_argument);
    // sr, ce and dir must see the full image.
    CHECK_THROWS_AS(sr_loss(tagged(s, Pairing::pp, ImageInput::masked), tagged(s, Pairing::oo), 0.07),
                    std::invalid_argument);
    CHECK_THROWS_AS(sr_loss(tagged(s, Pairing::pp), tagged(s, Pairing::op), 0.07), std::invalid_argument);
    CHECK_THROWS_AS(ce_loss(tagged(s, Pairing::pp, ImageInput::masked), 0, 0.07), std::invalid_argument);
    CHECK_THROWS_AS(ce_loss(tagged(s, Pairing::po), 0, 0.07), std::invalid_argument);
    const Tensor m = Tensor::vector({1, 0, 0});
    CHECK_THROWS_AS(dir_loss({Tensor::vector({1, 1, 0}), Branch::prompted, ImageInput::masked, 4}, m),
                    std::invalid_argument);
    CHECK_THROWS_AS(dir_loss({Tensor::vector({1, 1, 0}), Branch::frozen}, m), std::invalid_argument);
}

TEST_CASE("directional loss: alignment, scale blindness, antipode, argmin set") {
    const Tensor m = Tensor::vector({0.3, -1.2, 0.8});
    auto dir = [&](std::vector<double> f) { return dir_loss({Tensor::vector(std::move(f)), Branch::prompted}, m).item(); };
    CHECK(dir({0.3, -1.2, 0.8}) == doctest::Approx(0.0));
    for (double c : {0.01, 0.5, 7.0, 300.0}) CHECK(std::abs(dir({0.3 * c, -1.2 * c, 0.8 * c})) <= 1e-12);
    CHECK(dir({-0.3, 1.2, -0.8}) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(dir({-1.2, -0.3, 0.8}) > 1e-6);  // rotated
    CHECK_THROWS_AS(dir_loss({Tensor::vector({1, 0, 0}), Branch::prompted}, Tensor::zeros({3})), std::domain_error);
}

TEST_CASE("alignment variants") {
    const Tensor m = Tensor::vector({0.6, 0.8});
    for (auto v : {AlignmentVariant::norm, AlignmentVariant::mse, AlignmentVariant::direction})
        CHECK(alignment_variant_loss(m, m, v).item() == doctest::Approx(0.0));
    const Tensor f2 = Tensor::vector({1.2, 1.6});
    CHECK(alignment_variant_loss(f2, m, AlignmentVariant::norm).item() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(alignment_variant_loss(f2, m, AlignmentVariant::direction).item()) <= 1e-12);
    CHECK(alignment_variant_loss(Tensor::vector({1, 0}), Tensor::vector({0, 1}), AlignmentVariant::mse).item() ==
          doctest::Approx(1.0));
    CHECK(parse_alignment_variant("mse") == AlignmentVariant::mse);
    CHECK(std::string(alignment_variant_name(AlignmentVariant::direction)) == "direction");
    CHECK_THROWS_AS(parse_alignment_variant("cosine"), std::invalid_argument);
}

TEST_CASE("total loss arithmetic") {
    const auto r = total_loss(1.0, 0.5, 0.25, 0.1, 12.0);
    CHECK(r.total == doctest::Approx(2.95).epsilon(1e-12));
    CHECK(total_loss(1.0, 0.5, 0.25, 0.1, 0.0).total == doctest::Approx(1.75));
    CHECK_THROWS_AS(total_loss(1, 1, 1, 1, -1.0), std::invalid_argument);

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    for (int i = 0; i < 100; ++i) {
        const double ce = u(rng), sr = u(rng), cir = u(rng), dir = u(rng), lambda = 4 * u(rng);
        const auto rep = total_loss(ce, sr, cir, dir, lambda);
        CHECK(std::abs(rep.total - (ce + sr + cir + lambda * dir)) <= 1e-9);
        const double t = total_loss(Tensor::scalar(ce), Tensor::scalar(sr), Tensor::scalar(cir), Tensor::scalar(dir),
                                    lambda)
                             .item();
        CHECK(std::abs(t - rep.total) <= 1e-9);
    }
    CHECK(total_loss(Tensor::scalar(2.0), Tensor{}, Tensor{}, Tensor{}, 12.0).item() == 2.0);
    CHECK_THROWS_AS(total_loss(Tensor{}, Tensor{}, Tensor{}, Tensor{}, 12.0), std::invalid_argument);
}

TEST_CASE("prototypes") {
    using Entry = std::pair<std::vector<double>, int>;
    const std::vector<Entry> feats{{{1, 0}, 0}, {{0, 1}, 0}, {{0.3, -0.7}, 1}, {{2, 5}, 2}, {{-2, -5}, 2}};
    const auto table = compute_prototypes(feats);
    CHECK(table.mean(0) == std::vector<double>{0.5, 0.5});
    CHECK(table.mean(1) == std::vector<double>{0.3, -0.7});
    CHECK(table.mean(2) == std::vector<double>{0, 0});
    CHECK(table.count(0) == 2);
    CHECK(table.count(1) == 1);
    CHECK(table.width() == 2);
    CHECK(table.class_ids() == std::vector<int>{0, 1, 2});
    CHECK_THROWS_AS(dir_loss({Tensor::vector({1, 1}), Branch::prompted}, table.tensor(2)), std::domain_error);
    CHECK_THROWS_AS(table.mean(9), std::out_of_range);

    const std::vector<int> expected{0, 1, 3};
    try {
        compute_prototypes(feats, expected);
        FAIL("expected a throw");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("class 3") != std::string::npos);
    }
}

TEST_CASE("loss stack on a live encoder: gradient provenance and degenerate views") {
    encoders::DualEncoder enc(encoders::EncoderConfig{}, encoders::Vocabulary(data::vocabulary_words()), 5);
    const std::vector<int> ids{0, 1, 2, 3};
    for (int id : ids) enc.register_class(id, data::toy_class(id).name);
    enc.freeze();
    const auto checksum = enc.checksum();

    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> px(16 * 48);
    for (double& x : px) x = u(rng);
    const Tensor img = Tensor::matrix(16, 48, px);

    const Tensor f_o = enc.encode_image(img).feature;
    const Tensor g_o = enc.frozen_class_matrix(ids);
    const ScoreVector q_oo = score_vector({f_o, Branch::frozen}, {g_o, Branch::frozen});

    SUBCASE("promptless, unmasked views make cir and sr vanish together") {
        const ScoreVector po = score_vector({f_o, Branch::prompted, ImageInput::masked, 0}, {g_o, Branch::frozen});
        const ScoreVector op = score_vector({f_o, Branch::frozen}, {g_o, Branch::prompted});
        const ScoreVector pp = score_vector({f_o, Branch::prompted}, {g_o, Branch::prompted});
        CHECK(std::abs(cir_loss(po, op, kDefaultTemperature).item()) <= 1e-12);
        CHECK(std::abs(sr_loss(pp, q_oo, kDefaultTemperature).item()) <= 1e-12);
    }

    SUBCASE("total gradient reaches prompts and never the backbone") {
        auto bank = enc.make_prompts({4, 4, 4}, rng);
        std::vector<bool> keep(16, true);
        keep[2] = keep[7] = keep[11] = keep[12] = false;
        const Tensor f_p = enc.encode_image(img, &bank).feature;
        const Tensor f_pm = enc.encode_image(img, &bank, &keep).feature;
        const Tensor g_p = enc.encode_texts(ids, &bank);
        const ScoreVector pp = score_vector({f_p, Branch::prompted}, {g_p, Branch::prompted});
        const ScoreVector po = score_vector({f_pm, Branch::prompted, ImageInput::masked, 4}, {g_o, Branch::frozen});
        const ScoreVector op = score_vector({f_o, Branch::frozen}, {g_p, Branch::prompted});
        const Tensor m = Tensor::vector(values(f_o));
        const Tensor total = total_loss(ce_loss(pp, 1, kDefaultTemperature), sr_loss(pp, q_oo, kDefaultTemperature),
                                        cir_loss(po, op, kDefaultTemperature), dir_loss({f_p, Branch::prompted}, m),
                                        kDefaultLambda);
        ad::backward(total);
        for (const auto* p : bank.parameters()) {
            REQUIRE(p->has_grad());
            double n = 0;
            for (double g : p->grad()) n += g * g;
            CHECK(n > 0.0);
        }
        CHECK_FALSE(g_o.has_grad());
        CHECK_FALSE(f_o.has_grad());
        CHECK(enc.checksum() == checksum);
    }
}
