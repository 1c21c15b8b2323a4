#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "disa/data.hpp"
#include "disa/encoders.hpp"
#include "disa/ops.hpp"

using namespace disa;
using ad::Tensor;
using encoders::DualEncoder;

namespace {

DualEncoder fresh_encoder(std::uint64_t seed = 7) {
    DualEncoder enc(encoders::EncoderConfig{}, encoders::Vocabulary(data::vocabulary_words()), seed);
    for (int id = 0; id < 12; ++id) enc.register_class(id, data::toy_class(id).name);
    enc.freeze();
    return enc;
}

Tensor random_image(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> v(16 * 48);
    for (double& x : v) x = u(rng);
    return Tensor::matrix(16, 48, std::move(v));
}

std::vector<double> values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST_CASE("encoder config invariants") {
    encoders::EncoderConfig c;
    CHECK_NOTHROW(c.validate());
    c.heads = 5;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = {};
    c.layers = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = {};
    c.patches = 3;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("vocabulary ids are deterministic and reserve the markers") {
    encoders::Vocabulary a(data::vocabulary_words()), b(data::vocabulary_words());
    CHECK(a.size() == b.size());
    CHECK(a.id("red") == b.id("red"));
    CHECK(a.id("red") > encoders::Vocabulary::kEos);
    CHECK_THROWS_AS(a.id("purple-ish"), std::out_of_range);
    const auto toks = a.tokenize("a photo of a red solid square");
    CHECK(toks.size() == 7);
}

TEST_CASE("promptless image encoding is the frozen view") {
    const DualEncoder enc = fresh_encoder();
    const Tensor img = random_image(1);
    const auto a = values(enc.encode_image(img).feature);
    const auto b = values(enc.encode_image(img, nullptr, nullptr, false).feature);
    CHECK(a == b);
    CHECK(a.size() == 32);
    for (double v : a) CHECK(std::isfinite(v));
}

TEST_CASE("all-true keep mask is a no-op") {
    const DualEncoder enc = fresh_encoder();
    const Tensor img = random_image(2);
    const std::vector<bool> keep(16, true);
    CHECK(values(enc.encode_image(img, nullptr, &keep).feature) == values(enc.encode_image(img).feature));
}

TEST_CASE("keep mask errors") {
    const DualEncoder enc = fresh_encoder();
    const Tensor img = random_image(3);
    const std::vector<bool> short_mask(15, true), none(16, false);
    CHECK_THROWS_AS(enc.encode_image(img, nullptr, &short_mask), std::invalid_argument);
    CHECK_THROWS_AS(enc.encode_image(img, nullptr, &none), std::invalid_argument);
    CHECK_THROWS_AS(enc.encode_image(Tensor::zeros({15, 48})), std::invalid_argument);
}

TEST_CASE("masking removes exactly the masked patches from the sequence") {
    const DualEncoder enc = fresh_encoder();
    std::vector<bool> keep(16, true);
    keep[0] = keep[5] = keep[9] = false;
    const auto out = enc.encode_image(random_image(4), nullptr, &keep, true);
    REQUIRE(out.trace);
    for (auto len : out.trace->layer_lengths) CHECK(len == 1 + 16 - 3);
    CHECK(out.trace->masked);
    CHECK(out.trace->patch_index.size() == 13);
}

TEST_CASE("prompt slot conservation across layers") {
    const DualEncoder enc = fresh_encoder();
    std::mt19937_64 rng(1);
    for (std::size_t depth = 1; depth <= 4; ++depth) {
        const auto bank = enc.make_prompts({4, 4, depth}, rng);
        const auto out = enc.encode_image(random_image(5), &bank, nullptr, true);
        REQUIRE(out.trace);
        REQUIRE(out.trace->layer_lengths.size() == 4);
        for (auto len : out.trace->layer_lengths) CHECK(len == 4 + 1 + 16);
        CHECK(out.trace->prompt_tokens == 4);
    }
}

TEST_CASE("deep prompts at a layer change the output; depth beyond L is rejected") {
    const DualEncoder enc = fresh_encoder();
    std::mt19937_64 rng(2);
    auto bank = enc.make_prompts({4, 4, 2}, rng);
    const Tensor img = random_image(6);
    const auto before = values(enc.encode_image(img, &bank).feature);
    bank.visual[1] = ad::scale(bank.visual[1], 50.0);
    CHECK(values(enc.encode_image(img, &bank).feature) != before);
    CHECK_THROWS_AS(enc.make_prompts({4, 4, 5}, rng), std::invalid_argument);
}

TEST_CASE("first-layer text prompts start from the template word embeddings") {
    DualEncoder raw(encoders::EncoderConfig{}, encoders::Vocabulary(data::vocabulary_words()), 7);
    std::mt19937_64 rng(3);
    const auto bank = raw.make_prompts({4, 4, 3}, rng);
    const auto words = raw.vocabulary().tokenize(encoders::kTemplate);
    REQUIRE(words.size() == 4);
    const Tensor* table = nullptr;
    for (const auto& [name, t] : raw.named_parameters()) {
        if (name.find("token_embedding") != std::string::npos) table = t;
    }
    REQUIRE(table != nullptr);
    const std::size_t d = raw.config().width;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < d; ++j) CHECK(bank.textual[0].at(i, j) == table->values()[words[i] * d + j]);
    CHECK(bank.textual[0].requires_grad());
    CHECK(bank.visual[0].requires_grad());
}

TEST_CASE("text encoding: determinism, distinct classes, unknown ids") {
    const DualEncoder enc = fresh_encoder();
    CHECK(values(enc.encode_text(3)) == values(enc.encode_text(3)));
    const auto a = values(enc.encode_text(0)), b = values(enc.encode_text(1));
    double diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
    CHECK(diff > 0.0);
    CHECK(a.size() == 32);
    CHECK_THROWS_AS(enc.encode_text(99), std::out_of_range);
}

TEST_CASE("frozen class matrix: shape, cache hits, and agreement with fresh encodes") {
    const DualEncoder enc = fresh_encoder();
    const std::vector<int> ids{4, 0, 7};
    const Tensor m1 = enc.frozen_class_matrix(ids);
    const Tensor m2 = enc.frozen_class_matrix(ids);
    CHECK(m1.shape() == ad::Shape{3, 32});
    CHECK(values(m1) == values(m2));
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const auto fresh = values(enc.encode_text(ids[r]));
        for (std::size_t j = 0; j < 32; ++j) CHECK(m1.at(r, j) == fresh[j]);
    }
    CHECK_THROWS_AS(enc.frozen_class_matrix(std::vector<int>{}), std::invalid_argument);
}

TEST_CASE("gradients reach prompts only and leave the backbone untouched") {
    const DualEncoder enc = fresh_encoder();
    const auto checksum = enc.checksum();
    std::mt19937_64 rng(4);
    auto bank = enc.make_prompts({4, 4, 4}, rng);
    const std::vector<int> ids{0, 1, 2};
    const Tensor f = enc.encode_image(random_image(7), &bank).feature;
    const Tensor t = enc.encode_texts(ids, &bank);
    ad::backward(ad::sum_all(ad::matmul(t, ad::reshape(f, {32, 1}))));
    for (const auto* p : bank.parameters()) {
        REQUIRE(p->has_grad());
        double n = 0;
        for (double g : p->grad()) n += g * g;
        CHECK(n > 0.0);
    }
    for (const auto& [name, p] : enc.named_parameters()) {
        CHECK_FALSE(p->requires_grad());
        CHECK_FALSE(p->has_grad());
    }
    CHECK(enc.checksum() == checksum);
}

TEST_CASE("frozen backbone refuses mutable access") {
    DualEncoder enc = fresh_encoder();
    CHECK(enc.frozen());
    CHECK_THROWS_AS(enc.named_parameters(), std::logic_error);
}

TEST_CASE("same seed gives bit-identical backbones") {
    CHECK(fresh_encoder(11).checksum() == fresh_encoder(11).checksum());
    CHECK(fresh_encoder(11).checksum() != fresh_encoder(12).checksum());
}
