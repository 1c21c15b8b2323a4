#include "disa/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "disa/data.hpp"
#include "disa/encoders.hpp"
#include "disa/ops.hpp"
#include "disa/regularizers.hpp"

namespace disa::gradcheck {

using ad::Shape;
using ad::Tensor;

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

namespace {

Tensor leaf_like(const Tensor& t, bool requires_grad) {
    return Tensor::from(t.shape(), std::vector<double>(t.values().begin(), t.values().end()), requires_grad);
}

double root_value(const Function& f, const std::vector<Tensor>& inputs, const Tensor& cotangent) {
    const Tensor out = f(inputs);
    const auto v = out.values();
    const auto r = cotangent.values();
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) acc += v[i] * r[i];
    return acc;
}

}  // namespace

CaseOutcome check_case(const Function& f, const std::vector<Tensor>& inputs, std::mt19937_64& rng,
                       std::size_t max_coordinates, double step) {
    std::vector<Tensor> leaves;
    for (const auto& t : inputs) leaves.push_back(leaf_like(t, true));
    const Tensor out = f(leaves);

    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> r(out.size());
    for (double& x : r) x = normal(rng);
    const Tensor cotangent = Tensor::from(out.shape(), r);
    ad::backward(ad::sum_all(ad::mul(out, cotangent)));

    // (input, flat index) pairs to probe.
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t k = 0; k < leaves.size(); ++k)
        for (std::size_t i = 0; i < leaves[k].size(); ++i) coords.emplace_back(k, i);
    if (max_coordinates > 0 && coords.size() > max_coordinates) {
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(max_coordinates);
    }

    std::vector<Tensor> probe;
    for (const auto& t : inputs) probe.push_back(leaf_like(t, false));

    CaseOutcome outcome;
    for (const auto& [k, i] : coords) {
        std::vector<double> v(inputs[k].values().begin(), inputs[k].values().end());
        const double x0 = v[i];
        v[i] = x0 + step;
        probe[k] = Tensor::from(inputs[k].shape(), v);
        const double up = root_value(f, probe, cotangent);
        v[i] = x0 - step;
        probe[k] = Tensor::from(inputs[k].shape(), v);
        const double down = root_value(f, probe, cotangent);
        probe[k] = leaf_like(inputs[k], false);

        const double numeric = (up - down) / (2.0 * step);
        const double analytic = leaves[k].has_grad() ? leaves[k].grad()[i] : 0.0;
        outcome.max_rel_error = std::max(outcome.max_rel_error, relative_error(analytic, numeric));
        ++outcome.coordinates;
    }
    return outcome;
}

namespace {

using Rng = std::mt19937_64;

std::size_t uniform_int(Rng& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double uniform_real(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Tensor gaussian(Shape shape, Rng& rng, double stddev = 1.0) {
    std::normal_distribution<double> normal(0.0, stddev);
    std::vector<double> v(ad::shape_size(shape));
    for (double& x : v) x = normal(rng);
    return Tensor::from(std::move(shape), std::move(v));
}

Tensor positive(Shape shape, Rng& rng, double lo, double hi) {
    std::vector<double> v(ad::shape_size(shape));
    for (double& x : v) x = uniform_real(rng, lo, hi);
    return Tensor::from(std::move(shape), std::move(v));
}

// Magnitudes bounded away from zero, random sign: keeps |x| off its kink.
Tensor away_from_zero(Shape shape, Rng& rng) {
    std::vector<double> v(ad::shape_size(shape));
    std::bernoulli_distribution sign(0.5);
    for (double& x : v) x = uniform_real(rng, 0.05, 2.0) * (sign(rng) ? 1.0 : -1.0);
    return Tensor::from(std::move(shape), std::move(v));
}

Shape matrix_shape(Rng& rng, std::size_t max_side = 5) { return {uniform_int(rng, 1, max_side), uniform_int(rng, 1, max_side)}; }

struct CaseSpec {
    Function f;
    std::vector<Tensor> inputs;
    std::size_t max_coordinates = 0;
};

using Generator = std::function<CaseSpec(Rng&)>;

struct Entry {
    std::string name;
    std::string group;
    Generator make;
};

CaseSpec unary_case(Tensor (*op)(const Tensor&), Tensor input) {
    return {[op](const std::vector<Tensor>& in) { return op(in[0]); }, {std::move(input)}};
}

namespace reg = disa::regularizers;

reg::ImageFeature image_feature(const Tensor& t, reg::Branch b, reg::ImageInput input) {
    reg::ImageFeature f;
    f.value = t;
    f.branch = b;
    f.input = input;
    f.masked_patches = input == reg::ImageInput::masked ? 1 : 0;
    return f;
}

reg::TextFeatures text_features(const Tensor& t, reg::Branch b) { return {t, b}; }

struct LossShapes {
    std::size_t d, classes;
};

LossShapes loss_shapes(Rng& rng) { return {uniform_int(rng, 4, 16), uniform_int(rng, 2, 8)}; }

double random_tau(Rng& rng) {
    const double taus[] = {0.07, 0.2, 1.0};
    return taus[uniform_int(rng, 0, 2)];
}

std::vector<Entry> primitives() {
    std::vector<Entry> e;
    e.push_back({"add", "primitive", [](Rng& rng) {
                     const Shape s = matrix_shape(rng);
                     return CaseSpec{[](const std::vector<Tensor>& in) { return ad::add(in[0], in[1]); },
                                     {gaussian(s, rng), gaussian(s, rng)}};
                 }});
    e.push_back({"add-row", "primitive", [](Rng& rng) {
                     const Shape s = matrix_shape(rng);
                     return CaseSpec{[](const std::vector<Tensor>& in) { return ad::add(in[0], in[1]); },
                                     {gaussian(s, rng), gaussian({s[1]}, rng)}};
                 }});
    e.push_back({"sub", "primitive", [](Rng& rng) {
                     const Shape s = matrix_shape(rng);
                     return CaseSpec{[](const std::vector<Tensor>& in) { return ad::sub(in[0], in[1]); },
                                     {gaussian(s, rng), gaussian(s, rng)}};
                 }});
    e.push_back({"mul", "primitive", [](Rng& rng) {
                     const Shape s = matrix_shape(rng);
                     return CaseSpec{[](const std::vector<Tensor>& in) { return ad::mul(in[0], in[1]); },
                                     {gaussian(s, rng), gaussian(s, rng)}};
                 }});
    e.push_back({"scale", "primitive", [](Rng& rng) {
                     const double c = uniform_real(rng, -3.0, 3.0);
                     return CaseSpec{[c](const std::vector<Tensor>& in) { return ad::scale(in[0], c); },
                                     {gaussian(matrix_shape(rng), rng)}};
                 }});
    e.push_back({"add-scalar", "primitive", [](Rng& rng) {
                     const double c = uniform_real(rng, -3.0, 3.0);
                     return CaseSpec{[c](const std::vector<Tensor>& in) { return ad::add_scalar(in[0], c); },
                                     {gaussian(matrix_shape(rng), rng)}};
                 }});
    e.push_back({"matmul", "primitive", [](Rng& rng) {
                     const std::size_t m = uniform_int(rng, 1, 5), k = uniform_int(rng, 1, 5), n = uniform_int(rng, 1, 5);
                     return CaseSpec{[](const std::vector<Tensor>& in) { return ad::matmul(in[0], in[1]); },
                                     {gaussian({m, k}, rng), gaussian({k, n}, rng)}};
                 }});
    e.push_back({"transpose", "primitive", [](Rng& rng) {
                     return CaseSpec{[](const std::vector<Tensor>& in) { return ad::transpose(in[0]); },
                                     {gaussian(matrix_shape(rng), rng)}};
                 }});
    e.push_back({"reshape", "primitive", [](Rng& rng) {
                     const Shape s = matrix_shape(rng);
                     const Shape t{s[1], s[0]};
                     return CaseSpec{[t](const std::vector<Tensor>& in) { return ad::reshape(in[0], t); },
                                     {gaussian(s, rng)}};
                 }});
    e.push_back({"concat", "primitive", [](Rng& rng) {
                     const std::size_t axis = uniform_int(rng, 0, 1);
                     const std::size_t parts = uniform_int(rng, 2, 3);
                     const std::size_t fixed = uniform_int(rng, 1, 4);
                     std::vector<Tensor> in;
                     for (std::size_t p = 0; p < parts; ++p) {
                         const std::size_t var = uniform_int(rng, 1, 4);
                         in.push_back(gaussian(axis == 0 ? Shape{var, fixed} : Shape{fixed, var}, rng));
                     }
                     return CaseSpec{[axis](const std::vector<Tensor>& xs) { return ad::concat(xs, axis); }, in};
                 }});
    e.push_back({"slice", "primitive", [](Rng& rng) {
                     const Shape s = matrix_shape(rng);
                     const std::size_t axis = uniform_int(rng, 0, 1);
                     const std::size_t b = uniform_int(rng, 0, s[axis] - 1);
                     const std::size_t end = uniform_int(rng, b + 1, s[axis]);
                     return CaseSpec{[axis, b, end](const std::vector<Tensor>& in) { return ad::slice(in[0], axis, b, end); },
                                     {gaussian(s, rng)}};
                 }});
    e.push_back({"gather-rows", "primitive", [](Rng& rng) {
                     const Shape s = matrix_shape(rng);
                     std::vector<std::size_t> rows(uniform_int(rng, 1, 6));
                     for (auto& r : rows) r = uniform_int(rng, 0, s[0] - 1);
                     return CaseSpec{[rows](const std::vector<Tensor>& in) { return ad::gather_rows(in[0], rows); },
                                     {gaussian(s, rng)}};
                 }});
    e.push_back({"pick", "primitive", [](Rng& rng) {
                     const Shape s = matrix_shape(rng);
                     const std::size_t i = uniform_int(rng, 0, ad::shape_size(s) - 1);
                     return CaseSpec{[i](const std::vector<Tensor>& in) { return ad::pick(in[0], i); }, {gaussian(s, rng)}};
                 }});
    e.push_back({"sum-axis", "primitive", [](Rng& rng) {
                     const std::size_t axis = uniform_int(rng, 0, 1);
                     return CaseSpec{[axis](const std::vector<Tensor>& in) { return ad::sum(in[0], axis); },
                                     {gaussian(matrix_shape(rng), rng)}};
                 }});
    e.push_back({"mean-axis", "primitive", [](Rng& rng) {
                     const std::size_t axis = uniform_int(rng, 0, 1);
                     return CaseSpec{[axis](const std::vector<Tensor>& in) { return ad::mean(in[0], axis); },
                                     {gaussian(matrix_shape(rng), rng)}};
                 }});
    e.push_back({"sum-all", "primitive",
                 [](Rng& rng) { return unary_case(&ad::sum_all, gaussian(matrix_shape(rng), rng)); }});
    e.push_back({"mean-all", "primitive",
                 [](Rng& rng) { return unary_case(&ad::mean_all, gaussian(matrix_shape(rng), rng)); }});
    e.push_back({"exp", "primitive", [](Rng& rng) { return unary_case(&ad::exp, gaussian(matrix_shape(rng), rng)); }});
    e.push_back({"log", "primitive",
                 [](Rng& rng) { return unary_case(&ad::log, positive(matrix_shape(rng), rng, 0.2, 3.0)); }});
    e.push_back({"sqrt", "primitive",
                 [](Rng& rng) { return unary_case(&ad::sqrt, positive(matrix_shape(rng), rng, 0.2, 3.0)); }});
    e.push_back({"power", "primitive", [](Rng& rng) {
                     const double exps[] = {-1.5, -1.0, 0.5, 2.0, 3.0, 1.7};
                     const double p = exps[uniform_int(rng, 0, 5)];
                     return CaseSpec{[p](const std::vector<Tensor>& in) { return ad::power(in[0], p); },
                                     {positive(matrix_shape(rng), rng, 0.3, 2.0)}};
                 }});
    e.push_back({"abs", "primitive", [](Rng& rng) { return unary_case(&ad::abs, away_from_zero(matrix_shape(rng), rng)); }});
    e.push_back({"gelu", "primitive",
                 [](Rng& rng) { return unary_case(&ad::gelu, gaussian(matrix_shape(rng), rng, 2.0)); }});
    e.push_back({"layer-norm", "primitive", [](Rng& rng) {
                     const Shape s{uniform_int(rng, 1, 4), uniform_int(rng, 2, 8)};
                     return unary_case(&ad::layer_norm, gaussian(s, rng));
                 }});
    e.push_back({"l2-normalize", "primitive",
                 [](Rng& rng) { return unary_case(&ad::l2_normalize, gaussian(matrix_shape(rng), rng)); }});
    e.push_back({"embedding-lookup", "primitive", [](Rng& rng) {
                     const Shape s = matrix_shape(rng, 6);
                     std::vector<std::size_t> ids(uniform_int(rng, 1, 8));
                     for (auto& id : ids) id = uniform_int(rng, 0, s[0] - 1);
                     return CaseSpec{[ids](const std::vector<Tensor>& in) { return ad::embedding(in[0], ids); },
                                     {gaussian(s, rng)}};
                 }});
    e.push_back({"softmax-axis", "primitive", [](Rng& rng) {
                     const std::size_t axis = uniform_int(rng, 0, 1);
                     return CaseSpec{[axis](const std::vector<Tensor>& in) { return ad::softmax(in[0], axis); },
                                     {gaussian(matrix_shape(rng), rng, 2.0)}};
                 }});
    e.push_back({"log-softmax", "primitive", [](Rng& rng) {
                     const std::size_t axis = uniform_int(rng, 0, 1);
                     return CaseSpec{[axis](const std::vector<Tensor>& in) { return ad::log_softmax(in[0], axis); },
                                     {gaussian(matrix_shape(rng), rng, 2.0)}};
                 }});
    e.push_back({"softmax-temperature", "primitive", [](Rng& rng) {
                     const double tau = uniform_real(rng, 0.05, 2.0);
                     return CaseSpec{[tau](const std::vector<Tensor>& in) { return ad::softmax(in[0], tau); },
                                     {gaussian({uniform_int(rng, 1, 8)}, rng, 0.3)}};
                 }});
    e.push_back({"cosine-similarity", "primitive", [](Rng& rng) {
                     const std::size_t n = uniform_int(rng, 2, 10);
                     return CaseSpec{[](const std::vector<Tensor>& in) { return ad::cosine_similarity(in[0], in[1]); },
                                     {gaussian({n}, rng), gaussian({n}, rng)}};
                 }});
    e.push_back({"kl-divergence", "primitive", [](Rng& rng) {
                     // Unnormalized positive arguments: the derivative formula must hold off the simplex too.
                     const std::size_t n = uniform_int(rng, 2, 8);
                     return CaseSpec{[](const std::vector<Tensor>& in) { return ad::kl_divergence(in[0], in[1]); },
                                     {positive({n}, rng, 0.05, 1.0), positive({n}, rng, 0.05, 1.0)}};
                 }});
    return e;
}

std::vector<Entry> losses() {
    using reg::Branch;
    using reg::ImageInput;
    std::vector<Entry> e;
    e.push_back({"cosine-scores", "loss", [](Rng& rng) {
                     const auto [d, c] = loss_shapes(rng);
                     return CaseSpec{[](const std::vector<Tensor>& in) { return reg::cosine_scores(in[0], in[1]); },
                                     {gaussian({d}, rng), gaussian({c, d}, rng)}};
                 }});
    e.push_back({"ce-loss", "loss", [](Rng& rng) {
                     const auto [d, c] = loss_shapes(rng);
                     const std::size_t label = uniform_int(rng, 0, c - 1);
                     const double tau = random_tau(rng);
                     return CaseSpec{[label, tau](const std::vector<Tensor>& in) {
                                         const auto q = reg::score_vector(
                                             image_feature(in[0], Branch::prompted, ImageInput::full),
                                             text_features(in[1], Branch::prompted));
                                         return reg::ce_loss(q, label, tau);
                                     },
                                     {gaussian({d}, rng), gaussian({c, d}, rng)}};
                 }});
    e.push_back({"cir-loss", "loss", [](Rng& rng) {
                     const auto [d, c] = loss_shapes(rng);
                     const double tau = random_tau(rng);
                     // Inputs: masked prompted image, frozen text, frozen image, prompted text.
                     return CaseSpec{[tau](const std::vector<Tensor>& in) {
                                         const auto q_po = reg::score_vector(
                                             image_feature(in[0], Branch::prompted, ImageInput::masked),
                                             text_features(in[1], Branch::frozen));
                                         const auto q_op = reg::score_vector(
                                             image_feature(in[2], Branch::frozen, ImageInput::full),
                                             text_features(in[3], Branch::prompted));
                                         return reg::cir_loss(q_po, q_op, tau);
                                     },
                                     {gaussian({d}, rng), gaussian({c, d}, rng), gaussian({d}, rng),
                                      gaussian({c, d}, rng)}};
                 }});
    e.push_back({"sr-loss", "loss", [](Rng& rng) {
                     const auto [d, c] = loss_shapes(rng);
                     const double tau = random_tau(rng);
                     return CaseSpec{[tau](const std::vector<Tensor>& in) {
                                         const auto q_pp = reg::score_vector(
                                             image_feature(in[0], Branch::prompted, ImageInput::full),
                                             text_features(in[1], Branch::prompted));
                                         const auto q_oo = reg::score_vector(
                                             image_feature(in[2], Branch::frozen, ImageInput::full),
                                             text_features(in[3], Branch::frozen));
                                         return reg::sr_loss(q_pp, q_oo, tau);
                                     },
                                     {gaussian({d}, rng), gaussian({c, d}, rng), gaussian({d}, rng),
                                      gaussian({c, d}, rng)}};
                 }});
    e.push_back({"dir-loss", "loss", [](Rng& rng) {
                     const std::size_t d = uniform_int(rng, 4, 16);
                     return CaseSpec{[](const std::vector<Tensor>& in) {
                                         return reg::dir_loss(image_feature(in[0], Branch::prompted, ImageInput::full),
                                                              in[1]);
                                     },
                                     {gaussian({d}, rng), gaussian({d}, rng)}};
                 }});
    for (auto variant : {reg::AlignmentVariant::norm, reg::AlignmentVariant::mse, reg::AlignmentVariant::direction}) {
        e.push_back({std::string("alignment-") + reg::alignment_variant_name(variant), "loss", [variant](Rng& rng) {
                         const std::size_t d = uniform_int(rng, 4, 16);
                         return CaseSpec{[variant](const std::vector<Tensor>& in) {
                                             return reg::alignment_variant_loss(in[0], in[1], variant);
                                         },
                                         {gaussian({d}, rng), gaussian({d}, rng)}};
                     }});
    }
    e.push_back({"total-loss", "loss", [](Rng& rng) {
                     const auto [d, c] = loss_shapes(rng);
                     const std::size_t label = uniform_int(rng, 0, c - 1);
                     const double tau = random_tau(rng);
                     const double lambda = uniform_real(rng, 0.0, 16.0);
                     // f_p, f_p masked, f_o, text prompted, text frozen, prototype.
                     return CaseSpec{[label, tau, lambda](const std::vector<Tensor>& in) {
                                         const auto fp = image_feature(in[0], Branch::prompted, ImageInput::full);
                                         const auto fpm = image_feature(in[1], Branch::prompted, ImageInput::masked);
                                         const auto fo = image_feature(in[2], Branch::frozen, ImageInput::full);
                                         const auto tp = text_features(in[3], Branch::prompted);
                                         const auto to = text_features(in[4], Branch::frozen);
                                         const auto q_pp = reg::score_vector(fp, tp);
                                         const Tensor ce = reg::ce_loss(q_pp, label, tau);
                                         const Tensor sr = reg::sr_loss(q_pp, reg::score_vector(fo, to), tau);
                                         const Tensor cir = reg::cir_loss(reg::score_vector(fpm, to),
                                                                          reg::score_vector(fo, tp), tau);
                                         const Tensor dir = reg::dir_loss(fp, in[5]);
                                         return reg::total_loss(ce, sr, cir, dir, lambda);
                                     },
                                     {gaussian({d}, rng), gaussian({d}, rng), gaussian({d}, rng), gaussian({c, d}, rng),
                                      gaussian({c, d}, rng), gaussian({d}, rng)}};
                 }});
    return e;
}

// Prompt gradients through a small randomly initialised dual encoder.
Entry encoder_entry() {
    return {"prompted-encoder", "encoder", [](Rng& rng) {
                encoders::EncoderConfig cfg;
                cfg.width = 8;
                cfg.layers = 2;
                cfg.heads = 2;
                cfg.patches = 4;
                cfg.patch_dim = 6;
                cfg.context = 12;
                cfg.init_std = 0.3;
                auto enc = std::make_shared<encoders::DualEncoder>(cfg, encoders::Vocabulary(data::vocabulary_words()),
                                                                   rng());
                const std::vector<int> classes{0, 1, 2};
                for (int id : classes) enc->register_class(id, data::toy_class(id).name);
                enc->freeze();
                const encoders::PromptConfig pc{2, 2, 2};
                Rng init(rng());
                encoders::PromptBank bank = enc->make_prompts(pc, init);
                // Larger prompts than the training init, so their gradients are well above the floor.
                std::vector<Tensor> inputs;
                for (const auto& t : bank.visual) inputs.push_back(ad::scale(t.detach(), 10.0));
                for (const auto& t : bank.textual) inputs.push_back(t.detach());
                const Tensor image = gaussian({cfg.patches, cfg.patch_dim}, rng, 0.5);
                std::vector<bool> keep(cfg.patches, true);
                if (std::bernoulli_distribution(0.5)(rng)) keep[uniform_int(rng, 0, cfg.patches - 1)] = false;
                const std::size_t label = uniform_int(rng, 0, classes.size() - 1);
                return CaseSpec{[enc, pc, classes, image, keep, label](const std::vector<Tensor>& in) {
                                    encoders::PromptBank b;
                                    b.config = pc;
                                    b.visual.assign(in.begin(), in.begin() + pc.depth);
                                    b.textual.assign(in.begin() + pc.depth, in.end());
                                    const Tensor f = enc->encode_image(image, &b, &keep).feature;
                                    const Tensor t = enc->encode_texts(classes, &b);
                                    return reg::cross_entropy(reg::cosine_scores(f, t), label, 0.5);
                                },
                                inputs, 24};
            }};
}

std::vector<Entry> registry() {
    auto all = primitives();
    for (auto& l : losses()) all.push_back(std::move(l));
    all.push_back(encoder_entry());
    return all;
}

}  // namespace

std::vector<std::string> check_names() {
    std::vector<std::string> names;
    for (const auto& e : registry()) names.push_back(e.name);
    return names;
}

std::vector<Check> run(const Options& options) {
    std::vector<Check> out;
    std::uint64_t salt = 0;
    for (const auto& entry : registry()) {
        ++salt;
        if (!options.filter.empty() && entry.name.find(options.filter) == std::string::npos) continue;
        const bool encoder = entry.group == "encoder";
        if (encoder && !options.include_encoder) continue;
        Check c;
        c.name = entry.name;
        c.group = entry.group;
        std::seed_seq seq{options.seed, salt};
        Rng rng(seq);
        const std::size_t n = encoder ? options.encoder_cases : options.cases;
        for (std::size_t i = 0; i < n; ++i) {
            const CaseSpec spec = entry.make(rng);
            const CaseOutcome o = check_case(spec.f, spec.inputs, rng, spec.max_coordinates);
            c.coordinates += o.coordinates;
            if (o.max_rel_error > c.max_rel_error) {
                c.max_rel_error = o.max_rel_error;
                c.worst_case = i;
            }
            ++c.cases;
        }
        out.push_back(std::move(c));
    }
    return out;
}

bool all_passed(const std::vector<Check>& checks, double tolerance) {
    return !checks.empty() &&
           std::all_of(checks.begin(), checks.end(), [&](const Check& c) { return c.passed(tolerance); });
}

void write_table(std::ostream& out, const std::vector<Check>& checks, double tolerance) {
    char line[160];
    std::snprintf(line, sizeof line, "%-22s %-9s %6s %8s %12s  %s\n", "check", "group", "cases", "coords",
                  "max_rel_err", "status");
    out << line;
    for (const auto& c : checks) {
        std::snprintf(line, sizeof line, "%-22s %-9s %6zu %8zu %12.3e  %s\n", c.name.c_str(), c.group.c_str(),
                      c.cases, c.coordinates, c.max_rel_error, c.passed(tolerance) ? "PASS" : "FAIL");
        out << line;
    }
}

}  // namespace disa::gradcheck
