#include "disa/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "disa/binary_io.hpp"
#include "disa/checkpoint.hpp"
#include "disa/ops.hpp"
#include "disa/saliency.hpp"

namespace disa::harness {

using ad::Tensor;
using data::Dataset;
using encoders::DualEncoder;
using encoders::PromptBank;
namespace rg = regularizers;

// --- names ----------------------------------------------------------------

Protocol parse_protocol(const std::string& name) {
    for (auto p : {Protocol::base_to_novel, Protocol::cross_dataset, Protocol::domain_generalization, Protocol::few_shot,
                   Protocol::ablation, Protocol::lambda_sweep, Protocol::depth_sweep}) {
        if (name == protocol_name(p)) return p;
    }
    throw config::UsageError("unknown protocol '" + name +
                             "' (base-to-novel|cross-dataset|domain-generalization|few-shot|ablation|lambda-sweep|"
                             "depth-sweep)");
}

const char* protocol_name(Protocol p) {
    switch (p) {
        case Protocol::base_to_novel: return "base-to-novel";
        case Protocol::cross_dataset: return "cross-dataset";
        case Protocol::domain_generalization: return "domain-generalization";
        case Protocol::few_shot: return "few-shot";
        case Protocol::ablation: return "ablation";
        case Protocol::lambda_sweep: return "lambda-sweep";
        case Protocol::depth_sweep: return "depth-sweep";
    }
    return "?";
}

DirTarget parse_dir_target(const std::string& name) {
    if (name == "prototype") return DirTarget::prototype;
    if (name == "sample") return DirTarget::sample;
    throw config::UsageError("unknown dir target '" + name + "' (prototype|sample)");
}

const char* dir_target_name(DirTarget t) { return t == DirTarget::prototype ? "prototype" : "sample"; }

std::string LossSwitches::label() const {
    std::string s = "ce";
    if (cir) s += masking ? "+cir+mask" : "+cir";
    if (sr) s += "+sr";
    if (dir) {
        s += "+dir";
        if (dir_variant != rg::AlignmentVariant::direction) s += std::string("[") + rg::alignment_variant_name(dir_variant) + "]";
        s += std::string("(") + dir_target_name(dir_target) + ")";
    }
    return s;
}

std::vector<LossSwitches> ablation_rows() {
    LossSwitches base{false, false, false, false, rg::AlignmentVariant::direction, DirTarget::prototype};
    std::vector<LossSwitches> rows;
    rows.push_back(base);
    base.cir = true;
    rows.push_back(base);
    base.masking = true;
    rows.push_back(base);
    base.sr = true;
    rows.push_back(base);
    base.dir = true;
    base.dir_target = DirTarget::sample;
    rows.push_back(base);
    base.dir_target = DirTarget::prototype;
    rows.push_back(base);
    return rows;
}

// --- configuration --------------------------------------------------------

void ExperimentConfig::validate() const {
    auto fail = [](const std::string& m) { throw config::UsageError("config: " + m); };
    encoder.validate();
    if (prompt.visual_tokens == 0 || prompt.text_tokens == 0) fail("prompt token counts must be positive");
    if (prompt.depth > encoder.layers) fail("prompt.depth exceeds encoder.layers");
    if (!(optim.lr > 0.0)) fail("optim.lr must be positive");
    if (!(optim.momentum >= 0.0 && optim.momentum < 1.0)) fail("optim.momentum must be in [0, 1)");
    if (optim.batch == 0 || optim.epochs == 0 || optim.few_shot_epochs == 0) fail("batch and epochs must be positive");
    if (!(lambda >= 0.0)) fail("loss.lambda must be non-negative");
    if (!(gamma >= 0.0 && gamma <= 1.0)) fail("loss.gamma must be in [0, 1]");
    if (!(mask_fraction >= 0.0 && mask_fraction <= 1.0)) fail("loss.mask_fraction must be in [0, 1]");
    if (!(tau > 0.0)) fail("loss.tau must be positive");
    if (seeds.empty()) fail("run.seeds is empty");
    if (!(data.base_fraction > 0.0 && data.base_fraction < 1.0)) fail("data.base_fraction must be in (0, 1)");
    if (data.k_shot == 0 || data.k_shot > data.samples_per_class / 2) {
        fail("data.k_shot must be in [1, samples_per_class / 2]");
    }
    for (auto k : data.few_shot_k) {
        if (k == 0 || k > data.samples_per_class / 2) fail("data.few_shot_k entries must be in [1, samples_per_class / 2]");
    }
    if (data.shifts.empty()) fail("data.shifts is empty");
    if (data.cross_targets == 0) fail("data.cross_targets must be positive");
    if (pretrain.batch < 2 || pretrain.steps == 0 || pretrain.samples_per_class < 2) {
        fail("pretrain needs batch >= 2, steps >= 1 and samples_per_class >= 2");
    }
    if (lambda_grid.empty() || depth_grid.empty() || reference_layers == 0) fail("sweep grids must be non-empty");
    for (double l : lambda_grid) {
        if (!(l >= 0.0)) fail("sweep.lambdas must be non-negative");
    }
    for (auto d : depth_grid) {
        if (d == 0 || d > reference_layers) fail("sweep.depths must be in [1, sweep.reference_layers]");
    }
}

namespace {

std::size_t as_size(std::int64_t v, const std::string& key) {
    if (v < 0) throw config::UsageError("config key '" + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
}

std::size_t size_key(const config::Config& c, const std::string& key) { return as_size(c.get_int(key), key); }

}  // namespace

ExperimentConfig from_config(const config::Config& c) {
    ExperimentConfig e;
    e.protocol = parse_protocol(c.get_string("run.protocol"));
    e.seeds.clear();
    for (auto s : c.get_int_list("run.seeds")) e.seeds.push_back(as_size(s, "run.seeds"));

    auto& d = e.data;
    d.seed = c.get_uint("data.seed");
    d.classes = size_key(c, "data.classes");
    d.samples_per_class = size_key(c, "data.samples_per_class");
    d.base_fraction = c.get_real("data.base_fraction");
    d.k_shot = size_key(c, "data.k_shot");
    d.few_shot_k.clear();
    for (auto k : c.get_int_list("data.few_shot_k")) d.few_shot_k.push_back(as_size(k, "data.few_shot_k"));
    d.render.background = c.get_real("data.background");
    d.render.pixel_noise = c.get_real("data.pixel_noise");
    d.render.position_jitter = c.get_real("data.position_jitter");
    d.render.scale_jitter = c.get_real("data.scale_jitter");
    d.render.color_jitter = c.get_real("data.color_jitter");
    d.render.radius = c.get_real("data.radius");
    d.cross_targets = size_key(c, "data.cross_targets");
    d.shifts.clear();
    {
        std::stringstream in(c.get_string("data.shifts"));
        std::string item;
        while (std::getline(in, item, ',')) {
            item.erase(0, item.find_first_not_of(' '));
            item.erase(item.find_last_not_of(' ') + 1);
            if (item.empty()) continue;
            try {
                d.shifts.push_back(data::parse_shift_kind(item));
            } catch (const std::invalid_argument& ex) {
                throw config::UsageError(ex.what());
            }
        }
    }
    d.shift_magnitude = c.get_real("data.shift_magnitude");

    e.encoder.width = size_key(c, "encoder.width");
    e.encoder.layers = size_key(c, "encoder.layers");
    e.encoder.heads = size_key(c, "encoder.heads");
    e.encoder.mlp_ratio = size_key(c, "encoder.mlp_ratio");
    e.encoder.init_std = c.get_real("encoder.init_std");
    e.encoder.patches = d.render.patches();
    e.encoder.patch_dim = d.render.patch_dim();
    e.encoder_seed = c.get_uint("encoder.seed");

    e.prompt.visual_tokens = size_key(c, "prompt.visual_tokens");
    e.prompt.text_tokens = size_key(c, "prompt.text_tokens");
    e.prompt.depth = size_key(c, "prompt.depth");

    e.optim.lr = c.get_real("optim.lr");
    e.optim.momentum = c.get_real("optim.momentum");
    e.optim.epochs = size_key(c, "optim.epochs");
    e.optim.few_shot_epochs = size_key(c, "optim.few_shot_epochs");
    e.optim.batch = size_key(c, "optim.batch");

    e.switches.cir = c.get_bool("loss.cir");
    e.switches.masking = c.get_bool("loss.masking");
    e.switches.sr = c.get_bool("loss.sr");
    e.switches.dir = c.get_bool("loss.dir");
    try {
        e.switches.dir_variant = rg::parse_alignment_variant(c.get_string("loss.dir_variant"));
    } catch (const std::invalid_argument& ex) {
        throw config::UsageError(ex.what());
    }
    e.switches.dir_target = parse_dir_target(c.get_string("loss.dir_target"));
    e.lambda = c.get_real("loss.lambda");
    e.gamma = c.get_real("loss.gamma");
    e.mask_fraction = c.get_real("loss.mask_fraction");
    e.tau = c.get_real("loss.tau");

    auto& p = e.pretrain;
    p.seed = c.get_uint("pretrain.seed");
    p.samples_per_class = size_key(c, "pretrain.samples_per_class");
    p.steps = size_key(c, "pretrain.steps");
    p.batch = size_key(c, "pretrain.batch");
    p.lr = c.get_real("pretrain.lr");
    p.tau = c.get_real("pretrain.tau");
    p.floor = c.get_real("pretrain.floor");
    p.cache_dir = c.get_string("pretrain.cache_dir");
    p.render.background = c.get_real("pretrain.background");
    p.render.pixel_noise = c.get_real("pretrain.pixel_noise");
    p.render.position_jitter = c.get_real("pretrain.position_jitter");
    p.render.scale_jitter = c.get_real("pretrain.scale_jitter");
    p.render.color_jitter = c.get_real("pretrain.color_jitter");
    p.render.radius = d.render.radius;

    e.lambda_grid = c.get_real_list("sweep.lambdas");
    e.depth_grid.clear();
    for (auto v : c.get_int_list("sweep.depths")) e.depth_grid.push_back(as_size(v, "sweep.depths"));
    e.reference_layers = size_key(c, "sweep.reference_layers");

    e.resolved = c.snapshot();
    e.digest = c.digest();
    e.validate();
    return e;
}

std::size_t default_depth(Protocol p, std::size_t layers) {
    const bool transfer = p == Protocol::cross_dataset || p == Protocol::domain_generalization;
    return std::min<std::size_t>(layers, transfer ? 3 : 9);
}

std::size_t scaled_depth(std::size_t reference_depth, std::size_t reference_layers, std::size_t layers) {
    const double exact = static_cast<double>(reference_depth) * static_cast<double>(layers) /
                         static_cast<double>(reference_layers);
    const auto d = static_cast<std::size_t>(std::lround(exact));
    return std::clamp<std::size_t>(d, 1, layers);
}

double harmonic_mean(double a, double b) {
    if (a <= 0.0 || b <= 0.0) return 0.0;
    return 2.0 * a * b / (a + b);
}

RunSettings settings_for(const ExperimentConfig& config, Protocol protocol) {
    RunSettings s;
    s.prompt = config.prompt;
    if (s.prompt.depth == 0) s.prompt.depth = default_depth(protocol, config.encoder.layers);
    s.optim = config.optim;
    s.epochs = protocol == Protocol::few_shot ? config.optim.few_shot_epochs : config.optim.epochs;
    s.switches = config.switches;
    s.lambda = config.lambda;
    s.gamma = config.gamma;
    s.mask_fraction = config.mask_fraction;
    s.tau = config.tau;
    return s;
}

// --- backbone -------------------------------------------------------------

DualEncoder make_encoder(const encoders::EncoderConfig& config, std::uint64_t seed) {
    DualEncoder enc(config, encoders::Vocabulary(data::vocabulary_words()), seed);
    for (std::size_t id = 0; id < data::attribute_grid().size(); ++id) {
        const auto c = data::toy_class(static_cast<int>(id));
        enc.register_class(c.id, c.name);
    }
    return enc;
}

Dataset pretrain_corpus(const ExperimentConfig& config) {
    data::RenderConfig r = config.pretrain.render;
    r.pool = data::ClassPool::pretrain;
    std::vector<int> ids;
    for (std::size_t id = 0; id < data::attribute_grid().size(); ++id) {
        if (data::in_pool(data::toy_class(static_cast<int>(id)), data::ClassPool::pretrain)) ids.push_back(static_cast<int>(id));
    }
    return data::generate_corpus_for(ids, config.pretrain.samples_per_class, r, config.pretrain.seed);
}

double evaluate(const DualEncoder& encoder, const PromptBank* prompts, const Dataset& ds,
                std::span<const std::size_t> indices, std::span<const int> class_set) {
    if (indices.empty()) throw std::invalid_argument("evaluate: empty evaluation set");
    if (class_set.empty()) throw std::invalid_argument("evaluate: empty class set");
    // Detached prompts keep evaluation out of any graph.
    PromptBank frozen_prompts;
    if (prompts) {
        frozen_prompts.config = prompts->config;
        for (const auto& t : prompts->visual) frozen_prompts.visual.push_back(t.detach());
        for (const auto& t : prompts->textual) frozen_prompts.textual.push_back(t.detach());
    }
    const PromptBank* p = prompts ? &frozen_prompts : nullptr;
    const Tensor texts = p ? encoder.encode_texts(class_set, p) : encoder.frozen_class_matrix(class_set);
    std::size_t correct = 0;
    for (auto i : indices) {
        const auto& s = ds.samples.at(i);
        const Tensor sims = rg::cosine_scores(encoder.encode_image(s.image, p).feature, texts);
        const auto v = sims.values();
        const auto best = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
        if (class_set[best] == s.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(indices.size());
}

namespace {

std::string hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t backbone_digest(const ExperimentConfig& c) {
    std::ostringstream key;
    key.precision(17);
    const auto& e = c.encoder;
    const auto& p = c.pretrain;
    key << "backbone/v1;w=" << e.width << ";L=" << e.layers << ";H=" << e.heads << ";V=" << e.patches
        << ";pd=" << e.patch_dim << ";mlp=" << e.mlp_ratio << ";ctx=" << e.context << ";std=" << e.init_std
        << ";eseed=" << c.encoder_seed << ";pseed=" << p.seed << ";spc=" << p.samples_per_class
        << ";steps=" << p.steps << ";batch=" << p.batch << ";lr=" << p.lr << ";tau=" << p.tau << ";"
        << p.render.canonical();
    return io::fnv1a(key.str());
}

// Symmetric in-batch contrastive loss over row-aligned image/text features.
Tensor contrastive_loss(const Tensor& images, const Tensor& texts, double tau) {
    const std::size_t b = images.rows();
    const Tensor logits = ad::scale(ad::matmul(ad::l2_normalize(images), ad::transpose(ad::l2_normalize(texts))), 1.0 / tau);
    std::vector<double> eye(b * b, 0.0);
    for (std::size_t i = 0; i < b; ++i) eye[i * b + i] = 1.0;
    const Tensor diag = Tensor::matrix(b, b, eye);
    const Tensor i2t = ad::sum_all(ad::mul(ad::log_softmax(logits, 1), diag));
    const Tensor t2i = ad::sum_all(ad::mul(ad::log_softmax(ad::transpose(logits), 1), diag));
    return ad::scale(ad::add(i2t, t2i), -0.5 / static_cast<double>(b));
}

}  // namespace

Backbone pretrain_backbone(const ExperimentConfig& config, const Logger& log) {
    const Dataset corpus = pretrain_corpus(config);
    const auto classes = corpus.class_ids();
    const auto split = data::split_all_base(corpus, config.pretrain.seed);

    Backbone out;
    out.chance = 1.0 / static_cast<double>(classes.size());
    if (!config.pretrain.cache_dir.empty()) {
        out.cache_file = config.pretrain.cache_dir / ("backbone-" + hex(backbone_digest(config)) + ".disa");
    }

    DualEncoder enc = make_encoder(config.encoder, config.encoder_seed);
    if (!out.cache_file.empty() && std::filesystem::exists(out.cache_file)) {
        const auto blocks = checkpoint::read(out.cache_file);
        checkpoint::restore_backbone(blocks, enc);
        out.from_cache = true;
        out.steps = config.pretrain.steps;
        if (log) log("pretrain: loaded backbone from " + out.cache_file.string());
    } else {
        std::mt19937_64 rng(config.pretrain.seed);
        std::vector<std::vector<std::size_t>> pools(classes.size());
        for (auto i : split.train_pool) {
            const auto pos = std::lower_bound(classes.begin(), classes.end(), corpus.samples[i].label) - classes.begin();
            pools[static_cast<std::size_t>(pos)].push_back(i);
        }
        const std::size_t batch = std::min(config.pretrain.batch, classes.size());
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        std::vector<std::vector<double>> m, v;
        std::vector<std::size_t> order(classes.size());
        for (std::size_t step = 1; step <= config.pretrain.steps; ++step) {
            std::iota(order.begin(), order.end(), 0);
            std::shuffle(order.begin(), order.end(), rng);
            std::vector<int> ids;
            std::vector<Tensor> feats;
            for (std::size_t j = 0; j < batch; ++j) {
                const auto& pool = pools[order[j]];
                std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
                const auto& s = corpus.samples[pool[pick(rng)]];
                ids.push_back(s.label);
                feats.push_back(ad::reshape(enc.encode_image(s.image).feature, {1, config.encoder.width}));
            }
            const Tensor loss = contrastive_loss(ad::concat(feats, 0), enc.encode_texts(ids), config.pretrain.tau);
            if (!std::isfinite(loss.item())) {
                throw std::runtime_error("pretrain: non-finite loss at step " + std::to_string(step));
            }
            ad::backward(loss);
            auto params = enc.named_parameters();
            if (m.empty()) {
                for (const auto& [name, t] : params) {
                    m.emplace_back(t->size(), 0.0);
                    v.emplace_back(t->size(), 0.0);
                }
            }
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
            for (std::size_t k = 0; k < params.size(); ++k) {
                Tensor& t = *params[k].second;
                if (!t.has_grad()) continue;
                const auto g = t.grad();
                std::vector<double> w(t.values().begin(), t.values().end());
                for (std::size_t i = 0; i < w.size(); ++i) {
                    m[k][i] = b1 * m[k][i] + (1 - b1) * g[i];
                    v[k][i] = b2 * v[k][i] + (1 - b2) * g[i] * g[i];
                    w[i] -= config.pretrain.lr * (m[k][i] / c1) / (std::sqrt(v[k][i] / c2) + eps);
                }
                t = Tensor::from(t.shape(), std::move(w), true);
            }
            if (log && (step % 250 == 0 || step == config.pretrain.steps)) {
                log("pretrain: step " + std::to_string(step) + " loss " + std::to_string(loss.item()));
            }
        }
        out.steps = config.pretrain.steps;
    }
    enc.freeze();
    std::vector<std::size_t> held_out;
    for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
        if (!std::binary_search(split.train_pool.begin(), split.train_pool.end(), i)) held_out.push_back(i);
    }
    out.zero_shot_acc = evaluate(enc, nullptr, corpus, held_out, classes);
    if (log) {
        log("pretrain: held-out zero-shot accuracy " + std::to_string(out.zero_shot_acc) + " over " +
            std::to_string(classes.size()) + " classes");
    }
    if (out.zero_shot_acc < config.pretrain.floor) {
        throw std::runtime_error("pretrain: held-out zero-shot accuracy " + std::to_string(out.zero_shot_acc) +
                                 " is below the floor " + std::to_string(config.pretrain.floor));
    }
    if (!out.cache_file.empty() && !out.from_cache) {
        checkpoint::Blocks blocks;
        checkpoint::add_backbone(blocks, enc);
        checkpoint::write(out.cache_file, blocks);
    }
    out.encoder = std::make_shared<const DualEncoder>(std::move(enc));
    return out;
}

// --- prompt training ------------------------------------------------------

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

Tensor row_of(const Tensor& m, std::size_t r) {
    const auto v = m.values();
    return Tensor::vector(std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(r * m.cols()),
                                              v.begin() + static_cast<std::ptrdiff_t>((r + 1) * m.cols())));
}

std::size_t local_index(std::span<const int> classes, int label) {
    const auto it = std::find(classes.begin(), classes.end(), label);
    if (it == classes.end()) throw std::invalid_argument("train: sample label " + std::to_string(label) + " outside the class set");
    return static_cast<std::size_t>(it - classes.begin());
}

template <typename T>
std::string join(const std::vector<T>& v, const char* fmt) {
    std::string s;
    char buf[64];
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::snprintf(buf, sizeof buf, fmt, v[i]);
        if (i) s += ';';
        s += buf;
    }
    return s;
}

}  // namespace

RunStreams RunStreams::from_seed(std::uint64_t seed) {
    const std::uint64_t base = splitmix(seed);
    return RunStreams{seed, splitmix(base ^ 1), splitmix(base ^ 2), splitmix(base ^ 3), splitmix(base ^ 4)};
}

rg::PrototypeTable training_prototypes(const DualEncoder& frozen, const Dataset& ds,
                                       std::span<const std::size_t> train_indices, std::span<const int> classes) {
    std::vector<std::pair<std::vector<double>, int>> feats;
    for (auto i : train_indices) {
        const auto& s = ds.samples.at(i);
        const Tensor f = frozen.encode_image(s.image).feature;
        feats.emplace_back(std::vector<double>(f.values().begin(), f.values().end()), s.label);
    }
    return rg::compute_prototypes(feats, classes);
}

TrainResult train_prompts(const RunSettings& st, const DualEncoder& frozen, const Dataset& ds,
                          std::span<const std::size_t> train_indices, std::span<const int> classes,
                          const rg::PrototypeTable& prototypes, const RunStreams& streams, std::ostream* dump) {
    if (!frozen.frozen()) throw std::logic_error("train: backbone must be frozen");
    if (train_indices.empty()) throw std::invalid_argument("train: empty training set");
    const auto& sw = st.switches;
    const bool need_mask = sw.cir && sw.masking;

    TrainResult result;
    result.checksum_before = frozen.checksum();

    const Tensor g_o = frozen.frozen_class_matrix(classes);
    const rg::TextFeatures text_o{g_o, rg::Branch::frozen};

    // Frozen-model quantities never change; compute them once per image.
    struct Cached {
        std::size_t index, label;
        Tensor f_o, q_oo, target;
        saliency::SaliencyScores scores;
    };
    std::vector<Cached> cache;
    for (auto i : train_indices) {
        const auto& s = ds.samples.at(i);
        Cached c;
        c.index = i;
        c.label = local_index(classes, s.label);
        auto out = frozen.encode_image(s.image, nullptr, nullptr, need_mask);
        c.f_o = out.feature;
        c.q_oo = rg::cosine_scores(c.f_o, g_o);
        if (need_mask) c.scores = saliency::score_tokens(*out.trace, row_of(g_o, c.label), s.label);
        if (sw.dir) c.target = sw.dir_target == DirTarget::prototype ? prototypes.tensor(s.label) : c.f_o;
        cache.push_back(std::move(c));
    }

    std::mt19937_64 init_rng(streams.init), mask_rng(streams.mask), order_rng(streams.order);
    PromptBank prompts = frozen.make_prompts(st.prompt, init_rng);
    std::vector<std::vector<double>> velocity;
    for (auto* p : prompts.parameters()) velocity.emplace_back(p->size(), 0.0);

    if (dump) *dump << "step,sample,label,alpha,masked\n";
    std::vector<std::size_t> order(cache.size());
    const std::size_t batch = st.optim.batch;
    for (std::size_t epoch = 0; epoch < st.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), order_rng);
        EpochTrace tr;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
            const std::size_t b1 = std::min(order.size(), b0 + batch);
            const rg::TextFeatures text_p{frozen.encode_texts(classes, &prompts), rg::Branch::prompted};
            Tensor sum;
            for (std::size_t j = b0; j < b1; ++j) {
                const Cached& c = cache[order[j]];
                const auto& image = ds.samples[c.index].image;
                const rg::ImageFeature f_p{frozen.encode_image(image, &prompts).feature, rg::Branch::prompted,
                                           rg::ImageInput::full};
                const rg::ImageFeature f_o{c.f_o, rg::Branch::frozen, rg::ImageInput::full};
                const rg::ScoreVector q_pp = rg::score_vector(f_p, text_p);
                Tensor ce = rg::ce_loss(q_pp, c.label, st.tau), sr, cir, dir;
                if (sw.sr) sr = rg::sr_loss(q_pp, rg::ScoreVector{c.q_oo, rg::Pairing::oo, rg::ImageInput::full}, st.tau);
                if (sw.cir) {
                    rg::ImageFeature f_m{f_p.value, rg::Branch::prompted, rg::ImageInput::masked, 0};
                    if (sw.masking) {
                        const auto plan = saliency::select_mask(c.scores, st.gamma, st.mask_fraction, mask_rng);
                        if (dump) {
                            *dump << result.steps << ',' << c.index << ',' << ds.samples[c.index].label << ','
                                  << join(c.scores.alpha, "%.6f") << ',' << join(plan.masked, "%zu") << '\n';
                        }
                        if (!plan.masked.empty()) {
                            const auto keep = saliency::to_keep_mask(plan, c.scores.alpha.size());
                            f_m.value = frozen.encode_image(image, &prompts, &keep).feature;
                        }
                        f_m.masked_patches = plan.masked.size();
                    }
                    cir = rg::cir_loss(rg::score_vector(f_m, text_o), rg::score_vector(f_o, text_p), st.tau);
                }
                if (sw.dir) {
                    dir = sw.dir_variant == rg::AlignmentVariant::direction
                              ? rg::dir_loss(f_p, c.target)
                              : rg::alignment_variant_loss(f_p.value, c.target, sw.dir_variant);
                }
                const Tensor total = rg::total_loss(ce, sr, cir, dir, st.lambda);
                tr.ce += ce.item();
                if (sr.defined()) tr.sr += sr.item();
                if (cir.defined()) tr.cir += cir.item();
                if (dir.defined()) tr.dir += dir.item();
                tr.total += total.item();
                sum = sum.defined() ? ad::add(sum, total) : total;
            }
            const Tensor loss = ad::scale(sum, 1.0 / static_cast<double>(b1 - b0));
            if (!std::isfinite(loss.item())) {
                throw std::runtime_error("train: non-finite total loss at step " + std::to_string(result.steps));
            }
            ad::backward(loss);
            auto params = prompts.parameters();
            for (std::size_t k = 0; k < params.size(); ++k) {
                Tensor& p = *params[k];
                std::vector<double> w(p.values().begin(), p.values().end());
                if (p.has_grad()) {
                    const auto g = p.grad();
                    for (std::size_t i = 0; i < w.size(); ++i) velocity[k][i] = st.optim.momentum * velocity[k][i] + g[i];
                } else {
                    for (auto& x : velocity[k]) x *= st.optim.momentum;
                }
                for (std::size_t i = 0; i < w.size(); ++i) w[i] -= st.optim.lr * velocity[k][i];
                p = Tensor::from(p.shape(), std::move(w), true);
            }
            ++result.steps;
        }
        const double n = static_cast<double>(cache.size());
        tr.ce /= n;
        tr.sr /= n;
        tr.cir /= n;
        tr.dir /= n;
        tr.total /= n;
        result.trace.push_back(tr);
    }
    result.checksum_after = frozen.checksum();
    if (result.checksum_after != result.checksum_before) throw std::logic_error("train: backbone parameters changed");
    result.prompts = std::move(prompts);
    return result;
}

// --- protocols ------------------------------------------------------------

Dataset source_corpus(const ExperimentConfig& config, const std::filesystem::path& cache_dir) {
    data::RenderConfig r = config.data.render;
    r.pool = data::ClassPool::downstream;
    if (cache_dir.empty()) return data::generate_corpus(config.data.classes, config.data.samples_per_class, r, config.data.seed);
    std::filesystem::create_directories(cache_dir);
    const auto digest = data::corpus_digest(config.data.classes, config.data.samples_per_class, r, config.data.seed);
    return data::load_or_generate(cache_dir / ("corpus-" + hex(digest) + ".dset"), config.data.classes,
                                  config.data.samples_per_class, r, config.data.seed);
}

namespace {

// Further downstream corpora with disjoint classes and a shifted background.
std::vector<Dataset> cross_targets(const ExperimentConfig& config, const Dataset& source) {
    std::vector<int> rest;
    const auto used = source.class_ids();
    for (std::size_t id = 0; id < data::attribute_grid().size(); ++id) {
        const auto c = data::toy_class(static_cast<int>(id));
        if (data::in_pool(c, data::ClassPool::downstream) && !std::binary_search(used.begin(), used.end(), c.id)) {
            rest.push_back(c.id);
        }
    }
    const std::size_t n = config.data.classes;
    if (rest.size() < n * config.data.cross_targets) {
        throw std::invalid_argument("cross-dataset: " + std::to_string(rest.size()) + " unused classes cannot form " +
                                    std::to_string(config.data.cross_targets) + " targets of " + std::to_string(n));
    }
    std::mt19937_64 rng(splitmix(config.data.seed ^ 0xc055));
    std::shuffle(rest.begin(), rest.end(), rng);
    std::vector<Dataset> out;
    for (std::size_t t = 0; t < config.data.cross_targets; ++t) {
        std::vector<int> ids(rest.begin() + static_cast<std::ptrdiff_t>(t * n),
                             rest.begin() + static_cast<std::ptrdiff_t>((t + 1) * n));
        data::RenderConfig r = source.render;
        r.background = std::min(0.9, r.background + 0.1 * static_cast<double>(t + 1));
        out.push_back(data::generate_corpus_for(ids, config.data.samples_per_class, r, config.data.seed + t + 1));
    }
    return out;
}

ReportRow base_row(const ExperimentConfig& config, Protocol protocol, std::uint64_t seed, const RunSettings& st,
                   std::size_t k, const TrainResult& tr) {
    ReportRow r;
    r.protocol = protocol_name(protocol);
    r.dataset = "source";
    r.seed = seed;
    r.k_shot = k;
    r.lambda = st.lambda;
    r.depth = st.prompt.depth;
    r.reference_depth = 0;
    r.switches = st.switches.label();
    if (!tr.trace.empty()) {
        const auto& last = tr.trace.back();
        r.ce = last.ce;
        r.sr = last.sr;
        r.cir = last.cir;
        r.dir = last.dir;
    }
    r.trace = tr.trace;
    r.checksum_before = tr.checksum_before;
    r.checksum_after = tr.checksum_after;
    (void)config;
    return r;
}

struct Job {
    std::size_t condition = 0;
    std::uint64_t seed = 0;
    std::function<std::vector<ReportRow>()> run;
    std::string context;
};

std::vector<ReportRow> execute(std::vector<Job>& jobs, std::size_t parallel, const Logger& log) {
    std::vector<std::vector<ReportRow>> results(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&] {
        for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
            try {
                results[j] = jobs[j].run();
                for (auto& r : results[j]) r.condition = jobs[j].condition;
                if (log) {
                    std::lock_guard lock(log_mutex);
                    for (const auto& r : results[j]) {
                        char buf[160];
                        std::snprintf(buf, sizeof buf, " base=%.2f novel=%s", r.base_acc,
                                      r.novel_acc ? std::to_string(*r.novel_acc).c_str() : "-");
                        log(jobs[j].context + " " + r.dataset + buf);
                    }
                }
            } catch (...) {
                errors[j] = std::current_exception();
            }
        }
    };
    const std::size_t n = std::max<std::size_t>(1, std::min(parallel, jobs.size()));
    if (n == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        if (!errors[j]) continue;
        try {
            std::rethrow_exception(errors[j]);
        } catch (const std::exception& e) {
            throw std::runtime_error(jobs[j].context + ": " + e.what());
        }
    }
    std::vector<ReportRow> rows;
    for (auto& r : results) rows.insert(rows.end(), r.begin(), r.end());
    return rows;
}

}  // namespace

SingleRun run_base_to_novel(const ExperimentConfig& config, const DualEncoder& shared, const Dataset& ds,
                            std::uint64_t seed, const RunSettings& st, std::ostream* dump) {
    const DualEncoder frozen = shared;  // private text cache
    const auto streams = RunStreams::from_seed(seed);
    SingleRun run;
    run.split = data::split_base_novel(ds, config.data.base_fraction, streams.split);
    const auto train = data::sample_k_shot(ds, run.split, config.data.k_shot, streams.k_shot);
    run.prototypes = training_prototypes(frozen, ds, train, run.split.base_classes);
    run.train = train_prompts(st, frozen, ds, train, run.split.base_classes, run.prototypes, streams, dump);
    run.row = base_row(config, config.protocol, seed, st, config.data.k_shot, run.train);
    run.row.base_acc = 100.0 * evaluate(frozen, &run.train.prompts, ds, run.split.test_base, run.split.base_classes);
    run.row.novel_acc = 100.0 * evaluate(frozen, &run.train.prompts, ds, run.split.test_novel, run.split.novel_classes);
    run.row.hm = harmonic_mean(run.row.base_acc, *run.row.novel_acc);
    return run;
}

EvalReport run_protocol(const ExperimentConfig& config, const Backbone& backbone, const ProtocolOptions& options) {
    const auto t0 = std::chrono::steady_clock::now();
    if (!backbone.encoder || !backbone.encoder->frozen()) throw std::invalid_argument("run_protocol: needs a frozen backbone");
    const Dataset ds = source_corpus(config, options.corpus_cache_dir);
    const DualEncoder& shared = *backbone.encoder;
    const Protocol protocol = config.protocol;
    const char* pname = protocol_name(protocol);

    std::vector<Job> jobs;
    auto add_b2n = [&](std::size_t condition, std::uint64_t seed, RunSettings st, std::size_t ref_depth) {
        ExperimentConfig c = config;
        c.protocol = protocol;
        std::string ctx = std::string(pname) + " seed=" + std::to_string(seed) + " " + st.switches.label() +
                          " lambda=" + std::to_string(st.lambda) + " depth=" + std::to_string(st.prompt.depth);
        jobs.push_back(Job{condition, seed, [c, &shared, &ds, seed, st, ref_depth] {
                               auto run = run_base_to_novel(c, shared, ds, seed, st);
                               run.row.reference_depth = ref_depth;
                               return std::vector<ReportRow>{run.row};
                           },
                           ctx});
    };

    switch (protocol) {
        case Protocol::base_to_novel: {
            const auto st = settings_for(config, protocol);
            for (auto seed : config.seeds) add_b2n(0, seed, st, 0);
            break;
        }
        case Protocol::ablation: {
            const auto rows = ablation_rows();
            for (std::size_t r = 0; r < rows.size(); ++r) {
                auto st = settings_for(config, protocol);
                const auto variant = st.switches.dir_variant;
                st.switches = rows[r];
                st.switches.dir_variant = variant;
                for (auto seed : config.seeds) add_b2n(r, seed, st, 0);
            }
            break;
        }
        case Protocol::lambda_sweep: {
            for (std::size_t g = 0; g < config.lambda_grid.size(); ++g) {
                auto st = settings_for(config, protocol);
                st.lambda = config.lambda_grid[g];
                for (auto seed : config.seeds) add_b2n(g, seed, st, 0);
            }
            break;
        }
        case Protocol::depth_sweep: {
            for (std::size_t g = 0; g < config.depth_grid.size(); ++g) {
                auto st = settings_for(config, protocol);
                st.prompt.depth = scaled_depth(config.depth_grid[g], config.reference_layers, config.encoder.layers);
                for (auto seed : config.seeds) add_b2n(g, seed, st, config.depth_grid[g]);
            }
            break;
        }
        case Protocol::few_shot: {
            const auto st = settings_for(config, protocol);
            for (std::size_t g = 0; g < config.data.few_shot_k.size(); ++g) {
                const std::size_t k = config.data.few_shot_k[g];
                for (auto seed : config.seeds) {
                    jobs.push_back(Job{g, seed, [&config, &shared, &ds, seed, st, k, protocol] {
                                           const DualEncoder frozen = shared;
                                           const auto streams = RunStreams::from_seed(seed);
                                           const auto split = data::split_all_base(ds, streams.split);
                                           const auto train = data::sample_k_shot(ds, split, k, streams.k_shot);
                                           const auto protos = training_prototypes(frozen, ds, train, split.base_classes);
                                           const auto tr = train_prompts(st, frozen, ds, train, split.base_classes,
                                                                         protos, streams);
                                           ReportRow row = base_row(config, protocol, seed, st, k, tr);
                                           row.base_acc = 100.0 * evaluate(frozen, &tr.prompts, ds, split.test_base,
                                                                           split.base_classes);
                                           return std::vector<ReportRow>{row};
                                       },
                                       std::string(pname) + " seed=" + std::to_string(seed) + " k=" + std::to_string(k)});
                }
            }
            break;
        }
        case Protocol::cross_dataset:
        case Protocol::domain_generalization: {
            const auto st = settings_for(config, protocol);
            auto targets = std::make_shared<std::vector<std::pair<std::string, Dataset>>>();
            if (protocol == Protocol::cross_dataset) {
                auto sets = cross_targets(config, ds);
                for (std::size_t t = 0; t < sets.size(); ++t) targets->emplace_back("target-" + std::to_string(t + 1), std::move(sets[t]));
            } else {
                for (auto kind : config.data.shifts) {
                    targets->emplace_back(data::shift_kind_name(kind),
                                          data::domain_shift(ds, kind, config.data.shift_magnitude,
                                                             splitmix(config.data.seed ^ static_cast<std::uint64_t>(kind))));
                }
            }
            for (auto seed : config.seeds) {
                jobs.push_back(Job{0, seed, [&config, &shared, &ds, seed, st, protocol, targets] {
                                       const DualEncoder frozen = shared;
                                       const auto streams = RunStreams::from_seed(seed);
                                       const auto split = data::split_all_base(ds, streams.split);
                                       const auto train = data::sample_k_shot(ds, split, config.data.k_shot, streams.k_shot);
                                       const auto protos = training_prototypes(frozen, ds, train, split.base_classes);
                                       const auto tr = train_prompts(st, frozen, ds, train, split.base_classes, protos, streams);
                                       const double source_acc = 100.0 * evaluate(frozen, &tr.prompts, ds, split.test_base,
                                                                                  split.base_classes);
                                       std::vector<ReportRow> rows;
                                       for (std::size_t t = 0; t < targets->size(); ++t) {
                                           const auto& [name, target] = (*targets)[t];
                                           ReportRow row = base_row(config, protocol, seed, st, config.data.k_shot, tr);
                                           row.dataset = name;
                                           row.base_acc = source_acc;
                                           std::vector<std::size_t> idx;
                                           if (protocol == Protocol::cross_dataset) {
                                               idx.resize(target.samples.size());
                                               std::iota(idx.begin(), idx.end(), 0);
                                           } else {
                                               idx = split.test_base;  // shifted renderings of held-out images
                                           }
                                           const auto tclasses = target.class_ids();
                                           row.novel_acc = 100.0 * evaluate(frozen, &tr.prompts, target, idx, tclasses);
                                           row.hm = harmonic_mean(row.base_acc, *row.novel_acc);
                                           rows.push_back(std::move(row));
                                       }
                                       return rows;
                                   },
                                   std::string(pname) + " seed=" + std::to_string(seed)});
            }
            break;
        }
    }

    // Condition-major job order; rows come back in that order.
    std::stable_sort(jobs.begin(), jobs.end(), [](const Job& a, const Job& b) { return a.condition < b.condition; });
    EvalReport report;
    report.protocol = pname;
    report.rows = execute(jobs, options.parallel, options.log);
    report.summary = summarize(report.rows);
    report.config_digest = config.digest;
    report.backbone = backbone;
    report.resolved_config = config.resolved;
    report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

// --- reports --------------------------------------------------------------

namespace {

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
    mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
}

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string opt(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return q + "\"";
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

std::vector<SummaryRow> summarize(const std::vector<ReportRow>& rows) {
    std::vector<std::string> keys;
    std::map<std::string, std::vector<const ReportRow*>> groups;
    for (const auto& r : rows) {
        const std::string key = std::to_string(r.condition) + "|" + r.dataset + "|" + r.switches + "|" +
                                std::to_string(r.k_shot) + "|" + num(r.lambda) + "|" + std::to_string(r.depth) + "|" +
                                std::to_string(r.reference_depth);
        if (!groups.contains(key)) keys.push_back(key);
        groups[key].push_back(&r);
    }
    std::vector<SummaryRow> out;
    for (const auto& key : keys) {
        const auto& g = groups[key];
        SummaryRow s;
        s.key = *g.front();
        s.key.trace.clear();
        s.seeds = g.size();
        std::vector<double> base, novel, hm;
        for (const auto* r : g) {
            base.push_back(r->base_acc);
            if (r->novel_acc) novel.push_back(*r->novel_acc);
            if (r->hm) hm.push_back(*r->hm);
        }
        mean_std(base, s.base_mean, s.base_std);
        if (novel.size() == g.size()) {
            double m, sd;
            mean_std(novel, m, sd);
            s.novel_mean = m;
            s.novel_std = sd;
        }
        if (hm.size() == g.size()) {
            double m, sd;
            mean_std(hm, m, sd);
            s.hm_mean = m;
            s.hm_std = sd;
        }
        out.push_back(std::move(s));
    }
    return out;
}

void write_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
    out << kCsvHeader << '\n';
    for (const auto& r : rows) {
        out << csv_field(r.protocol) << ',' << csv_field(r.dataset) << ',' << r.seed << ',' << r.k_shot << ','
            << num(r.lambda) << ',' << r.depth << ',' << csv_field(r.switches) << ',' << num(r.base_acc) << ','
            << opt(r.novel_acc) << ',' << opt(r.hm) << ',' << num(r.ce) << ',' << num(r.sr) << ',' << num(r.cir) << ','
            << num(r.dir) << '\n';
    }
}

void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows) {
    out << "protocol,dataset,k_shot,lambda,depth,switches,seeds,base_mean,base_std,novel_mean,novel_std,hm_mean,hm_std\n";
    for (const auto& s : rows) {
        const auto& r = s.key;
        out << csv_field(r.protocol) << ',' << csv_field(r.dataset) << ',' << r.k_shot << ',' << num(r.lambda) << ','
            << r.depth << ',' << csv_field(r.switches) << ',' << s.seeds << ',' << num(s.base_mean) << ','
            << num(s.base_std) << ',' << opt(s.novel_mean) << ',' << opt(s.novel_std) << ',' << opt(s.hm_mean) << ','
            << opt(s.hm_std) << '\n';
    }
}

std::string to_json(const EvalReport& report) {
    using nlohmann::json;
    json j;
    j["protocol"] = report.protocol;
    j["config_digest"] = hex(report.config_digest);
    j["wall_clock_seconds"] = report.wall_clock_seconds;
    j["backbone"] = {{"zero_shot_acc", report.backbone.zero_shot_acc},
                     {"chance", report.backbone.chance},
                     {"steps", report.backbone.steps},
                     {"from_cache", report.backbone.from_cache},
                     {"checksum", report.backbone.encoder ? hex(report.backbone.encoder->checksum()) : ""}};
    j["rows"] = json::array();
    for (const auto& r : report.rows) {
        json trace = json::array();
        for (const auto& t : r.trace) {
            trace.push_back({{"ce", t.ce}, {"sr", t.sr}, {"cir", t.cir}, {"dir", t.dir}, {"total", t.total}});
        }
        j["rows"].push_back({{"protocol", r.protocol},
                             {"dataset", r.dataset},
                             {"seed", r.seed},
                             {"k_shot", r.k_shot},
                             {"lambda", r.lambda},
                             {"depth", r.depth},
                             {"reference_depth", r.reference_depth},
                             {"switches", r.switches},
                             {"base_acc", r.base_acc},
                             {"novel_acc", opt_json(r.novel_acc)},
                             {"hm", opt_json(r.hm)},
                             {"ce", r.ce},
                             {"sr", r.sr},
                             {"cir", r.cir},
                             {"dir", r.dir},
                             {"backbone_checksum_before", hex(r.checksum_before)},
                             {"backbone_checksum_after", hex(r.checksum_after)},
                             {"epoch_trace", trace}});
    }
    j["summary"] = json::array();
    for (const auto& s : report.summary) {
        j["summary"].push_back({{"dataset", s.key.dataset},
                                {"k_shot", s.key.k_shot},
                                {"lambda", s.key.lambda},
                                {"depth", s.key.depth},
                                {"reference_depth", s.key.reference_depth},
                                {"switches", s.key.switches},
                                {"seeds", s.seeds},
                                {"base_mean", s.base_mean},
                                {"base_std", s.base_std},
                                {"novel_mean", opt_json(s.novel_mean)},
                                {"novel_std", opt_json(s.novel_std)},
                                {"hm_mean", opt_json(s.hm_mean)},
                                {"hm_std", opt_json(s.hm_std)}});
    }
    j["resolved_config"] = report.resolved_config;
    return j.dump(2);
}

void write_report_files(const std::filesystem::path& dir, const EvalReport& report) {
    std::filesystem::create_directories(dir);
    auto open = [&](const char* name) {
        std::ofstream f(dir / name);
        if (!f) throw std::runtime_error("report: cannot write " + (dir / name).string());
        return f;
    };
    {
        auto f = open("report.csv");
        write_csv(f, report.rows);
    }
    {
        auto f = open("summary.csv");
        write_summary_csv(f, report.summary);
    }
    {
        auto f = open("report.json");
        f << to_json(report) << '\n';
    }
}

}  // namespace disa::harness
