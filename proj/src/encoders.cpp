#include "disa/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "disa/ops.hpp"

namespace disa::encoders {

using ad::Tensor;

void EncoderConfig::validate() const {
    if (width == 0 || heads == 0 || width % heads != 0) {
        throw std::invalid_argument("encoder: width " + std::to_string(width) + " not divisible by heads " +
                                    std::to_string(heads));
    }
    if (layers < 1) throw std::invalid_argument("encoder: layers must be >= 1");
    if (patches < 4) throw std::invalid_argument("encoder: need at least 4 patches");
    if (patch_dim == 0 || mlp_ratio == 0 || context < 3) throw std::invalid_argument("encoder: degenerate sizes");
}

Vocabulary::Vocabulary(std::vector<std::string> words) {
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    words_ = {"<sos>", "<eos>"};
    for (auto& w : words) {
        if (w.empty() || w == "<sos>" || w == "<eos>") continue;
        words_.push_back(std::move(w));
    }
    for (std::size_t i = 0; i < words_.size(); ++i) ids_[words_[i]] = i;
}

std::size_t Vocabulary::id(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) throw std::out_of_range("vocabulary: unknown word '" + word + "'");
    return it->second;
}

std::vector<std::size_t> Vocabulary::tokenize(const std::string& text) const {
    std::istringstream in(text);
    std::vector<std::size_t> out;
    for (std::string w; in >> w;) out.push_back(id(w));
    return out;
}

std::vector<Tensor*> PromptBank::parameters() {
    std::vector<Tensor*> out;
    for (auto& t : visual) out.push_back(&t);
    for (auto& t : textual) out.push_back(&t);
    return out;
}

std::vector<const Tensor*> PromptBank::parameters() const {
    std::vector<const Tensor*> out;
    for (const auto& t : visual) out.push_back(&t);
    for (const auto& t : textual) out.push_back(&t);
    return out;
}

namespace {

Tensor gaussian(ad::Shape shape, double std, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std);
    std::vector<double> v(ad::shape_size(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor ones(std::size_t n) { return Tensor::full({n}, 1.0, true); }
Tensor zeros(std::size_t n) { return Tensor::full({n}, 0.0, true); }

BlockParams make_block(const EncoderConfig& c, std::mt19937_64& rng) {
    const std::size_t d = c.width, hidden = c.width * c.mlp_ratio;
    BlockParams b;
    b.ln1_g = ones(d);
    b.ln1_b = zeros(d);
    b.wq = gaussian({d, d}, c.init_std, rng);
    b.bq = zeros(d);
    b.wk = gaussian({d, d}, c.init_std, rng);
    b.bk = zeros(d);
    b.wv = gaussian({d, d}, c.init_std, rng);
    b.bv = zeros(d);
    b.wo = gaussian({d, d}, c.init_std, rng);
    b.bo = zeros(d);
    b.ln2_g = ones(d);
    b.ln2_b = zeros(d);
    b.w1 = gaussian({d, hidden}, c.init_std, rng);
    b.b1 = zeros(hidden);
    b.w2 = gaussian({hidden, d}, c.init_std, rng);
    b.b2 = zeros(d);
    return b;
}

template <typename Block, typename F>
void visit_block(const std::string& prefix, Block& b, F&& f) {
    f(prefix + ".ln1_g", b.ln1_g);
    f(prefix + ".ln1_b", b.ln1_b);
    f(prefix + ".wq", b.wq);
    f(prefix + ".bq", b.bq);
    f(prefix + ".wk", b.wk);
    f(prefix + ".bk", b.bk);
    f(prefix + ".wv", b.wv);
    f(prefix + ".bv", b.bv);
    f(prefix + ".wo", b.wo);
    f(prefix + ".bo", b.bo);
    f(prefix + ".ln2_g", b.ln2_g);
    f(prefix + ".ln2_b", b.ln2_b);
    f(prefix + ".w1", b.w1);
    f(prefix + ".b1", b.b1);
    f(prefix + ".w2", b.w2);
    f(prefix + ".b2", b.b2);
}

template <typename Image, typename Text, typename F>
void visit_params(Image& image, Text& text, F&& f) {
    f("image.patch_w", image.patch_w);
    f("image.patch_b", image.patch_b);
    f("image.cls", image.cls);
    f("image.pos", image.pos);
    f("image.ln_pre_g", image.ln_pre_g);
    f("image.ln_pre_b", image.ln_pre_b);
    for (std::size_t i = 0; i < image.blocks.size(); ++i) visit_block("image.block" + std::to_string(i), image.blocks[i], f);
    f("image.ln_post_g", image.ln_post_g);
    f("image.ln_post_b", image.ln_post_b);
    f("image.proj", image.proj);
    f("text.token_embedding", text.token_embedding);
    f("text.pos", text.pos);
    for (std::size_t i = 0; i < text.blocks.size(); ++i) visit_block("text.block" + std::to_string(i), text.blocks[i], f);
    f("text.ln_final_g", text.ln_final_g);
    f("text.ln_final_b", text.ln_final_b);
    f("text.proj", text.proj);
}

Tensor affine_norm(const Tensor& x, const Tensor& g, const Tensor& b) {
    return ad::add(ad::mul(ad::layer_norm(x), g), b);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return ad::add(ad::matmul(x, w), b); }

std::vector<std::size_t> iota(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> out;
    for (std::size_t i = begin; i < end; ++i) out.push_back(i);
    return out;
}

// Deep prompting: layer 0 inserts the prompt rows at `at`, deeper prompted
// layers overwrite the same slots, later layers carry them unchanged.
Tensor with_prompts(const Tensor& x, const Tensor& prompts, std::size_t at, bool replace) {
    const std::size_t n = x.rows();
    const std::size_t skip = replace ? prompts.rows() : 0;
    std::vector<Tensor> parts;
    if (at > 0) parts.push_back(ad::slice(x, 0, 0, at));
    parts.push_back(prompts);
    if (at + skip < n) parts.push_back(ad::slice(x, 0, at + skip, n));
    return ad::concat(parts, 0);
}

}  // namespace

DualEncoder::DualEncoder(EncoderConfig config, Vocabulary vocab, std::uint64_t seed)
    : config_(config), vocab_(std::move(vocab)) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = config_.width;
    const double s = config_.init_std;

    image_.patch_w = gaussian({config_.patch_dim, d}, s, rng);
    image_.patch_b = zeros(d);
    image_.cls = gaussian({1, d}, s, rng);
    image_.pos = gaussian({config_.patches + 1, d}, s, rng);
    image_.ln_pre_g = ones(d);
    image_.ln_pre_b = zeros(d);
    for (std::size_t l = 0; l < config_.layers; ++l) image_.blocks.push_back(make_block(config_, rng));
    image_.ln_post_g = ones(d);
    image_.ln_post_b = zeros(d);
    image_.proj = gaussian({d, d}, s, rng);

    text_.token_embedding = gaussian({vocab_.size(), d}, s, rng);
    text_.pos = gaussian({config_.context, d}, s, rng);
    for (std::size_t l = 0; l < config_.layers; ++l) text_.blocks.push_back(make_block(config_, rng));
    text_.ln_final_g = ones(d);
    text_.ln_final_b = zeros(d);
    text_.proj = gaussian({d, d}, s, rng);
}

void DualEncoder::register_class(int class_id, const std::string& name) {
    auto words = vocab_.tokenize(name);
    if (words.empty()) throw std::invalid_argument("encoder: empty class name for class " + std::to_string(class_id));
    std::vector<std::size_t> ids{Vocabulary::kSos};
    for (auto t : vocab_.tokenize(kTemplate)) ids.push_back(t);
    ids.insert(ids.end(), words.begin(), words.end());
    ids.push_back(Vocabulary::kEos);
    if (ids.size() > config_.context) {
        throw std::invalid_argument("encoder: class '" + name + "' exceeds text context of " +
                                    std::to_string(config_.context));
    }
    class_tokens_[class_id] = std::move(ids);
}

Tensor DualEncoder::run_block(const BlockParams& p, const Tensor& x) const {
    const std::size_t heads = config_.heads, hd = config_.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    const Tensor h = affine_norm(x, p.ln1_g, p.ln1_b);
    const Tensor q = linear(h, p.wq, p.bq);
    const Tensor k = linear(h, p.wk, p.bk);
    const Tensor v = linear(h, p.wv, p.bv);
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t i = 0; i < heads; ++i) {
        const Tensor qh = ad::slice(q, 1, i * hd, (i + 1) * hd);
        const Tensor kh = ad::slice(k, 1, i * hd, (i + 1) * hd);
        const Tensor vh = ad::slice(v, 1, i * hd, (i + 1) * hd);
        const Tensor att = ad::softmax(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt), std::size_t{1});
        outs.push_back(ad::matmul(att, vh));
    }
    const Tensor attended = heads == 1 ? outs[0] : ad::concat(outs, 1);
    const Tensor x1 = ad::add(x, linear(attended, p.wo, p.bo));
    const Tensor h2 = affine_norm(x1, p.ln2_g, p.ln2_b);
    return ad::add(x1, linear(ad::gelu(linear(h2, p.w1, p.b1)), p.w2, p.b2));
}

ImageOutput DualEncoder::encode_image(const Tensor& image, const PromptBank* prompts,
                                      const std::vector<bool>* keep_mask, bool trace) const {
    const std::size_t n_patches = config_.patches;
    if (image.rank() != 2 || image.shape()[0] != n_patches || image.shape()[1] != config_.patch_dim) {
        throw std::invalid_argument("encode_image: expected image " +
                                    ad::shape_string({n_patches, config_.patch_dim}) + ", got " +
                                    ad::shape_string(image.shape()));
    }
    std::vector<std::size_t> kept;
    if (keep_mask) {
        if (keep_mask->size() != n_patches) {
            throw std::invalid_argument("encode_image: keep mask has " + std::to_string(keep_mask->size()) +
                                        " entries for " + std::to_string(n_patches) + " patches");
        }
        for (std::size_t i = 0; i < n_patches; ++i) {
            if ((*keep_mask)[i]) kept.push_back(i);
        }
        if (kept.empty()) throw std::invalid_argument("encode_image: keep mask removes every patch");
    } else {
        kept = iota(0, n_patches);
    }
    const bool masked = kept.size() != n_patches;
    const bool prompted = prompts != nullptr && prompts->depth() > 0;
    if (prompted && prompts->depth() > config_.layers) throw std::invalid_argument("encode_image: prompt depth exceeds layers");

    Tensor tokens = linear(image, image_.patch_w, image_.patch_b);
    if (masked) tokens = ad::gather_rows(tokens, kept);
    std::vector<std::size_t> pos_rows{0};
    for (auto i : kept) pos_rows.push_back(i + 1);
    Tensor x = ad::add(ad::concat({image_.cls, tokens}, 0), ad::gather_rows(image_.pos, pos_rows));

    const std::size_t n_prompt = prompted ? prompts->visual[0].rows() : 0;
    if (prompted) x = with_prompts(x, prompts->visual[0], 0, false);
    x = affine_norm(x, image_.ln_pre_g, image_.ln_pre_b);

    ImageOutput out;
    TokenTrace tr;
    for (std::size_t l = 0; l < config_.layers; ++l) {
        if (prompted && l > 0 && l < prompts->depth()) x = with_prompts(x, prompts->visual[l], 0, true);
        tr.layer_lengths.push_back(x.rows());
        if (trace && l + 1 == config_.layers) {
            const BlockParams& last = image_.blocks[l];
            tr.final_normed = affine_norm(x, last.ln1_g, last.ln1_b);
            tr.final_keys = linear(tr.final_normed, last.wk, last.bk);
            tr.ln1_g = last.ln1_g;
            tr.ln1_b = last.ln1_b;
            tr.wq = last.wq;
            tr.bq = last.bq;
        }
        x = run_block(image_.blocks[l], x);
    }
    const Tensor cls = ad::slice(x, 0, n_prompt, n_prompt + 1);
    const Tensor f = ad::matmul(affine_norm(cls, image_.ln_post_g, image_.ln_post_b), image_.proj);
    out.feature = ad::reshape(f, {config_.width});
    if (trace) {
        tr.prompted = prompted;
        tr.masked = masked;
        tr.prompt_tokens = n_prompt;
        tr.cls_index = n_prompt;
        for (std::size_t i = 0; i < kept.size(); ++i) tr.patch_index.push_back(n_prompt + 1 + i);
        tr.heads = config_.heads;
        out.trace = std::move(tr);
    }
    return out;
}

Tensor DualEncoder::encode_text(int class_id, const PromptBank* prompts) const {
    auto it = class_tokens_.find(class_id);
    if (it == class_tokens_.end()) throw std::out_of_range("encode_text: unknown class id " + std::to_string(class_id));
    const auto& ids = it->second;
    const bool prompted = prompts != nullptr && prompts->depth() > 0;
    if (prompted && prompts->depth() > config_.layers) throw std::invalid_argument("encode_text: prompt depth exceeds layers");

    Tensor x = ad::add(ad::embedding(text_.token_embedding, ids), ad::slice(text_.pos, 0, 0, ids.size()));
    if (prompted) x = with_prompts(x, prompts->textual[0], 1, false);
    for (std::size_t l = 0; l < config_.layers; ++l) {
        if (prompted && l > 0 && l < prompts->depth()) x = with_prompts(x, prompts->textual[l], 1, true);
        x = run_block(text_.blocks[l], x);
    }
    const std::size_t eos = x.rows() - 1;
    const Tensor e = ad::slice(x, 0, eos, eos + 1);
    return ad::reshape(ad::matmul(affine_norm(e, text_.ln_final_g, text_.ln_final_b), text_.proj), {config_.width});
}

Tensor DualEncoder::encode_texts(std::span<const int> class_ids, const PromptBank* prompts) const {
    if (class_ids.empty()) throw std::invalid_argument("encode_texts: empty class list");
    std::vector<Tensor> rows;
    rows.reserve(class_ids.size());
    for (int c : class_ids) rows.push_back(ad::reshape(encode_text(c, prompts), {1, config_.width}));
    return ad::concat(rows, 0);
}

Tensor DualEncoder::frozen_class_matrix(std::span<const int> class_ids) const {
    if (class_ids.empty()) throw std::invalid_argument("frozen_class_matrix: empty class list");
    if (!frozen_) return encode_texts(class_ids);
    std::vector<double> values;
    values.reserve(class_ids.size() * config_.width);
    for (int c : class_ids) {
        auto it = frozen_text_cache_.find(c);
        if (it == frozen_text_cache_.end()) it = frozen_text_cache_.emplace(c, encode_text(c)).first;
        const auto v = it->second.values();
        values.insert(values.end(), v.begin(), v.end());
    }
    return Tensor::matrix(class_ids.size(), config_.width, std::move(values));
}

PromptBank DualEncoder::make_prompts(const PromptConfig& pc, std::mt19937_64& rng) const {
    if (pc.depth > config_.layers) {
        throw std::invalid_argument("prompts: depth " + std::to_string(pc.depth) + " exceeds " +
                                    std::to_string(config_.layers) + " layers");
    }
    PromptBank bank;
    bank.config = pc;
    const std::size_t d = config_.width;
    for (std::size_t l = 0; l < pc.depth; ++l) {
        bank.visual.push_back(gaussian({pc.visual_tokens, d}, config_.init_std, rng));
        Tensor t = gaussian({pc.text_tokens, d}, config_.init_std, rng);
        if (l == 0) {
            // First-layer text prompts start from the template's word embeddings.
            const auto words = vocab_.tokenize(kTemplate);
            std::vector<double> v(t.values().begin(), t.values().end());
            const auto table = text_.token_embedding.values();
            for (std::size_t i = 0; i < std::min(words.size(), pc.text_tokens); ++i)
                std::copy_n(table.data() + words[i] * d, d, v.data() + i * d);
            t = Tensor::matrix(pc.text_tokens, d, std::move(v), true);
        }
        bank.textual.push_back(t);
    }
    return bank;
}

void DualEncoder::freeze() {
    visit_params(image_, text_, [](const std::string&, Tensor& t) { t = t.detach(false); });
    frozen_ = true;
    frozen_text_cache_.clear();
}

std::vector<std::pair<std::string, Tensor*>> DualEncoder::named_parameters() {
    if (frozen_) throw std::logic_error("encoder: backbone is frozen");
    std::vector<std::pair<std::string, Tensor*>> out;
    visit_params(image_, text_, [&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> DualEncoder::named_parameters() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    visit_params(image_, text_, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, &t); });
    return out;
}

std::uint64_t DualEncoder::checksum() const {
    std::vector<const Tensor*> ts;
    for (const auto& [name, t] : named_parameters()) ts.push_back(t);
    return encoders::checksum(ts);
}

void DualEncoder::set_parameter(const std::string& name, const Tensor& value) {
    for (auto& [n, t] : named_parameters()) {
        if (n != name) continue;
        if (t->shape() != value.shape()) {
            throw std::invalid_argument("encoder: parameter " + name + " expects " + ad::shape_string(t->shape()) +
                                        ", got " + ad::shape_string(value.shape()));
        }
        *t = value.detach(true);
        return;
    }
    throw std::out_of_range("encoder: unknown parameter " + name);
}

std::uint64_t checksum(std::span<const Tensor* const> tensors) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const Tensor* t : tensors) {
        for (double v : t->values()) {
            unsigned char bytes[sizeof(double)];
            std::memcpy(bytes, &v, sizeof(double));
            for (unsigned char b : bytes) {
                h ^= b;
                h *= 1099511628211ULL;
            }
        }
    }
    return h;
}

}  // namespace disa::encoders
