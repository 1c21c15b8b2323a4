#include "disa/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "disa/binary_io.hpp"

namespace disa::data {

namespace {

constexpr double kColors[][3] = {
    {0.90, 0.15, 0.15},  // red
    {0.15, 0.80, 0.20},  // green
    {0.15, 0.25, 0.90},  // blue
    {0.90, 0.85, 0.15},  // yellow
    {0.65, 0.20, 0.80},  // purple
    {0.95, 0.55, 0.10},  // orange
};

constexpr std::uint32_t kCacheMagic = 0x54455344;  // "DSET"
constexpr std::uint32_t kCacheVersion = 1;

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b)};
    return std::mt19937_64(seq);
}

bool inside_shape(std::size_t shape, double dx, double dy, double r) {
    const double ax = std::fabs(dx), ay = std::fabs(dy);
    switch (shape) {
        case 0: return std::max(ax, ay) <= r * 0.85;                                      // square
        case 1: return dx * dx + dy * dy <= r * r;                                         // circle
        case 2: return dy >= -r && dy <= r * 0.8 && ax <= (dy + r) * 0.55;                 // triangle
        case 3: return (ax <= r * 0.35 && ay <= r) || (ay <= r * 0.35 && ax <= r);         // cross
        case 4: {                                                                          // ring
            const double d2 = dx * dx + dy * dy;
            return d2 <= r * r && d2 >= 0.3 * r * r;
        }
        case 5: return ax + ay <= r;  // diamond
    }
    return false;
}

double texture_level(std::size_t texture, std::size_t x, std::size_t y) {
    switch (texture) {
        case 0: return 1.0;                                     // solid
        case 1: return (y / 2) % 2 == 0 ? 1.0 : 0.3;            // striped
        case 2: return (x % 3 == 1 && y % 3 == 1) ? 1.0 : 0.45; // dotted
        case 3: return ((x / 2) + (y / 2)) % 2 == 0 ? 1.0 : 0.3; // checkered
    }
    return 1.0;
}

// Pixel (x, y, c) of a canvas lives in patch (y / ps, x / ps).
std::size_t pixel_offset(const RenderConfig& r, std::size_t x, std::size_t y, std::size_t c) {
    const std::size_t ps = r.patch_side;
    const std::size_t patch = (y / ps) * r.grid_side + (x / ps);
    return patch * r.patch_dim() + ((y % ps) * ps + (x % ps)) * r.channels + c;
}

std::vector<double> render(const ToyClass& cls, const RenderConfig& r, std::mt19937_64& rng) {
    const std::size_t side = r.grid_side * r.patch_side;
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double cx = (side - 1) / 2.0 + r.position_jitter * unit(rng);
    const double cy = (side - 1) / 2.0 + r.position_jitter * unit(rng);
    const double radius = r.radius * (1.0 + r.scale_jitter * unit(rng));
    double color[3];
    for (std::size_t c = 0; c < 3; ++c) color[c] = kColors[cls.color][c] + r.color_jitter * gauss(rng);

    std::vector<double> px(r.patches() * r.patch_dim());
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            const bool fg = inside_shape(cls.shape, x - cx, y - cy, radius);
            const double level = texture_level(cls.texture, x, y);
            for (std::size_t c = 0; c < r.channels; ++c) {
                const double base = fg ? color[c % 3] * level : r.background;
                px[pixel_offset(r, x, y, c)] = std::clamp(base + r.pixel_noise * gauss(rng), 0.0, 1.0);
            }
        }
    }
    return px;
}

}  // namespace

const AttributeGrid& attribute_grid() {
    static const AttributeGrid grid{
        {"red", "green", "blue", "yellow", "purple", "orange"},
        {"solid", "striped", "dotted", "checkered"},
        {"square", "circle", "triangle", "cross", "ring", "diamond"},
    };
    return grid;
}

std::vector<std::string> vocabulary_words() {
    const auto& g = attribute_grid();
    std::vector<std::string> words{"a", "photo", "of"};
    words.insert(words.end(), g.colors.begin(), g.colors.end());
    words.insert(words.end(), g.textures.begin(), g.textures.end());
    words.insert(words.end(), g.shapes.begin(), g.shapes.end());
    return words;
}

const char* pool_name(ClassPool pool) { return pool == ClassPool::pretrain ? "pretrain" : "downstream"; }

ToyClass toy_class(int id) {
    const auto& g = attribute_grid();
    if (id < 0 || static_cast<std::size_t>(id) >= g.size()) throw std::out_of_range("toy_class: id " + std::to_string(id));
    ToyClass c;
    c.id = id;
    const std::size_t s = g.shapes.size(), t = g.textures.size();
    c.color = static_cast<std::size_t>(id) / (t * s);
    c.texture = (static_cast<std::size_t>(id) / s) % t;
    c.shape = static_cast<std::size_t>(id) % s;
    c.name = g.colors[c.color] + " " + g.textures[c.texture] + " " + g.shapes[c.shape];
    return c;
}

bool in_pool(const ToyClass& c, ClassPool pool) {
    const bool pretrain = (c.color + c.texture + c.shape) % 3 == 0;
    return pool == ClassPool::pretrain ? pretrain : !pretrain;
}

std::string RenderConfig::canonical() const {
    std::ostringstream out;
    out.precision(17);
    out << "grid=" << grid_side << ";patch=" << patch_side << ";ch=" << channels << ";bg=" << background
        << ";noise=" << pixel_noise << ";pos=" << position_jitter << ";scale=" << scale_jitter
        << ";color=" << color_jitter << ";radius=" << radius << ";pool=" << pool_name(pool);
    return out.str();
}

std::vector<int> Dataset::class_ids() const {
    std::vector<int> ids;
    for (const auto& c : classes) ids.push_back(c.id);
    return ids;
}

std::vector<std::size_t> Dataset::indices_of(int class_id) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].label == class_id) out.push_back(i);
    }
    return out;
}

Dataset generate_corpus_for(const std::vector<int>& class_ids, std::size_t samples_per_class,
                            const RenderConfig& render_config, std::uint64_t seed) {
    if (samples_per_class == 0) throw std::invalid_argument("generate_corpus: samples_per_class must be positive");
    Dataset ds;
    ds.render = render_config;
    ds.seed = seed;
    ds.samples_per_class = samples_per_class;
    for (int id : class_ids) ds.classes.push_back(toy_class(id));
    std::sort(ds.classes.begin(), ds.classes.end(), [](const ToyClass& a, const ToyClass& b) { return a.id < b.id; });
    for (const auto& cls : ds.classes) {
        auto rng = stream(seed, static_cast<std::uint64_t>(cls.id), 0x5eed);
        for (std::size_t i = 0; i < samples_per_class; ++i) {
            Sample s;
            s.image = ad::Tensor::matrix(render_config.patches(), render_config.patch_dim(), render(cls, render_config, rng));
            s.label = cls.id;
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

Dataset generate_corpus(std::size_t n_classes, std::size_t samples_per_class, const RenderConfig& render_config,
                        std::uint64_t seed) {
    if (n_classes < 4) throw std::invalid_argument("generate_corpus: need at least 4 classes");
    std::vector<int> pool;
    for (std::size_t id = 0; id < attribute_grid().size(); ++id) {
        if (in_pool(toy_class(static_cast<int>(id)), render_config.pool)) pool.push_back(static_cast<int>(id));
    }
    if (n_classes > pool.size()) {
        throw std::invalid_argument("generate_corpus: attribute grid has only " + std::to_string(pool.size()) + " " +
                                    pool_name(render_config.pool) + " classes, requested " + std::to_string(n_classes));
    }
    auto rng = stream(seed, 0xc1a55e5);
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(n_classes);
    return generate_corpus_for(pool, samples_per_class, render_config, seed);
}

namespace {

void fill_halves(const Dataset& ds, SplitSpec& split, std::uint64_t seed) {
    for (const auto& cls : ds.classes) {
        auto idx = ds.indices_of(cls.id);
        auto rng = stream(seed, static_cast<std::uint64_t>(cls.id), 0x4a1f);
        std::shuffle(idx.begin(), idx.end(), rng);
        const std::size_t half = idx.size() / 2;
        const bool base = std::find(split.base_classes.begin(), split.base_classes.end(), cls.id) != split.base_classes.end();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (i < half) {
                if (base) split.train_pool.push_back(idx[i]);
            } else {
                (base ? split.test_base : split.test_novel).push_back(idx[i]);
            }
        }
    }
    std::sort(split.train_pool.begin(), split.train_pool.end());
    std::sort(split.test_base.begin(), split.test_base.end());
    std::sort(split.test_novel.begin(), split.test_novel.end());
}

}  // namespace

SplitSpec split_base_novel(const Dataset& dataset, double base_fraction, std::uint64_t seed) {
    if (!(base_fraction > 0.0 && base_fraction < 1.0)) throw std::invalid_argument("split_base_novel: fraction must be in (0, 1)");
    auto ids = dataset.class_ids();
    const auto n_base = static_cast<std::size_t>(std::floor(base_fraction * static_cast<double>(ids.size()) + 1e-9));
    if (n_base == 0 || n_base == ids.size()) {
        throw std::invalid_argument("split_base_novel: fraction " + std::to_string(base_fraction) + " of " +
                                    std::to_string(ids.size()) + " classes leaves an empty side");
    }
    auto rng = stream(seed, 0xba5e);
    std::shuffle(ids.begin(), ids.end(), rng);
    SplitSpec split;
    split.seed = seed;
    split.base_classes.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_base));
    split.novel_classes.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_base), ids.end());
    std::sort(split.base_classes.begin(), split.base_classes.end());
    std::sort(split.novel_classes.begin(), split.novel_classes.end());
    fill_halves(dataset, split, seed);
    return split;
}

SplitSpec split_all_base(const Dataset& dataset, std::uint64_t seed) {
    SplitSpec split;
    split.seed = seed;
    split.base_classes = dataset.class_ids();
    fill_halves(dataset, split, seed);
    return split;
}

std::vector<std::size_t> sample_k_shot(const Dataset& dataset, const SplitSpec& split, std::size_t k, std::uint64_t seed) {
    if (k == 0) throw std::invalid_argument("sample_k_shot: k must be >= 1");
    std::vector<std::size_t> out;
    for (int c : split.base_classes) {
        std::vector<std::size_t> pool;
        for (auto i : split.train_pool) {
            if (dataset.samples[i].label == c) pool.push_back(i);
        }
        if (pool.size() < k) {
            throw std::invalid_argument("sample_k_shot: class " + std::to_string(c) + " (" + toy_class(c).name +
                                        ") has " + std::to_string(pool.size()) + " training samples, need " +
                                        std::to_string(k));
        }
        auto rng = stream(seed, static_cast<std::uint64_t>(c), 0x6b);
        std::shuffle(pool.begin(), pool.end(), rng);
        out.insert(out.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    }
    return out;
}

ShiftKind parse_shift_kind(const std::string& name) {
    if (name == "hue-rotation") return ShiftKind::hue_rotation;
    if (name == "noise-boost") return ShiftKind::noise_boost;
    if (name == "texture-swap") return ShiftKind::texture_swap;
    if (name == "blur") return ShiftKind::blur;
    throw std::invalid_argument("unknown shift kind '" + name + "' (hue-rotation|noise-boost|texture-swap|blur)");
}

const char* shift_kind_name(ShiftKind kind) {
    switch (kind) {
        case ShiftKind::hue_rotation: return "hue-rotation";
        case ShiftKind::noise_boost: return "noise-boost";
        case ShiftKind::texture_swap: return "texture-swap";
        case ShiftKind::blur: return "blur";
    }
    return "?";
}

Dataset domain_shift(const Dataset& dataset, ShiftKind kind, double magnitude, std::uint64_t seed) {
    if (!(magnitude >= 0.0)) throw std::invalid_argument("domain_shift: magnitude must be non-negative");
    const RenderConfig& r = dataset.render;
    const std::size_t side = r.grid_side * r.patch_side;
    std::ostringstream tag;
    tag << shift_kind_name(kind) << "@" << magnitude;

    // Hue rotation about the grey axis (Rodrigues).
    const double theta = magnitude * std::numbers::pi;
    const double cs = std::cos(theta), sn = std::sin(theta), k = 1.0 / std::sqrt(3.0);
    const double a = cs + (1 - cs) / 3.0, b = (1 - cs) / 3.0 - k * sn, c = (1 - cs) / 3.0 + k * sn;
    const double rot[3][3] = {{a, b, c}, {c, a, b}, {b, c, a}};

    auto rng = stream(seed, 0x5e1f7,static_cast<std::uint64_t>(kind));
    // One within-patch pixel permutation per dataset.
    std::vector<std::size_t> perm(r.patch_side * r.patch_side);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::normal_distribution<double> gauss(0.0, 1.0);

    Dataset out = dataset;
    for (auto& s : out.samples) {
        s.domain_tag = tag.str();
        if (magnitude == 0.0) continue;
        const auto src = s.image.values();
        std::vector<double> px(src.begin(), src.end());
        switch (kind) {
            case ShiftKind::hue_rotation:
                if (r.channels != 3) throw std::invalid_argument("domain_shift: hue rotation needs 3 channels");
                for (std::size_t p = 0; p < px.size(); p += 3) {
                    double v[3];
                    for (int ch = 0; ch < 3; ++ch) v[ch] = rot[ch][0] * src[p] + rot[ch][1] * src[p + 1] + rot[ch][2] * src[p + 2];
                    for (int ch = 0; ch < 3; ++ch) px[p + ch] = std::clamp(v[ch], 0.0, 1.0);
                }
                break;
            case ShiftKind::noise_boost:
                for (auto& v : px) v = std::clamp(v + magnitude * gauss(rng), 0.0, 1.0);
                break;
            case ShiftKind::texture_swap: {
                const double m = std::min(magnitude, 1.0);
                const std::size_t pd = r.patch_dim(), ch = r.channels;
                for (std::size_t patch = 0; patch < r.patches(); ++patch) {
                    for (std::size_t i = 0; i < perm.size(); ++i) {
                        for (std::size_t cc = 0; cc < ch; ++cc) {
                            const std::size_t dst = patch * pd + i * ch + cc;
                            const std::size_t from = patch * pd + perm[i] * ch + cc;
                            px[dst] = (1.0 - m) * src[dst] + m * src[from];
                        }
                    }
                }
                break;
            }
            case ShiftKind::blur: {
                const double m = std::min(magnitude, 1.0);
                for (std::size_t y = 0; y < side; ++y) {
                    for (std::size_t x = 0; x < side; ++x) {
                        for (std::size_t cc = 0; cc < r.channels; ++cc) {
                            double acc = 0.0;
                            int n = 0;
                            for (int dy = -1; dy <= 1; ++dy) {
                                for (int dx = -1; dx <= 1; ++dx) {
                                    const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
                                    if (yy < 0 || xx < 0 || yy >= static_cast<long>(side) || xx >= static_cast<long>(side)) continue;
                                    acc += src[pixel_offset(r, static_cast<std::size_t>(xx), static_cast<std::size_t>(yy), cc)];
                                    ++n;
                                }
                            }
                            const std::size_t o = pixel_offset(r, x, y, cc);
                            px[o] = (1.0 - m) * src[o] + m * acc / n;
                        }
                    }
                }
                break;
            }
        }
        s.image = ad::Tensor::matrix(r.patches(), r.patch_dim(), std::move(px));
    }
    return out;
}

std::uint64_t corpus_digest(std::size_t n_classes, std::size_t samples_per_class, const RenderConfig& render,
                            std::uint64_t seed) {
    std::ostringstream key;
    key << "corpus/v" << kCacheVersion << ";classes=" << n_classes << ";per_class=" << samples_per_class
        << ";seed=" << seed << ";" << render.canonical();
    return io::fnv1a(key.str());
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset, std::uint64_t digest) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_dataset: cannot write " + path.string());
    io::write_le<std::uint32_t>(out, kCacheMagic);
    io::write_le<std::uint32_t>(out, kCacheVersion);
    io::write_le<std::uint64_t>(out, dataset.seed);
    io::write_le<std::uint64_t>(out, digest);
    io::write_le<std::uint64_t>(out, dataset.samples_per_class);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.classes.size()));
    for (const auto& c : dataset.classes) io::write_le<std::int32_t>(out, c.id);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(dataset.samples.size()));
    for (const auto& s : dataset.samples) {
        io::write_le<std::int32_t>(out, s.label);
        io::write_string(out, s.domain_tag);
        for (double v : s.image.values()) io::write_le<double>(out, v);
    }
    if (!out) throw std::runtime_error("save_dataset: write failed for " + path.string());
}

Dataset load_or_generate(const std::filesystem::path& cache, std::size_t n_classes, std::size_t samples_per_class,
                         const RenderConfig& render, std::uint64_t seed) {
    const std::uint64_t digest = corpus_digest(n_classes, samples_per_class, render, seed);
    if (std::filesystem::exists(cache)) {
        try {
            std::ifstream in(cache, std::ios::binary);
            if (io::read_le<std::uint32_t>(in) == kCacheMagic && io::read_le<std::uint32_t>(in) == kCacheVersion &&
                io::read_le<std::uint64_t>(in) == seed && io::read_le<std::uint64_t>(in) == digest) {
                Dataset ds;
                ds.render = render;
                ds.seed = seed;
                ds.samples_per_class = io::read_le<std::uint64_t>(in);
                const auto n_cls = io::read_le<std::uint32_t>(in);
                for (std::uint32_t i = 0; i < n_cls; ++i) ds.classes.push_back(toy_class(io::read_le<std::int32_t>(in)));
                const auto n = io::read_le<std::uint32_t>(in);
                for (std::uint32_t i = 0; i < n; ++i) {
                    Sample s;
                    s.label = io::read_le<std::int32_t>(in);
                    s.domain_tag = io::read_string(in);
                    std::vector<double> px(render.patches() * render.patch_dim());
                    for (auto& v : px) v = io::read_le<double>(in);
                    s.image = ad::Tensor::matrix(render.patches(), render.patch_dim(), std::move(px));
                    ds.samples.push_back(std::move(s));
                }
                return ds;
            }
        } catch (const std::runtime_error&) {
            // Truncated or foreign file: fall through and regenerate.
        }
    }
    Dataset ds = generate_corpus(n_classes, samples_per_class, render, seed);
    save_dataset(cache, ds, digest);
    return ds;
}

void write_class_list(const std::filesystem::path& path, const std::vector<ToyClass>& classes) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_class_list: cannot write " + path.string());
    for (const auto& c : classes) out << c.id << '\t' << c.name << '\n';
}

}  // namespace disa::data
