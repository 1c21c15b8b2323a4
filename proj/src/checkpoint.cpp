#include "disa/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "disa/binary_io.hpp"

namespace disa::checkpoint {

namespace {

constexpr char kMagic[4] = {'D', 'I', 'S', 'A'};
const std::string kBackbone = "backbone/";
const std::string kVisual = "prompts/visual.";
const std::string kTextual = "prompts/textual.";

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

std::string serialize(const Blocks& blocks) {
    std::ostringstream out(std::ios::binary);
    out.write(kMagic, 4);
    io::write_le<std::uint32_t>(out, kFormatVersion);
    for (const auto& [name, t] : blocks) {
        io::write_string(out, name);
        io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) io::write_le<std::uint64_t>(out, d);
        for (double v : t.values()) io::write_le<double>(out, v);
    }
    return out.str();
}

ad::Tensor index_block(const std::vector<double>& values) { return ad::Tensor::vector(values); }

}  // namespace

void add_backbone(Blocks& blocks, const encoders::DualEncoder& encoder) {
    for (const auto& [name, t] : encoder.named_parameters()) blocks[kBackbone + name] = t->detach();
}

void add_prompts(Blocks& blocks, const encoders::PromptBank& prompts) {
    for (std::size_t l = 0; l < prompts.visual.size(); ++l) {
        blocks[kVisual + std::to_string(l)] = prompts.visual[l].detach();
        blocks[kTextual + std::to_string(l)] = prompts.textual[l].detach();
    }
}

void add_prototypes(Blocks& blocks, const regularizers::PrototypeTable& table) {
    const auto ids = table.class_ids();
    if (ids.empty()) throw std::invalid_argument("checkpoint: empty prototype table");
    std::vector<double> rows, id_values, counts;
    for (int id : ids) {
        const auto& m = table.mean(id);
        rows.insert(rows.end(), m.begin(), m.end());
        id_values.push_back(id);
        counts.push_back(static_cast<double>(table.count(id)));
    }
    blocks["prototypes"] = ad::Tensor::matrix(ids.size(), table.width(), rows);
    blocks["prototypes.class_ids"] = index_block(id_values);
    blocks["prototypes.counts"] = index_block(counts);
}

void write(const std::filesystem::path& path, const Blocks& blocks) {
    const std::string bytes = serialize(blocks);
    if (std::filesystem::exists(path)) {
        std::ifstream in(path, std::ios::binary);
        std::ostringstream existing;
        existing << in.rdbuf();
        if (existing.str() == bytes) return;
        throw std::runtime_error("checkpoint: refusing to overwrite " + path.string() + " with different content");
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Blocks read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::string(magic, 4) != std::string(kMagic, 4)) {
        throw std::runtime_error("checkpoint: " + path.string() + " is not a DISA file");
    }
    const auto version = io::read_le<std::uint32_t>(in);
    if (version != kFormatVersion) {
        throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
    }
    Blocks blocks;
    while (in.peek() != std::char_traits<char>::eof()) {
        const std::string name = io::read_string(in);
        const auto rank = io::read_le<std::uint32_t>(in);
        if (rank > 8) throw std::runtime_error("checkpoint: implausible rank for block " + name);
        ad::Shape shape(rank);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = io::read_le<std::uint64_t>(in);
            if (d == 0 || d > (1u << 24)) throw std::runtime_error("checkpoint: bad dimension in block " + name);
            n *= d;
        }
        std::vector<double> values(n);
        for (auto& v : values) v = io::read_le<double>(in);
        blocks[name] = ad::Tensor::from(std::move(shape), std::move(values));
    }
    return blocks;
}

bool has_backbone(const Blocks& blocks) {
    auto it = blocks.lower_bound(kBackbone);
    return it != blocks.end() && starts_with(it->first, kBackbone);
}

bool has_prompts(const Blocks& blocks) { return blocks.contains(kVisual + "0"); }

bool has_prototypes(const Blocks& blocks) { return blocks.contains("prototypes"); }

void restore_backbone(const Blocks& blocks, encoders::DualEncoder& encoder) {
    std::vector<std::string> names;
    for (const auto& [name, t] : encoder.named_parameters()) names.push_back(name);
    for (const auto& name : names) {
        auto it = blocks.find(kBackbone + name);
        if (it == blocks.end()) throw std::runtime_error("checkpoint: missing backbone block " + name);
        encoder.set_parameter(name, it->second);
    }
}

encoders::PromptBank restore_prompts(const Blocks& blocks) {
    encoders::PromptBank bank;
    for (std::size_t l = 0;; ++l) {
        auto v = blocks.find(kVisual + std::to_string(l));
        auto t = blocks.find(kTextual + std::to_string(l));
        if (v == blocks.end() && t == blocks.end()) break;
        if (v == blocks.end() || t == blocks.end()) {
            throw std::runtime_error("checkpoint: unpaired prompt layer " + std::to_string(l));
        }
        bank.visual.push_back(v->second.detach(true));
        bank.textual.push_back(t->second.detach(true));
    }
    if (bank.visual.empty()) throw std::runtime_error("checkpoint: no prompt blocks");
    bank.config.visual_tokens = bank.visual.front().rows();
    bank.config.text_tokens = bank.textual.front().rows();
    bank.config.depth = bank.visual.size();
    return bank;
}

regularizers::PrototypeTable restore_prototypes(const Blocks& blocks) {
    auto m = blocks.find("prototypes");
    auto ids = blocks.find("prototypes.class_ids");
    auto counts = blocks.find("prototypes.counts");
    if (m == blocks.end() || ids == blocks.end() || counts == blocks.end()) {
        throw std::runtime_error("checkpoint: incomplete prototype blocks");
    }
    const auto& table = m->second;
    if (table.rank() != 2 || ids->second.size() != table.rows() || counts->second.size() != table.rows()) {
        throw std::runtime_error("checkpoint: prototype index does not match table " + ad::shape_string(table.shape()));
    }
    std::map<int, std::vector<double>> means;
    std::map<int, std::size_t> n;
    const auto v = table.values();
    for (std::size_t r = 0; r < table.rows(); ++r) {
        const int id = static_cast<int>(ids->second.values()[r]);
        means[id].assign(v.begin() + static_cast<std::ptrdiff_t>(r * table.cols()),
                         v.begin() + static_cast<std::ptrdiff_t>((r + 1) * table.cols()));
        n[id] = static_cast<std::size_t>(counts->second.values()[r]);
    }
    return regularizers::PrototypeTable(std::move(means), std::move(n));
}

}  // namespace disa::checkpoint
