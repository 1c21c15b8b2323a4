#include "disa/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "disa/binary_io.hpp"

namespace disa::config {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

bool parse_bool(const std::string& s, bool& out) {
    if (s == "true" || s == "1" || s == "on" || s == "yes") return out = true, true;
    if (s == "false" || s == "0" || s == "off" || s == "no") return out = false, true;
    return false;
}

bool parse_int(const std::string& s, std::int64_t& out) {
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size() && !s.empty();
}

bool parse_real(const std::string& s, double& out) {
    if (s.empty()) return false;
    try {
        std::size_t used = 0;
        out = std::stod(s, &used);
        return used == s.size();
    } catch (const std::exception&) {
        return false;
    }
}

bool valid(const std::string& value, ValueType type) {
    bool b;
    std::int64_t i;
    double r;
    switch (type) {
        case ValueType::boolean: return parse_bool(value, b);
        case ValueType::integer: return parse_int(value, i);
        case ValueType::real: return parse_real(value, r);
        case ValueType::text: return true;
        case ValueType::integer_list:
        case ValueType::real_list: {
            const auto items = split_list(value);
            if (items.empty()) return false;
            for (const auto& it : items) {
                if (type == ValueType::integer_list ? !parse_int(it, i) : !parse_real(it, r)) return false;
            }
            return true;
        }
    }
    return false;
}

const char* type_name(ValueType t) {
    switch (t) {
        case ValueType::boolean: return "boolean";
        case ValueType::integer: return "integer";
        case ValueType::real: return "real";
        case ValueType::text: return "text";
        case ValueType::integer_list: return "integer list";
        case ValueType::real_list: return "real list";
    }
    return "?";
}

}  // namespace

void Config::declare(std::string key, std::string value, ValueType type, std::string help) {
    index_[key] = entries_.size();
    entries_.push_back(Entry{std::move(key), std::move(value), type, std::move(help)});
}

Config Config::defaults() {
    using enum ValueType;
    Config c;
    c.declare("run.protocol", "base-to-novel", text,
              "base-to-novel|cross-dataset|domain-generalization|few-shot|ablation|lambda-sweep|depth-sweep");
    c.declare("run.seeds", "1,2,3", integer_list, "one training run per seed");

    c.declare("data.seed", "2024", integer, "corpus generation seed");
    c.declare("data.classes", "20", integer, "downstream classes in the source corpus");
    c.declare("data.samples_per_class", "40", integer, "half train pool, half test");
    c.declare("data.base_fraction", "0.6", real, "share of classes that are base classes");
    c.declare("data.k_shot", "16", integer, "training samples per base class");
    c.declare("data.few_shot_k", "1,2,4,8,16", integer_list, "K grid of the few-shot protocol");
    c.declare("data.background", "0.15", real, "");
    c.declare("data.pixel_noise", "0.15", real, "");
    c.declare("data.position_jitter", "2.5", real, "");
    c.declare("data.scale_jitter", "0.25", real, "");
    c.declare("data.color_jitter", "0.12", real, "");
    c.declare("data.radius", "5", real, "");
    c.declare("data.cross_targets", "2", integer, "target corpora of the cross-dataset protocol");
    c.declare("data.shifts", "hue-rotation,noise-boost,texture-swap,blur", text, "domain-generalization targets");
    c.declare("data.shift_magnitude", "0.25", real, "");

    c.declare("encoder.width", "32", integer, "token width and joint dimension");
    c.declare("encoder.layers", "4", integer, "");
    c.declare("encoder.heads", "4", integer, "");
    c.declare("encoder.mlp_ratio", "2", integer, "");
    c.declare("encoder.init_std", "0.02", real, "");
    c.declare("encoder.seed", "7", integer, "backbone initialisation seed");

    c.declare("prompt.visual_tokens", "4", integer, "");
    c.declare("prompt.text_tokens", "4", integer, "");
    c.declare("prompt.depth", "0", integer, "prompted layers; 0 picks the protocol default");

    c.declare("optim.lr", "0.0025", real, "");
    c.declare("optim.momentum", "0.9", real, "");
    c.declare("optim.epochs", "20", integer, "");
    c.declare("optim.few_shot_epochs", "50", integer, "");
    c.declare("optim.batch", "4", integer, "");

    c.declare("loss.cir", "true", boolean, "");
    c.declare("loss.masking", "true", boolean, "saliency masking of the CIR image input");
    c.declare("loss.sr", "true", boolean, "");
    c.declare("loss.dir", "true", boolean, "");
    c.declare("loss.dir_variant", "direction", text, "direction|norm|mse");
    c.declare("loss.dir_target", "prototype", text, "prototype|sample");
    c.declare("loss.lambda", "12", real, "");
    c.declare("loss.gamma", "0.5", real, "candidate fraction of lowest-saliency patches");
    c.declare("loss.mask_fraction", "0.5", real, "fraction of candidates masked");
    c.declare("loss.tau", "0.07", real, "");

    c.declare("pretrain.seed", "11", integer, "");
    c.declare("pretrain.samples_per_class", "24", integer, "");
    c.declare("pretrain.steps", "1000", integer, "");
    c.declare("pretrain.batch", "16", integer, "distinct classes per step");
    c.declare("pretrain.lr", "0.0005", real, "Adam step size");
    c.declare("pretrain.tau", "0.07", real, "");
    c.declare("pretrain.background", "0.15", real, "render regime of the pretraining corpus");
    c.declare("pretrain.pixel_noise", "0.05", real, "");
    c.declare("pretrain.position_jitter", "1.5", real, "");
    c.declare("pretrain.scale_jitter", "0.15", real, "");
    c.declare("pretrain.color_jitter", "0.05", real, "");
    c.declare("pretrain.floor", "0.4", real, "required held-out zero-shot accuracy");
    c.declare("pretrain.cache_dir", "", text, "backbone cache; empty uses <out>/cache");

    c.declare("sweep.lambdas", "0,1,4,8,12,16", real_list, "");
    c.declare("sweep.depths", "1,3,6,9,12", integer_list, "depths of a 12-layer reference, scaled to encoder.layers");
    c.declare("sweep.reference_layers", "12", integer, "");
    return c;
}

const Entry& Config::entry(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) throw UsageError("unknown config key '" + key + "'");
    return entries_[it->second];
}

void Config::set(const std::string& key, const std::string& value) {
    auto it = index_.find(key);
    if (it == index_.end()) throw UsageError("unknown config key '" + key + "'");
    Entry& e = entries_[it->second];
    const std::string v = trim(value);
    if (!valid(v, e.type)) {
        throw UsageError("config key '" + key + "' expects " + type_name(e.type) + ", got '" + v + "'");
    }
    e.value = v;
}

void Config::apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw UsageError("override '" + assignment + "' is not KEY=VALUE");
    set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void Config::merge_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = origin + ":" + std::to_string(lineno);
        if (line.front() == '[') {
            if (line.back() != ']') throw UsageError(where + ": unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw UsageError(where + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        if (key.find('.') == std::string::npos) {
            if (section.empty()) throw UsageError(where + ": key '" + key + "' outside any section");
            key = section + "." + key;
        }
        try {
            set(key, line.substr(eq + 1));
        } catch (const UsageError& e) {
            throw UsageError(where + ": " + e.what());
        }
    }
}

void Config::merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config file " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    merge_text(text.str(), path.string());
}

const std::string& Config::raw(const std::string& key) const { return entry(key).value; }

bool Config::get_bool(const std::string& key) const {
    bool b = false;
    parse_bool(raw(key), b);
    return b;
}

std::int64_t Config::get_int(const std::string& key) const {
    std::int64_t i = 0;
    parse_int(raw(key), i);
    return i;
}

std::uint64_t Config::get_uint(const std::string& key) const {
    const auto i = get_int(key);
    if (i < 0) throw UsageError("config key '" + key + "' must be non-negative");
    return static_cast<std::uint64_t>(i);
}

double Config::get_real(const std::string& key) const {
    double r = 0;
    parse_real(raw(key), r);
    return r;
}

std::vector<std::int64_t> Config::get_int_list(const std::string& key) const {
    std::vector<std::int64_t> out;
    for (const auto& it : split_list(raw(key))) {
        std::int64_t i = 0;
        parse_int(it, i);
        out.push_back(i);
    }
    return out;
}

std::vector<double> Config::get_real_list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& it : split_list(raw(key))) {
        double r = 0;
        parse_real(it, r);
        out.push_back(r);
    }
    return out;
}

std::string Config::snapshot() const {
    std::ostringstream out;
    std::string section;
    for (const auto& e : entries_) {
        const auto dot = e.key.find('.');
        const std::string s = e.key.substr(0, dot);
        if (s != section) {
            if (!section.empty()) out << '\n';
            out << '[' << s << "]\n";
            section = s;
        }
        out << e.key.substr(dot + 1) << " = " << e.value << '\n';
    }
    return out.str();
}

std::uint64_t Config::digest() const { return io::fnv1a(snapshot()); }

}  // namespace disa::config
