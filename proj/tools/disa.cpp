// disa: command-line front end for pretraining, prompt training, evaluation,
// protocol runs, sweeps, gradient checking and saliency dumps.
//
// Exit status: 0 success, 1 runtime failure, 2 usage error.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "disa/checkpoint.hpp"
#include "disa/config.hpp"
#include "disa/data.hpp"
#include "disa/gradcheck.hpp"
#include "disa/harness.hpp"

namespace fs = std::filesystem;
using namespace disa;

namespace {

constexpr int kRuntimeError = 1;
constexpr int kUsageError = 2;

struct Common {
    std::string config_path;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
    std::size_t parallel = 1;
};

void log_line(const std::string& msg) {
    std::cerr << "[disa] " << msg << std::endl;
}

fs::path output_root(const Common& c) {
    if (!c.out.empty()) return c.out;
    if (const char* env = std::getenv("DISA_OUT"); env && *env) return env;
    return "disa-out";
}

// Defaults, then the config file, then --set overrides, then --seed.
config::Config load_config(const Common& c, const fs::path& out) {
    auto cfg = config::Config::defaults();
    if (!c.config_path.empty()) {
        if (!fs::exists(c.config_path)) throw config::UsageError("config file not found: " + c.config_path);
        cfg.merge_file(c.config_path);
    }
    for (const auto& o : c.overrides) cfg.apply_override(o);
    if (c.seed) cfg.set("run.seeds", std::to_string(*c.seed));
    if (cfg.get_string("pretrain.cache_dir").empty()) cfg.set("pretrain.cache_dir", (out / "cache").string());
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

struct Session {
    fs::path out;
    config::Config cfg;
    harness::ExperimentConfig exp;
};

Session open_session(const Common& c) {
    Session s;
    s.out = output_root(c);
    s.cfg = load_config(c, s.out);
    s.exp = harness::from_config(s.cfg);
    fs::create_directories(s.out);
    write_text(s.out / "resolved.cfg", s.exp.resolved);
    return s;
}

harness::Backbone backbone_for(const Session& s) { return harness::pretrain_backbone(s.exp, log_line); }

fs::path corpus_cache(const Session& s) { return s.exp.pretrain.cache_dir; }

void write_classes(const Session& s, const data::Dataset& ds) { data::write_class_list(s.out / "classes.tsv", ds.classes); }

void print_summary(const harness::EvalReport& report) {
    harness::write_summary_csv(std::cout, report.summary);
}

int cmd_pretrain(const Common& c) {
    const Session s = open_session(c);
    const auto bb = backbone_for(s);
    checkpoint::Blocks blocks;
    checkpoint::add_backbone(blocks, *bb.encoder);
    checkpoint::write(s.out / "backbone.disa", blocks);
    data::write_class_list(s.out / "classes.tsv", harness::pretrain_corpus(s.exp).classes);
    std::printf("zero_shot_acc=%.6f chance=%.6f steps=%zu cached=%s\n", bb.zero_shot_acc, bb.chance, bb.steps,
                bb.from_cache ? "yes" : "no");
    return 0;
}

std::uint64_t first_seed(const harness::ExperimentConfig& e) {
    if (e.seeds.empty()) throw config::UsageError("run.seeds is empty");
    return e.seeds.front();
}

harness::EvalReport single_report(const Session& s, const harness::Backbone& bb, const harness::ReportRow& row) {
    harness::EvalReport r;
    r.protocol = row.protocol;
    r.rows = {row};
    r.summary = harness::summarize(r.rows);
    r.config_digest = s.exp.digest;
    r.backbone = bb;
    r.resolved_config = s.exp.resolved;
    return r;
}

int cmd_train(const Common& c, const std::string& dump_path) {
    Session s = open_session(c);
    s.exp.protocol = harness::Protocol::base_to_novel;
    const auto bb = backbone_for(s);
    const auto ds = harness::source_corpus(s.exp, corpus_cache(s));
    write_classes(s, ds);
    const std::uint64_t seed = first_seed(s.exp);
    const auto st = harness::settings_for(s.exp, harness::Protocol::base_to_novel);

    std::ofstream dump;
    if (!dump_path.empty()) {
        dump.open(dump_path, std::ios::binary);
        if (!dump) throw std::runtime_error("cannot write " + dump_path);
    }
    log_line("train: seed " + std::to_string(seed) + " " + st.switches.label());
    const auto run = harness::run_base_to_novel(s.exp, *bb.encoder, ds, seed, st, dump_path.empty() ? nullptr : &dump);

    checkpoint::Blocks blocks;
    checkpoint::add_prompts(blocks, run.train.prompts);
    checkpoint::add_prototypes(blocks, run.prototypes);
    blocks["run.seed"] = ad::Tensor::vector({static_cast<double>(seed)});
    checkpoint::write(s.out / "prompts.disa", blocks);
    harness::write_report_files(s.out, single_report(s, bb, run.row));
    std::printf("seed=%llu base_acc=%.6f novel_acc=%.6f hm=%.6f\n", static_cast<unsigned long long>(seed),
                run.row.base_acc, *run.row.novel_acc, *run.row.hm);
    return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint_path) {
    Session s = open_session(c);
    const fs::path ckpt = checkpoint_path.empty() ? s.out / "prompts.disa" : fs::path(checkpoint_path);
    if (!fs::exists(ckpt)) throw std::runtime_error("checkpoint not found: " + ckpt.string());
    const auto blocks = checkpoint::read(ckpt);
    if (!checkpoint::has_prompts(blocks)) throw std::runtime_error(ckpt.string() + " holds no prompts");
    const auto prompts = checkpoint::restore_prompts(blocks);

    std::uint64_t seed = first_seed(s.exp);
    if (!c.seed) {
        if (auto it = blocks.find("run.seed"); it != blocks.end()) seed = static_cast<std::uint64_t>(it->second.item());
    }
    const auto bb = backbone_for(s);
    const auto ds = harness::source_corpus(s.exp, corpus_cache(s));
    write_classes(s, ds);
    const auto split = data::split_base_novel(ds, s.exp.data.base_fraction, harness::RunStreams::from_seed(seed).split);
    const double base = 100.0 * harness::evaluate(*bb.encoder, &prompts, ds, split.test_base, split.base_classes);
    const double novel = 100.0 * harness::evaluate(*bb.encoder, &prompts, ds, split.test_novel, split.novel_classes);
    const double zs_base = 100.0 * harness::evaluate(*bb.encoder, nullptr, ds, split.test_base, split.base_classes);
    const double zs_novel = 100.0 * harness::evaluate(*bb.encoder, nullptr, ds, split.test_novel, split.novel_classes);

    std::ofstream f(s.out / "eval.csv", std::ios::binary);
    f << "model,seed,base_acc,novel_acc,hm\n";
    char line[160];
    std::snprintf(line, sizeof line, "prompted,%llu,%.6f,%.6f,%.6f\n", static_cast<unsigned long long>(seed), base,
                  novel, harness::harmonic_mean(base, novel));
    f << line;
    std::cout << line;
    std::snprintf(line, sizeof line, "zero-shot,%llu,%.6f,%.6f,%.6f\n", static_cast<unsigned long long>(seed), zs_base,
                  zs_novel, harness::harmonic_mean(zs_base, zs_novel));
    f << line;
    std::cout << line;
    return 0;
}

int run_and_report(Session& s, harness::Protocol protocol, const fs::path& dir, std::size_t parallel) {
    s.exp.protocol = protocol;
    const auto bb = backbone_for(s);
    harness::ProtocolOptions opt;
    opt.parallel = parallel;
    opt.log = log_line;
    opt.corpus_cache_dir = corpus_cache(s);
    const auto ds = harness::source_corpus(s.exp, corpus_cache(s));
    write_classes(s, ds);
    log_line(std::string("protocol ") + harness::protocol_name(protocol) + " over " +
             std::to_string(s.exp.seeds.size()) + " seed(s)");
    const auto report = harness::run_protocol(s.exp, bb, opt);
    harness::write_report_files(dir, report);
    print_summary(report);
    log_line("reports written to " + dir.string());
    return 0;
}

int cmd_protocol(const Common& c, const std::string& protocol) {
    Session s = open_session(c);
    const auto p = protocol.empty() ? s.exp.protocol : harness::parse_protocol(protocol);
    return run_and_report(s, p, s.out, c.parallel);
}

int cmd_sweep(const Common& c, const std::string& kind) {
    Session s = open_session(c);
    if (kind == "lambda" || kind == "both") run_and_report(s, harness::Protocol::lambda_sweep, s.out / "lambda-sweep", c.parallel);
    if (kind == "depth" || kind == "both") run_and_report(s, harness::Protocol::depth_sweep, s.out / "depth-sweep", c.parallel);
    return 0;
}

int cmd_gradcheck(std::size_t cases, std::uint64_t seed, const std::string& filter) {
    gradcheck::Options o;
    o.cases = cases;
    o.encoder_cases = cases;
    o.seed = seed;
    o.filter = filter;
    const auto checks = gradcheck::run(o);
    if (checks.empty()) throw config::UsageError("no gradient check matches '" + filter + "'");
    gradcheck::write_table(std::cout, checks);
    const bool ok = gradcheck::all_passed(checks);
    std::printf("%s: tolerance %.0e, step %.0e\n", ok ? "all checks passed" : "gradient check FAILED",
                gradcheck::kTolerance, gradcheck::kStep);
    return ok ? 0 : kRuntimeError;
}

void add_common(CLI::App* app, Common& c, bool parallel) {
    app->add_option("--config", c.config_path, "Sectioned key=value config file");
    app->add_option("--out", c.out, "Output directory (default: $DISA_OUT or ./disa-out)");
    app->add_option("--seed", c.seed, "Run with this single seed");
    app->add_option("--set", c.overrides, "Override a config key, KEY=VALUE (repeatable)")->allow_extra_args(false);
    if (parallel) app->add_option("--parallel", c.parallel, "Concurrent runs")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prompt learning with directional saliency-aware regularization on a toy dual encoder"};
    app.require_subcommand(1);
    Common common;

    auto* pretrain = app.add_subcommand("pretrain", "Pretrain (or load) the frozen toy backbone");
    add_common(pretrain, common, false);

    auto* train = app.add_subcommand("train", "Train prompts for one base-to-novel run and save them");
    add_common(train, common, false);

    std::string checkpoint_path;
    auto* eval = app.add_subcommand("eval", "Evaluate saved prompts against the zero-shot backbone");
    add_common(eval, common, false);
    eval->add_option("--checkpoint", checkpoint_path, "Prompt checkpoint (default: <out>/prompts.disa)");

    std::string protocol_name;
    auto* protocol = app.add_subcommand("protocol", "Run an evaluation protocol over all seeds");
    add_common(protocol, common, true);
    protocol->add_option("--protocol", protocol_name, "Protocol (default: run.protocol)");

    auto* ablate = app.add_subcommand("ablate", "Run the six-row loss component ablation");
    add_common(ablate, common, true);

    std::string sweep_kind = "both";
    auto* sweep = app.add_subcommand("sweep", "Run the lambda and/or prompt-depth sweeps");
    add_common(sweep, common, true);
    sweep->add_option("--kind", sweep_kind, "lambda, depth or both")->check(CLI::IsMember({"lambda", "depth", "both"}));

    std::size_t gc_cases = 100;
    std::uint64_t gc_seed = 1;
    std::string gc_filter;
    auto* grad = app.add_subcommand("gradcheck", "Compare backward against central finite differences");
    grad->add_option("--cases", gc_cases, "Random cases per check")->check(CLI::PositiveNumber);
    grad->add_option("--seed", gc_seed, "Case generator seed");
    grad->add_option("--filter", gc_filter, "Only checks whose name contains this text");

    std::string dump_path;
    auto* dump = app.add_subcommand("dump-saliency", "Train one run and write per-step saliency and masks as CSV");
    add_common(dump, common, false);
    dump->add_option("--file", dump_path, "Output CSV (default: <out>/saliency.csv)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kUsageError;
    }

    try {
        if (*pretrain) return cmd_pretrain(common);
        if (*train) return cmd_train(common, "");
        if (*eval) return cmd_eval(common, checkpoint_path);
        if (*protocol) return cmd_protocol(common, protocol_name);
        if (*ablate) {
            Session s = open_session(common);
            return run_and_report(s, harness::Protocol::ablation, s.out, common.parallel);
        }
        if (*sweep) return cmd_sweep(common, sweep_kind);
        if (*grad) return cmd_gradcheck(gc_cases, gc_seed, gc_filter);
        if (*dump) {
            const fs::path path = dump_path.empty() ? output_root(common) / "saliency.csv" : fs::path(dump_path);
            fs::create_directories(output_root(common));
            return cmd_train(common, path.string());
        }
    } catch (const config::UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsageError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
    return kUsageError;
}
