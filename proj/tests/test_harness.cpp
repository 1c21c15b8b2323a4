#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unistd.h>

#include "disa/checkpoint.hpp"
#include "disa/config.hpp"
#include "disa/harness.hpp"
#include "disa/ops.hpp"
#include "json.hpp"

using namespace disa;
using namespace disa::harness;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag)
        : path(fs::temp_directory_path() / ("disa-harness-" + tag + "-" + std::to_string(::getpid()))) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::vector<std::string> split(const std::string& line, char sep = ',') {
    std::vector<std::string> out;
    std::stringstream in(line);
    std::string f;
    while (std::getline(in, f, sep)) out.push_back(f);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

ReportRow row(std::uint64_t seed, double base, double novel, std::size_t condition = 0) {
    ReportRow r;
    r.protocol = "base-to-novel";
    r.dataset = "source";
    r.seed = seed;
    r.k_shot = 16;
    r.lambda = 12;
    r.depth = 3;
    r.switches = "ce+cir+mask+sr+dir(prototype)";
    r.base_acc = base;
    r.novel_acc = novel;
    r.hm = harmonic_mean(base, novel);
    r.condition = condition;
    return r;
}

encoders::DualEncoder frozen_backbone() {
    auto enc = make_encoder(encoders::EncoderConfig{}, 7);
    enc.freeze();
    return enc;
}

}  // namespace

TEST_CASE("harmonic mean") {
    CHECK(std::abs(harmonic_mean(82.69, 80.53) - 81.60) <= 0.01);
    CHECK(std::abs(harmonic_mean(94.10, 82.69) - 88.03) <= 0.01);
    CHECK(harmonic_mean(50, 50) == 50);
    CHECK(harmonic_mean(0, 90) == 0);
    CHECK(harmonic_mean(70, 90) == doctest::Approx(2 * 70.0 * 90 / 160));
}

TEST_CASE("config: defaults, files, overrides and errors") {
    auto c = config::Config::defaults();
    const ExperimentConfig d = from_config(c);
    CHECK(d.protocol == Protocol::base_to_novel);
    CHECK(d.lambda == 12.0);
    CHECK(d.tau == 0.07);
    CHECK(d.gamma == 0.5);
    CHECK(d.seeds == std::vector<std::uint64_t>{1, 2, 3});
    CHECK(d.encoder.width == 32);
    CHECK(d.data.k_shot == 16);

    c.merge_text("[loss]\nlambda = 4   # trailing comment\n\n[run]\nprotocol = ablation\nseeds = 5, 6\n");
    c.apply_override("optim.epochs=3");
    const ExperimentConfig e = from_config(c);
    CHECK(e.lambda == 4.0);
    CHECK(e.protocol == Protocol::ablation);
    CHECK(e.seeds == std::vector<std::uint64_t>{5, 6});
    CHECK(e.optim.epochs == 3);

    auto again = config::Config::defaults();
    again.merge_text(c.snapshot());
    CHECK(again.digest() == c.digest());
    CHECK(again.snapshot() == c.snapshot());
    CHECK(c.digest() != config::Config::defaults().digest());

    CHECK_THROWS_AS(c.apply_override("loss.lambada=3"), config::UsageError);
    CHECK_THROWS_AS(c.apply_override("loss.lambda=heavy"), config::UsageError);
    CHECK_THROWS_AS(c.apply_override("loss.lambda"), config::UsageError);
    CHECK_THROWS_AS(c.merge_text("lambda = 3\n"), config::UsageError);
    CHECK_THROWS_AS(c.merge_text("[loss\n"), config::UsageError);
    CHECK_THROWS_AS(c.merge_file("/nonexistent/disa.cfg"), config::UsageError);

    auto bad = config::Config::defaults();
    bad.set("run.protocol", "zero-shot");
    CHECK_THROWS_AS(from_config(bad), config::UsageError);
    bad = config::Config::defaults();
    bad.set("prompt.depth", "9");
    CHECK_THROWS_AS(from_config(bad), config::UsageError);
    bad = config::Config::defaults();
    bad.set("loss.lambda", "-1");
    CHECK_THROWS_AS(from_config(bad), config::UsageError);
}

TEST_CASE("protocol names round trip") {
    for (auto p : {Protocol::base_to_novel, Protocol::cross_dataset, Protocol::domain_generalization, Protocol::few_shot,
                   Protocol::ablation, Protocol::lambda_sweep, Protocol::depth_sweep})
        CHECK(parse_protocol(protocol_name(p)) == p);
    CHECK(parse_dir_target("sample") == DirTarget::sample);
    CHECK_THROWS_AS(parse_dir_target("mean"), config::UsageError);
}

TEST_CASE("prompt depth defaults and reference-grid scaling") {
    CHECK(default_depth(Protocol::base_to_novel, 12) == 9);
    CHECK(default_depth(Protocol::cross_dataset, 12) == 3);
    CHECK(default_depth(Protocol::base_to_novel, 4) == 4);
    CHECK(default_depth(Protocol::domain_generalization, 4) == 3);
    const std::vector<std::size_t> grid{1, 3, 6, 9, 12}, expect{1, 1, 2, 3, 4};
    for (std::size_t i = 0; i < grid.size(); ++i) CHECK(scaled_depth(grid[i], 12, 4) == expect[i]);
    for (std::size_t d = 1; d <= 12; ++d) CHECK(scaled_depth(d, 12, 12) == d);
}

TEST_CASE("ablation rows build up the loss stack in order") {
    const auto rows = ablation_rows();
    REQUIRE(rows.size() == 6);
    const std::vector<std::string> labels{"ce", "ce+cir", "ce+cir+mask", "ce+cir+mask+sr", "ce+cir+mask+sr+dir(sample)",
                                          "ce+cir+mask+sr+dir(prototype)"};
    for (std::size_t i = 0; i < rows.size(); ++i) CHECK(rows[i].label() == labels[i]);
    LossSwitches s;
    s.dir_variant = regularizers::AlignmentVariant::norm;
    CHECK(s.label() == "ce+cir+mask+sr+dir[norm](prototype)");
}

TEST_CASE("summary uses the sample standard deviation per condition") {
    const std::vector<ReportRow> rows{row(1, 80, 70), row(2, 84, 72), row(3, 82, 77), row(1, 60, 60, 1)};
    const auto s = summarize(rows);
    REQUIRE(s.size() == 2);
    CHECK(s[0].seeds == 3);
    CHECK(s[0].base_mean == doctest::Approx(82.0));
    CHECK(s[0].base_std == doctest::Approx(2.0));  // sqrt(((-2)^2 + 2^2 + 0) / 2)
    CHECK(*s[0].novel_mean == doctest::Approx(73.0));
    CHECK(*s[0].novel_std == doctest::Approx(std::sqrt((9.0 + 1.0 + 16.0) / 2.0)));
    const double hm_mean = (harmonic_mean(80, 70) + harmonic_mean(84, 72) + harmonic_mean(82, 77)) / 3.0;
    CHECK(*s[0].hm_mean == doctest::Approx(hm_mean));
    CHECK(s[1].seeds == 1);
    CHECK(s[1].base_std == 0.0);
}

TEST_CASE("CSV schema and recomputability") {
    std::vector<ReportRow> rows{row(1, 82.69, 80.53), row(2, 94.10, 82.69)};
    ReportRow few = row(3, 75, 0);
    few.protocol = "few-shot";
    few.novel_acc.reset();
    few.hm.reset();
    rows.push_back(few);
    std::ostringstream out;
    write_csv(out, rows);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == kCsvHeader);
    const auto header = split(line);
    std::size_t n = 0;
    while (std::getline(in, line)) {
        const auto f = split(line);
        REQUIRE(f.size() == header.size());
        if (!f[8].empty()) {
            const double hm = harmonic_mean(std::stod(f[7]), std::stod(f[8]));
            CHECK(std::abs(hm - std::stod(f[9])) <= 1e-5);
        } else {
            CHECK(f[9].empty());
        }
        ++n;
    }
    CHECK(n == rows.size());

    std::ostringstream sum;
    write_summary_csv(sum, summarize(rows));
    std::istringstream sin(sum.str());
    std::getline(sin, line);
    const auto sh = split(line);
    while (std::getline(sin, line)) CHECK(split(line).size() == sh.size());
}

TEST_CASE("report files and JSON") {
    TempDir dir("report");
    EvalReport rep;
    rep.protocol = "base-to-novel";
    rep.rows = {row(1, 80, 70), row(2, 84, 72)};
    rep.rows[0].trace = {{0.9, 0.1, 0.2, 0.05, 1.8}, {0.7, 0.1, 0.2, 0.05, 1.6}};
    rep.summary = summarize(rep.rows);
    write_report_files(dir.path, rep);
    for (const char* f : {"report.csv", "summary.csv", "report.json"}) CHECK(fs::exists(dir.path / f));
    const auto j = nlohmann::json::parse(to_json(rep));
    CHECK(j["protocol"] == "base-to-novel");
    CHECK(j["rows"].size() == 2);
    CHECK(j["rows"][0]["epoch_trace"].size() == 2);
    CHECK(j["summary"].size() == 1);
}

TEST_CASE("checkpoint round trip and overwrite protection") {
    TempDir dir("ckpt");
    auto raw = make_encoder(encoders::EncoderConfig{}, 21);
    std::mt19937_64 rng(1);
    const auto bank = raw.make_prompts({4, 4, 3}, rng);
    const regularizers::PrototypeTable table({{3, {0.5, -1.0}}, {8, {2.0, 0.25}}}, {{3, 2}, {8, 5}});

    checkpoint::Blocks blocks;
    checkpoint::add_backbone(blocks, raw);
    checkpoint::add_prompts(blocks, bank);
    checkpoint::add_prototypes(blocks, table);
    const fs::path file = dir.path / "all.disa";
    checkpoint::write(file, blocks);

    const auto back = checkpoint::read(file);
    CHECK(checkpoint::has_backbone(back));
    CHECK(checkpoint::has_prompts(back));
    CHECK(checkpoint::has_prototypes(back));

    auto restored = make_encoder(encoders::EncoderConfig{}, 99);
    checkpoint::restore_backbone(back, restored);
    raw.freeze();
    restored.freeze();
    CHECK(restored.checksum() == raw.checksum());

    const auto p = checkpoint::restore_prompts(back);
    REQUIRE(p.visual.size() == bank.visual.size());
    REQUIRE(p.textual.size() == bank.textual.size());
    for (std::size_t i = 0; i < p.visual.size(); ++i) {
        CHECK(std::ranges::equal(p.visual[i].values(), bank.visual[i].values()));
        CHECK(std::ranges::equal(p.textual[i].values(), bank.textual[i].values()));
    }
    CHECK(p.config.depth == 3);
    CHECK(checkpoint::restore_prototypes(back) == table);

    CHECK_NOTHROW(checkpoint::write(file, blocks));  // identical bytes
    checkpoint::Blocks other;
    checkpoint::add_prototypes(other, table);
    CHECK_THROWS_AS(checkpoint::write(file, other), std::runtime_error);

    std::ofstream(dir.path / "junk.disa") << "not a checkpoint";
    CHECK_THROWS_AS(checkpoint::read(dir.path / "junk.disa"), std::runtime_error);
}

TEST_CASE("evaluate agrees with a brute-force argmax and has exact edge cases") {
    const auto enc = frozen_backbone();
    const auto ds = data::generate_corpus(6, 6, data::RenderConfig{}, 3);
    std::vector<std::size_t> all(ds.samples.size());
    std::iota(all.begin(), all.end(), 0);
    const auto ids = ds.class_ids();

    std::size_t correct = 0, correct_scaled = 0;
    const ad::Tensor texts = enc.frozen_class_matrix(ids);
    const ad::Tensor scaled = ad::scale(texts, 3.0);
    for (auto i : all) {
        const auto f = enc.encode_image(ds.samples[i].image).feature;
        auto argmax = [&](const ad::Tensor& m) {
            const auto v = regularizers::cosine_scores(f, m).values();
            return ids[std::max_element(v.begin(), v.end()) - v.begin()];
        };
        correct += argmax(texts) == ds.samples[i].label;
        correct_scaled += argmax(scaled) == ds.samples[i].label;
    }
    CHECK(correct == correct_scaled);
    CHECK(evaluate(enc, nullptr, ds, all, ids) == doctest::Approx(static_cast<double>(correct) / all.size()));

    const std::vector<int> one{ids[2]};
    const auto members = ds.indices_of(ids[2]);
    CHECK(evaluate(enc, nullptr, ds, members, one) == 1.0);
    CHECK_THROWS_AS(evaluate(enc, nullptr, ds, std::vector<std::size_t>{}, ids), std::invalid_argument);
}

TEST_CASE("short prompt training run: frozen backbone, traces, determinism") {
    const auto enc = frozen_backbone();
    const auto ds = data::generate_corpus(4, 8, data::RenderConfig{}, 1);
    const auto split = data::split_all_base(ds, 1);
    const auto train = data::sample_k_shot(ds, split, 2, 1);
    const auto protos = training_prototypes(enc, ds, train, split.base_classes);
    RunSettings st;
    st.prompt = {4, 4, 2};
    st.epochs = 2;
    const auto streams = RunStreams::from_seed(5);

    std::ostringstream dump;
    const auto a = train_prompts(st, enc, ds, train, split.base_classes, protos, streams, &dump);
    const auto b = train_prompts(st, enc, ds, train, split.base_classes, protos, streams);
    CHECK(a.trace.size() == 2);
    CHECK(a.checksum_before == a.checksum_after);
    CHECK(a.checksum_before == enc.checksum());
    CHECK_FALSE(dump.str().empty());
    for (const auto& t : a.trace) {
        CHECK(std::abs(t.total - (t.ce + t.sr + t.cir + st.lambda * t.dir)) <= 1e-9);
        CHECK(t.cir >= 0.0);
        CHECK(t.sr >= 0.0);
    }
    for (std::size_t i = 0; i < a.prompts.visual.size(); ++i)
        CHECK(std::ranges::equal(a.prompts.visual[i].values(), b.prompts.visual[i].values()));
    CHECK(protos.class_ids() == split.base_classes);
}
