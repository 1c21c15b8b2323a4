#pragma once

// Experiment driver: toy backbone pretraining, prompt training under the
// regularized objective, evaluation, and the protocol/ablation/sweep
// orchestration with CSV and JSON reporting.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "disa/config.hpp"
#include "disa/data.hpp"
#include "disa/encoders.hpp"
#include "disa/regularizers.hpp"

namespace disa::harness {

enum class Protocol { base_to_novel, cross_dataset, domain_generalization, few_shot, ablation, lambda_sweep, depth_sweep };
Protocol parse_protocol(const std::string& name);
const char* protocol_name(Protocol p);

enum class DirTarget { prototype, sample };
DirTarget parse_dir_target(const std::string& name);
const char* dir_target_name(DirTarget t);

struct LossSwitches {
    bool cir = true;
    bool masking = true;
    bool sr = true;
    bool dir = true;
    regularizers::AlignmentVariant dir_variant = regularizers::AlignmentVariant::direction;
    DirTarget dir_target = DirTarget::prototype;

    // e.g. "ce+cir+mask+sr+dir(prototype)"
    std::string label() const;
};

// The six rows of the component ablation, baseline first.
std::vector<LossSwitches> ablation_rows();

struct OptimConfig {
    double lr = 0.0025;
    double momentum = 0.9;
    std::size_t epochs = 20;
    std::size_t few_shot_epochs = 50;
    std::size_t batch = 4;
};

struct DataConfig {
    std::uint64_t seed = 2024;
    std::size_t classes = 20;
    std::size_t samples_per_class = 40;
    double base_fraction = 0.6;
    std::size_t k_shot = 16;
    std::vector<std::size_t> few_shot_k{1, 2, 4, 8, 16};
    data::RenderConfig render;
    std::size_t cross_targets = 2;
    std::vector<data::ShiftKind> shifts{std::begin(data::kAllShifts), std::end(data::kAllShifts)};
    double shift_magnitude = 0.25;
};

struct PretrainConfig {
    std::uint64_t seed = 11;
    std::size_t samples_per_class = 24;
    std::size_t steps = 1000;
    std::size_t batch = 16;
    double lr = 0.0005;
    double tau = 0.07;
    double floor = 0.4;
    data::RenderConfig render;  // cleaner regime than the downstream corpora
    std::filesystem::path cache_dir;  // empty disables the backbone cache
};

struct ExperimentConfig {
    Protocol protocol = Protocol::base_to_novel;
    encoders::EncoderConfig encoder;
    std::uint64_t encoder_seed = 7;
    encoders::PromptConfig prompt{4, 4, 0};  // depth 0: protocol default
    OptimConfig optim;
    LossSwitches switches;
    double lambda = regularizers::kDefaultLambda;
    double gamma = 0.5;
    double mask_fraction = 0.5;
    double tau = regularizers::kDefaultTemperature;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    DataConfig data;
    PretrainConfig pretrain;
    std::vector<double> lambda_grid{0, 1, 4, 8, 12, 16};
    std::vector<std::size_t> depth_grid{1, 3, 6, 9, 12};
    std::size_t reference_layers = 12;

    std::string resolved;  // snapshot of the source config, if any
    std::uint64_t digest = 0;

    void validate() const;
};

ExperimentConfig from_config(const config::Config& cfg);

// Default prompted depth for a protocol: nine of twelve layers for
// base-to-novel style runs, three for transfer runs, capped at L.
std::size_t default_depth(Protocol p, std::size_t layers);
// Depth of a reference-layer grid point mapped onto `layers`.
std::size_t scaled_depth(std::size_t reference_depth, std::size_t reference_layers, std::size_t layers);

double harmonic_mean(double base_acc, double novel_acc);

// --- backbone -------------------------------------------------------------

struct Backbone {
    std::shared_ptr<const encoders::DualEncoder> encoder;  // frozen
    double zero_shot_acc = 0.0;  // held-out pretrain classes, fraction
    double chance = 0.0;
    std::size_t steps = 0;
    bool from_cache = false;
    std::filesystem::path cache_file;
};

// Fresh encoder with every grid class registered; not frozen.
encoders::DualEncoder make_encoder(const encoders::EncoderConfig& config, std::uint64_t seed);

// The pretraining corpus: every pretrain-pool class of the attribute grid.
data::Dataset pretrain_corpus(const ExperimentConfig& config);

using Logger = std::function<void(const std::string&)>;

// Symmetric contrastive pretraining with Adam; aborts when held-out zero-shot
// accuracy ends below the floor. Uses and fills the cache when configured.
Backbone pretrain_backbone(const ExperimentConfig& config, const Logger& log = {});

// Zero-shot or prompted accuracy (fraction) over `indices`, predicting by
// cosine argmax over `class_set`. Full images, no masking.
double evaluate(const encoders::DualEncoder& encoder, const encoders::PromptBank* prompts, const data::Dataset& ds,
                std::span<const std::size_t> indices, std::span<const int> class_set);

// --- prompt training ------------------------------------------------------

struct RunSettings {
    encoders::PromptConfig prompt;
    OptimConfig optim;
    std::size_t epochs = 20;
    LossSwitches switches;
    double lambda = regularizers::kDefaultLambda;
    double gamma = 0.5;
    double mask_fraction = 0.5;
    double tau = regularizers::kDefaultTemperature;
};

struct EpochTrace {
    double ce = 0, sr = 0, cir = 0, dir = 0, total = 0;
};

struct TrainResult {
    encoders::PromptBank prompts;
    std::vector<EpochTrace> trace;
    std::uint64_t checksum_before = 0;
    std::uint64_t checksum_after = 0;
    std::size_t steps = 0;
};

// Independent rng streams derived from one run seed.
struct RunStreams {
    std::uint64_t split, k_shot, init, mask, order;
    static RunStreams from_seed(std::uint64_t seed);
};

// Class-mean frozen full-image features over the training samples.
regularizers::PrototypeTable training_prototypes(const encoders::DualEncoder& frozen, const data::Dataset& ds,
                                                 std::span<const std::size_t> train_indices,
                                                 std::span<const int> classes);

TrainResult train_prompts(const RunSettings& settings, const encoders::DualEncoder& frozen, const data::Dataset& ds,
                          std::span<const std::size_t> train_indices, std::span<const int> classes,
                          const regularizers::PrototypeTable& prototypes, const RunStreams& streams,
                          std::ostream* saliency_dump = nullptr);

// --- reports --------------------------------------------------------------

struct ReportRow {
    std::string protocol;
    std::string dataset;
    std::uint64_t seed = 0;
    std::size_t k_shot = 0;
    double lambda = 0;
    std::size_t depth = 0;
    std::size_t reference_depth = 0;
    std::string switches;
    double base_acc = 0;  // percent
    std::optional<double> novel_acc;
    std::optional<double> hm;
    double ce = 0, sr = 0, cir = 0, dir = 0;  // final-epoch means
    std::vector<EpochTrace> trace;
    std::uint64_t checksum_before = 0, checksum_after = 0;
    std::size_t condition = 0;  // grid position, groups rows across seeds
};

struct SummaryRow {
    ReportRow key;  // seed-independent columns
    std::size_t seeds = 0;
    double base_mean = 0, base_std = 0;
    std::optional<double> novel_mean, novel_std, hm_mean, hm_std;
};

struct EvalReport {
    std::string protocol;
    std::vector<ReportRow> rows;
    std::vector<SummaryRow> summary;
    std::uint64_t config_digest = 0;
    double wall_clock_seconds = 0;
    Backbone backbone;
    std::string resolved_config;
};

std::vector<SummaryRow> summarize(const std::vector<ReportRow>& rows);

inline constexpr const char* kCsvHeader =
    "protocol,dataset,seed,k_shot,lambda,depth,switches,base_acc,novel_acc,hm,ce,sr,cir,dir";
void write_csv(std::ostream& out, const std::vector<ReportRow>& rows);
void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows);
std::string to_json(const EvalReport& report);

// Writes report.csv, summary.csv and report.json into `dir`.
void write_report_files(const std::filesystem::path& dir, const EvalReport& report);

struct ProtocolOptions {
    std::size_t parallel = 1;
    Logger log;
    std::filesystem::path corpus_cache_dir;  // empty: no corpus cache
};

// Source corpus of the downstream protocols.
data::Dataset source_corpus(const ExperimentConfig& config, const std::filesystem::path& cache_dir = {});

EvalReport run_protocol(const ExperimentConfig& config, const Backbone& backbone, const ProtocolOptions& options = {});

// Single base-to-novel run; exposed for the CLI train/eval paths.
struct SingleRun {
    ReportRow row;
    TrainResult train;
    regularizers::PrototypeTable prototypes;
    data::SplitSpec split;
};
SingleRun run_base_to_novel(const ExperimentConfig& config, const encoders::DualEncoder& frozen,
                            const data::Dataset& ds, std::uint64_t seed, const RunSettings& settings,
                            std::ostream* saliency_dump = nullptr);

RunSettings settings_for(const ExperimentConfig& config, Protocol protocol);

}  // namespace disa::harness
