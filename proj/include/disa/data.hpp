#pragma once

// Procedural image/text corpora rendered directly in patch space.
//
// Class names are "<color> <texture> <shape>" phrases drawn from a fixed
// attribute grid. The grid is partitioned into a pretraining pool and a
// downstream pool; both pools use every attribute word, so downstream
// classes are unseen combinations of seen words.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "disa/tensor.hpp"

namespace disa::data {

struct AttributeGrid {
    std::vector<std::string> colors;
    std::vector<std::string> textures;
    std::vector<std::string> shapes;

    std::size_t size() const { return colors.size() * textures.size() * shapes.size(); }
};

const AttributeGrid& attribute_grid();
// Every word the toy text encoder needs: template words plus attributes.
std::vector<std::string> vocabulary_words();

enum class ClassPool { pretrain, downstream };
const char* pool_name(ClassPool pool);

struct ToyClass {
    int id = 0;  // global index into the attribute grid
    std::string name;
    std::size_t color = 0, texture = 0, shape = 0;
};

ToyClass toy_class(int id);
bool in_pool(const ToyClass& c, ClassPool pool);

struct RenderConfig {
    std::size_t grid_side = 4;   // patches per side
    std::size_t patch_side = 4;  // pixels per patch side
    std::size_t channels = 3;
    double background = 0.15;
    double pixel_noise = 0.05;
    double position_jitter = 1.5;  // pixels
    double scale_jitter = 0.15;    // relative radius
    double color_jitter = 0.05;
    double radius = 5.0;
    ClassPool pool = ClassPool::downstream;

    std::size_t patches() const { return grid_side * grid_side; }
    std::size_t patch_dim() const { return patch_side * patch_side * channels; }
    std::string canonical() const;
};

struct Sample {
    ad::Tensor image;  // [patches x patch_dim], values in [0, 1]
    int label = 0;
    std::string domain_tag = "source";
};

struct Dataset {
    std::vector<ToyClass> classes;  // sorted by id
    std::vector<Sample> samples;    // grouped by class, in class order
    RenderConfig render;
    std::uint64_t seed = 0;
    std::size_t samples_per_class = 0;

    std::vector<int> class_ids() const;
    std::vector<std::size_t> indices_of(int class_id) const;
};

Dataset generate_corpus(std::size_t n_classes, std::size_t samples_per_class, const RenderConfig& render,
                        std::uint64_t seed);

// Corpus over an explicit class list (ids from the attribute grid).
Dataset generate_corpus_for(const std::vector<int>& class_ids, std::size_t samples_per_class,
                            const RenderConfig& render, std::uint64_t seed);

struct SplitSpec {
    std::vector<int> base_classes;
    std::vector<int> novel_classes;
    // Per-class halves of the sample indices: a training pool and held-out tests.
    std::vector<std::size_t> train_pool;
    std::vector<std::size_t> test_base;
    std::vector<std::size_t> test_novel;
    std::uint64_t seed = 0;
};

SplitSpec split_base_novel(const Dataset& dataset, double base_fraction, std::uint64_t seed);
// Every class is a base class; used where no novel split exists.
SplitSpec split_all_base(const Dataset& dataset, std::uint64_t seed);

// Exactly k samples per base class from the training pool.
std::vector<std::size_t> sample_k_shot(const Dataset& dataset, const SplitSpec& split, std::size_t k,
                                       std::uint64_t seed);

enum class ShiftKind { hue_rotation, noise_boost, texture_swap, blur };
ShiftKind parse_shift_kind(const std::string& name);
const char* shift_kind_name(ShiftKind kind);
inline constexpr ShiftKind kAllShifts[] = {ShiftKind::hue_rotation, ShiftKind::noise_boost, ShiftKind::texture_swap,
                                           ShiftKind::blur};

Dataset domain_shift(const Dataset& dataset, ShiftKind kind, double magnitude, std::uint64_t seed);

// Digest of everything that determines a corpus.
std::uint64_t corpus_digest(std::size_t n_classes, std::size_t samples_per_class, const RenderConfig& render,
                            std::uint64_t seed);

// Loads the cached corpus when its header matches, otherwise regenerates
// and rewrites the cache.
Dataset load_or_generate(const std::filesystem::path& cache, std::size_t n_classes, std::size_t samples_per_class,
                         const RenderConfig& render, std::uint64_t seed);
void save_dataset(const std::filesystem::path& path, const Dataset& dataset, std::uint64_t digest);

// One "id<TAB>name" line per class.
void write_class_list(const std::filesystem::path& path, const std::vector<ToyClass>& classes);

}  // namespace disa::data
