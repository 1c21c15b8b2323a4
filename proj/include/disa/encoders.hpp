#pragma once

// Mini contrastive dual encoder: a patch-token vision transformer and a
// word-token text transformer sharing one width, with deep independent
// prompting on both branches.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "disa/tensor.hpp"

namespace disa::encoders {

struct EncoderConfig {
    std::size_t width = 32;  // token width == joint embedding dimension
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t patches = 16;
    std::size_t patch_dim = 48;
    std::size_t mlp_ratio = 2;
    std::size_t context = 16;  // max text tokens, excluding prompts
    double init_std = 0.02;

    std::size_t head_dim() const { return width / heads; }
    void validate() const;
};

// Whitespace word-level tokenizer over a closed vocabulary.
class Vocabulary {
   public:
    static constexpr std::size_t kSos = 0;
    static constexpr std::size_t kEos = 1;

    // Ids 0/1 are the start/end markers; words get ids in sorted order.
    explicit Vocabulary(std::vector<std::string> words);

    std::size_t size() const { return words_.size(); }
    std::size_t id(const std::string& word) const;
    const std::string& word(std::size_t id) const { return words_.at(id); }
    std::vector<std::size_t> tokenize(const std::string& text) const;

   private:
    std::vector<std::string> words_;
    std::map<std::string, std::size_t> ids_;
};

inline constexpr const char* kTemplate = "a photo of a";

struct PromptConfig {
    std::size_t visual_tokens = 4;
    std::size_t text_tokens = 4;
    std::size_t depth = 4;
};

// Per-layer learnable prompt tokens; the only trainable parameters once the
// backbone is frozen.
struct PromptBank {
    PromptConfig config;
    std::vector<ad::Tensor> visual;   // depth x [visual_tokens x width]
    std::vector<ad::Tensor> textual;  // depth x [text_tokens x width]

    std::size_t depth() const { return visual.size(); }
    std::vector<ad::Tensor*> parameters();
    std::vector<const ad::Tensor*> parameters() const;
};

struct BlockParams {
    ad::Tensor ln1_g, ln1_b;
    ad::Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    ad::Tensor ln2_g, ln2_b;
    ad::Tensor w1, b1, w2, b2;
};

struct ImageParams {
    ad::Tensor patch_w, patch_b, cls, pos, ln_pre_g, ln_pre_b;
    std::vector<BlockParams> blocks;
    ad::Tensor ln_post_g, ln_post_b, proj;
};

struct TextParams {
    ad::Tensor token_embedding, pos;
    std::vector<BlockParams> blocks;
    ad::Tensor ln_final_g, ln_final_b, proj;
};

// Final-layer state retained for saliency scoring.
struct TokenTrace {
    bool prompted = false;
    bool masked = false;
    std::size_t prompt_tokens = 0;
    std::size_t cls_index = 0;
    std::vector<std::size_t> patch_index;  // sequence row of each retained patch
    std::vector<std::size_t> layer_lengths;  // input sequence length per layer
    ad::Tensor final_normed;  // LN1 output at the last block, [seq x width]
    ad::Tensor final_keys;    // K projection of final_normed
    // Frozen weights of the last image block's attention input path.
    ad::Tensor ln1_g, ln1_b, wq, bq;
    std::size_t heads = 0;
};

struct ImageOutput {
    ad::Tensor feature;
    std::optional<TokenTrace> trace;
};

class DualEncoder {
   public:
    DualEncoder(EncoderConfig config, Vocabulary vocab, std::uint64_t seed);

    const EncoderConfig& config() const { return config_; }
    const Vocabulary& vocabulary() const { return vocab_; }

    void register_class(int class_id, const std::string& name);
    bool has_class(int class_id) const { return class_tokens_.contains(class_id); }

    // Images are [patches x patch_dim] row-major pixel blocks.
    ImageOutput encode_image(const ad::Tensor& image, const PromptBank* prompts = nullptr,
                             const std::vector<bool>* keep_mask = nullptr, bool trace = false) const;
    ad::Tensor encode_text(int class_id, const PromptBank* prompts = nullptr) const;
    // Text features stacked as rows.
    ad::Tensor encode_texts(std::span<const int> class_ids, const PromptBank* prompts = nullptr) const;

    // Promptless text features; cached because the backbone never changes
    // once frozen.
    ad::Tensor frozen_class_matrix(std::span<const int> class_ids) const;

    PromptBank make_prompts(const PromptConfig& config, std::mt19937_64& rng) const;

    // Backbone freezing is one-way.
    void freeze();
    bool frozen() const { return frozen_; }

    // Name-ordered view of every backbone tensor.
    std::vector<std::pair<std::string, ad::Tensor*>> named_parameters();
    std::vector<std::pair<std::string, const ad::Tensor*>> named_parameters() const;
    std::uint64_t checksum() const;

    // Replaces a backbone tensor by name (checkpoint restore).
    void set_parameter(const std::string& name, const ad::Tensor& value);

   private:
    ad::Tensor run_block(const BlockParams& p, const ad::Tensor& x) const;

    EncoderConfig config_;
    Vocabulary vocab_;
    ImageParams image_;
    TextParams text_;
    bool frozen_ = false;
    std::map<int, std::vector<std::size_t>> class_tokens_;
    mutable std::map<int, ad::Tensor> frozen_text_cache_;
};

// FNV-1a over raw parameter bytes, in a fixed order.
std::uint64_t checksum(std::span<const ad::Tensor* const> tensors);

}  // namespace disa::encoders
