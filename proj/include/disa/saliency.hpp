#pragma once

// Patch importance from frozen cross-modal attention, and the two-stage
// random masking policy built on it.

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "disa/encoders.hpp"
#include "disa/tensor.hpp"

namespace disa::saliency {

struct SaliencyScores {
    std::vector<double> alpha;  // one weight per image patch, sums to 1
    int source_class = -1;
};

struct MaskPlan {
    std::vector<std::size_t> candidates;  // lowest-alpha patches, ascending alpha
    std::vector<std::size_t> masked;      // sorted subset of candidates
    double gamma = 0.5;
    double mask_fraction_within = 0.5;
};

// Head-averaged softmax over keys of the scaled query.key logits.
// query: [width], keys: [n x width].
std::vector<double> head_averaged_attention(std::span<const double> query, std::span<const double> keys,
                                            std::size_t n_keys, std::size_t heads);

// Scores come from a frozen, promptless, unmasked image pass; the query is
// the frozen text feature of the sample's class, pushed through the same
// final-layer pre-norm and Q projection the image tokens went through.
SaliencyScores score_tokens(const encoders::TokenTrace& trace, const ad::Tensor& text_feature, int source_class);

std::size_t candidate_count(std::size_t patches, double gamma);
std::size_t masked_count(std::size_t candidates, double mask_fraction_within);

MaskPlan select_mask(const SaliencyScores& scores, double gamma, double mask_fraction_within, std::mt19937_64& rng);

std::vector<bool> to_keep_mask(const MaskPlan& plan, std::size_t patches);

}  // namespace disa::saliency
