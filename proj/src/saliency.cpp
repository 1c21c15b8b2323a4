#include "disa/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "disa/ops.hpp"

namespace disa::saliency {

std::vector<double> head_averaged_attention(std::span<const double> query, std::span<const double> keys,
                                            std::size_t n_keys, std::size_t heads) {
    const std::size_t width = query.size();
    if (n_keys == 0 || heads == 0 || width % heads != 0 || keys.size() != n_keys * width) {
        throw std::invalid_argument("saliency: inconsistent query/key sizes");
    }
    const std::size_t hd = width / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> alpha(n_keys, 0.0);
    std::vector<double> logits(n_keys);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t n = 0; n < n_keys; ++n) {
            double dot = 0.0;
            for (std::size_t j = h * hd; j < (h + 1) * hd; ++j) dot += query[j] * keys[n * width + j];
            logits[n] = dot * inv_sqrt;
        }
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (auto& l : logits) z += (l = std::exp(l - mx));
        for (std::size_t n = 0; n < n_keys; ++n) alpha[n] += logits[n] / z / static_cast<double>(heads);
    }
    return alpha;
}

SaliencyScores score_tokens(const encoders::TokenTrace& trace, const ad::Tensor& text_feature, int source_class) {
    if (trace.prompted || trace.masked) {
        throw std::invalid_argument("score_tokens: trace must come from a frozen full-image pass");
    }
    if (!trace.final_keys.defined() || trace.patch_index.empty()) {
        throw std::invalid_argument("score_tokens: trace carries no final-layer keys");
    }
    // Saliency must not open a gradient path into the loss.
    if (trace.final_keys.requires_grad() || text_feature.requires_grad()) {
        throw std::invalid_argument("score_tokens: inputs must be frozen (no gradient)");
    }
    const std::size_t width = trace.final_keys.cols();
    if (text_feature.size() != width) {
        throw std::invalid_argument("score_tokens: text feature width " + std::to_string(text_feature.size()) +
                                    " != " + std::to_string(width));
    }
    const ad::Tensor row = ad::reshape(text_feature, {1, width});
    const ad::Tensor normed = ad::add(ad::mul(ad::layer_norm(row), trace.ln1_g), trace.ln1_b);
    const ad::Tensor query = ad::add(ad::matmul(normed, trace.wq), trace.bq);

    const ad::Tensor keys = ad::gather_rows(trace.final_keys, trace.patch_index);
    SaliencyScores out;
    out.alpha = head_averaged_attention(query.values(), keys.values(), trace.patch_index.size(), trace.heads);
    out.source_class = source_class;
    return out;
}

std::size_t candidate_count(std::size_t patches, double gamma) {
    return static_cast<std::size_t>(std::floor(gamma * static_cast<double>(patches) + 1e-9));
}

std::size_t masked_count(std::size_t candidates, double mask_fraction_within) {
    // Round half up.
    return static_cast<std::size_t>(std::floor(mask_fraction_within * static_cast<double>(candidates) + 0.5));
}

MaskPlan select_mask(const SaliencyScores& scores, double gamma, double mask_fraction_within, std::mt19937_64& rng) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("select_mask: gamma outside [0, 1]");
    if (!(mask_fraction_within >= 0.0 && mask_fraction_within <= 1.0)) {
        throw std::invalid_argument("select_mask: mask fraction outside [0, 1]");
    }
    const std::size_t v = scores.alpha.size();
    MaskPlan plan;
    plan.gamma = gamma;
    plan.mask_fraction_within = mask_fraction_within;

    std::vector<std::size_t> order(v);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores.alpha[a] < scores.alpha[b]; });
    plan.candidates.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(candidate_count(v, gamma)));

    const std::size_t k = masked_count(plan.candidates.size(), mask_fraction_within);
    // Partial Fisher-Yates: a uniform k-subset without replacement.
    std::vector<std::size_t> pool = plan.candidates;
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    plan.masked.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(plan.masked.begin(), plan.masked.end());
    return plan;
}

std::vector<bool> to_keep_mask(const MaskPlan& plan, std::size_t patches) {
    std::vector<bool> keep(patches, true);
    for (auto i : plan.masked) {
        if (i >= patches) {
            throw std::out_of_range("to_keep_mask: index " + std::to_string(i) + " out of range for " +
                                    std::to_string(patches) + " patches");
        }
        keep[i] = false;
    }
    return keep;
}

}  // namespace disa::saliency
