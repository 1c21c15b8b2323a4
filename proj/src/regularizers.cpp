#include "disa/regularizers.hpp"

#include <cmath>
#include <stdexcept>

#include "disa/ops.hpp"

namespace disa::regularizers {

using ad::Tensor;

const char* pairing_name(Pairing p) {
    switch (p) {
        case Pairing::pp: return "pp";
        case Pairing::po: return "po";
        case Pairing::op: return "op";
        case Pairing::oo: return "oo";
    }
    return "?";
}

namespace {

bool is_zero(std::span<const double> v) {
    for (double x : v) {
        if (x != 0.0) return false;
    }
    return true;
}

void require_tag(const char* loss, const ScoreVector& s, Pairing tag, ImageInput input) {
    if (s.tag != tag || s.image_input != input) {
        throw std::invalid_argument(std::string(loss) + ": expected " + pairing_name(tag) + " scores on a " +
                                    (input == ImageInput::full ? "full" : "masked") + " image, got " +
                                    pairing_name(s.tag) + (s.image_input == ImageInput::full ? "/full" : "/masked"));
    }
}

}  // namespace

Tensor cosine_scores(const Tensor& image_feature, const Tensor& class_matrix) {
    if (image_feature.rank() != 1 || class_matrix.rank() != 2 || class_matrix.cols() != image_feature.size()) {
        throw std::invalid_argument("score_vector: feature " + ad::shape_string(image_feature.shape()) +
                                    " vs class matrix " + ad::shape_string(class_matrix.shape()));
    }
    if (is_zero(image_feature.values())) throw std::domain_error("score_vector: zero-norm image feature");
    const std::size_t d = image_feature.size();
    const Tensor f = ad::reshape(ad::l2_normalize(image_feature), {d, 1});
    return ad::reshape(ad::matmul(ad::l2_normalize(class_matrix), f), {class_matrix.rows()});
}

ScoreVector score_vector(const ImageFeature& image, const TextFeatures& text) {
    ScoreVector s;
    s.sims = cosine_scores(image.value, text.matrix);
    const bool pi = image.branch == Branch::prompted, pt = text.branch == Branch::prompted;
    s.tag = pi ? (pt ? Pairing::pp : Pairing::po) : (pt ? Pairing::op : Pairing::oo);
    s.image_input = image.input;
    return s;
}

Tensor cross_entropy(const Tensor& sims, std::size_t label, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("ce_loss: temperature must be positive");
    if (sims.rank() != 1) throw std::invalid_argument("ce_loss: scores must be a vector");
    if (label >= sims.size()) {
        throw std::out_of_range("ce_loss: label " + std::to_string(label) + " out of range for " +
                                std::to_string(sims.size()) + " classes");
    }
    return ad::scale(ad::pick(ad::log_softmax(ad::scale(sims, 1.0 / tau), 0), label), -1.0);
}

Tensor score_kl(const Tensor& p_sims, const Tensor& q_sims, double tau) {
    if (p_sims.shape() != q_sims.shape()) {
        throw std::invalid_argument("kl loss: length mismatch " + ad::shape_string(p_sims.shape()) + " vs " +
                                    ad::shape_string(q_sims.shape()));
    }
    return ad::kl_divergence(ad::softmax(p_sims, tau), ad::softmax(q_sims, tau));
}

Tensor directional(const Tensor& feature, const Tensor& target) {
    if (is_zero(target.values())) throw std::domain_error("dir_loss: zero-norm prototype (degenerate class geometry)");
    if (is_zero(feature.values())) throw std::domain_error("dir_loss: zero-norm feature");
    return ad::abs(ad::add_scalar(ad::scale(ad::cosine_similarity(feature, target), -1.0), 1.0));
}

Tensor ce_loss(const ScoreVector& q_pp, std::size_t label, double tau) {
    require_tag("ce_loss", q_pp, Pairing::pp, ImageInput::full);
    return cross_entropy(q_pp.sims, label, tau);
}

Tensor cir_loss(const ScoreVector& q_po_masked, const ScoreVector& q_op, double tau) {
    require_tag("cir_loss", q_po_masked, Pairing::po, ImageInput::masked);
    require_tag("cir_loss", q_op, Pairing::op, ImageInput::full);
    return score_kl(q_po_masked.sims, q_op.sims, tau);
}

Tensor sr_loss(const ScoreVector& q_pp, const ScoreVector& q_oo, double tau) {
    require_tag("sr_loss", q_pp, Pairing::pp, ImageInput::full);
    require_tag("sr_loss", q_oo, Pairing::oo, ImageInput::full);
    return score_kl(q_pp.sims, q_oo.sims, tau);
}

Tensor dir_loss(const ImageFeature& f_p, const Tensor& target) {
    if (f_p.branch != Branch::prompted || f_p.input != ImageInput::full) {
        throw std::invalid_argument("dir_loss: expects a prompted full-image feature");
    }
    return directional(f_p.value, target);
}

AlignmentVariant parse_alignment_variant(const std::string& name) {
    if (name == "norm") return AlignmentVariant::norm;
    if (name == "mse") return AlignmentVariant::mse;
    if (name == "direction") return AlignmentVariant::direction;
    throw std::invalid_argument("unknown alignment variant '" + name + "' (norm|mse|direction)");
}

const char* alignment_variant_name(AlignmentVariant v) {
    switch (v) {
        case AlignmentVariant::norm: return "norm";
        case AlignmentVariant::mse: return "mse";
        case AlignmentVariant::direction: return "direction";
    }
    return "?";
}

Tensor alignment_variant_loss(const Tensor& f, const Tensor& m, AlignmentVariant variant) {
    if (f.shape() != m.shape() || f.rank() != 1) {
        throw std::invalid_argument("alignment loss: shape mismatch " + ad::shape_string(f.shape()) + " vs " +
                                    ad::shape_string(m.shape()));
    }
    switch (variant) {
        case AlignmentVariant::norm: {
            if (is_zero(f.values()) || is_zero(m.values())) throw std::domain_error("alignment loss: zero-norm input");
            const Tensor nf = ad::sqrt(ad::sum_all(ad::mul(f, f)));
            const Tensor nm = ad::sqrt(ad::sum_all(ad::mul(m, m)));
            return ad::abs(ad::sub(nf, nm));
        }
        case AlignmentVariant::mse: {
            const Tensor diff = ad::sub(f, m);
            return ad::mean_all(ad::mul(diff, diff));
        }
        case AlignmentVariant::direction: return directional(f, m);
    }
    throw std::invalid_argument("alignment loss: unknown variant");
}

LossReport total_loss(double ce, double sr, double cir, double dir, double lambda) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("total_loss: lambda must be non-negative");
    LossReport r;
    r.ce = ce;
    r.sr = sr;
    r.cir = cir;
    r.dir = dir;
    r.lambda = lambda;
    r.total = ce + sr + cir + lambda * dir;
    return r;
}

Tensor total_loss(const Tensor& ce, const Tensor& sr, const Tensor& cir, const Tensor& dir, double lambda) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("total_loss: lambda must be non-negative");
    Tensor total = ce;
    auto accumulate = [&](const Tensor& term) {
        if (!term.defined()) return;
        total = total.defined() ? ad::add(total, term) : term;
    };
    accumulate(sr);
    accumulate(cir);
    if (dir.defined()) accumulate(ad::scale(dir, lambda));
    if (!total.defined()) throw std::invalid_argument("total_loss: no loss component enabled");
    return total;
}

PrototypeTable::PrototypeTable(std::map<int, std::vector<double>> means, std::map<int, std::size_t> counts)
    : means_(std::move(means)), counts_(std::move(counts)) {}

const std::vector<double>& PrototypeTable::mean(int class_id) const {
    auto it = means_.find(class_id);
    if (it == means_.end()) throw std::out_of_range("prototypes: no prototype for class " + std::to_string(class_id));
    return it->second;
}

std::size_t PrototypeTable::count(int class_id) const {
    auto it = counts_.find(class_id);
    if (it == counts_.end()) throw std::out_of_range("prototypes: no prototype for class " + std::to_string(class_id));
    return it->second;
}

Tensor PrototypeTable::tensor(int class_id) const { return Tensor::vector(mean(class_id)); }

std::vector<int> PrototypeTable::class_ids() const {
    std::vector<int> ids;
    for (const auto& [id, m] : means_) ids.push_back(id);
    return ids;
}

std::size_t PrototypeTable::width() const { return means_.empty() ? 0 : means_.begin()->second.size(); }

PrototypeTable compute_prototypes(std::span<const std::pair<std::vector<double>, int>> features,
                                  std::span<const int> expected_classes) {
    std::map<int, std::vector<double>> sums;
    std::map<int, std::size_t> counts;
    std::size_t width = 0;
    for (const auto& [f, label] : features) {
        if (width == 0) width = f.size();
        if (f.size() != width || width == 0) throw std::invalid_argument("compute_prototypes: inconsistent feature width");
        auto& s = sums[label];
        if (s.empty()) s.assign(width, 0.0);
        for (std::size_t i = 0; i < width; ++i) s[i] += f[i];
        ++counts[label];
    }
    for (int c : expected_classes) {
        if (!counts.contains(c)) throw std::invalid_argument("compute_prototypes: class " + std::to_string(c) + " has zero samples");
    }
    for (auto& [label, s] : sums) {
        const double n = static_cast<double>(counts[label]);
        for (auto& x : s) x /= n;
        for (double x : s) {
            if (!std::isfinite(x)) throw std::domain_error("compute_prototypes: non-finite prototype for class " + std::to_string(label));
        }
    }
    return PrototypeTable(std::move(sums), std::move(counts));
}

}  // namespace disa::regularizers
