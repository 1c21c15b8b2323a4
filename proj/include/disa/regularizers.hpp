#pragma once

// Loss stack for prompt training: temperature cross-entropy, the two KL
// score regularizers (cross-interactive and self), directional alignment to
// frozen class prototypes, and their weighted total.

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "disa/tensor.hpp"

namespace disa::regularizers {

inline constexpr double kDefaultTemperature = 0.07;
inline constexpr double kDefaultLambda = 12.0;

enum class Branch { frozen, prompted };
enum class ImageInput { full, masked };

// Feature provenance travels with the tensor so losses can reject
// mismatched pairings.
struct ImageFeature {
    ad::Tensor value;  // [d]
    Branch branch = Branch::frozen;
    ImageInput input = ImageInput::full;
    std::size_t masked_patches = 0;
};

struct TextFeatures {
    ad::Tensor matrix;  // [classes x d]
    Branch branch = Branch::frozen;
};

enum class Pairing { pp, po, op, oo };
const char* pairing_name(Pairing p);

struct ScoreVector {
    ad::Tensor sims;  // [classes], cosine similarities
    Pairing tag = Pairing::oo;
    ImageInput image_input = ImageInput::full;
};

// Per-class cosine similarities between one image feature and each row.
ad::Tensor cosine_scores(const ad::Tensor& image_feature, const ad::Tensor& class_matrix);
ScoreVector score_vector(const ImageFeature& image, const TextFeatures& text);

// Untagged kernels.
ad::Tensor cross_entropy(const ad::Tensor& sims, std::size_t label, double tau);
ad::Tensor score_kl(const ad::Tensor& p_sims, const ad::Tensor& q_sims, double tau);
ad::Tensor directional(const ad::Tensor& feature, const ad::Tensor& target);

ad::Tensor ce_loss(const ScoreVector& q_pp, std::size_t label, double tau);
// KL(softmax(q_po_masked / tau) || softmax(q_op / tau)); both sides carry
// prompt gradients.
ad::Tensor cir_loss(const ScoreVector& q_po_masked, const ScoreVector& q_op, double tau);
// KL(softmax(q_pp / tau) || softmax(q_oo / tau)).
ad::Tensor sr_loss(const ScoreVector& q_pp, const ScoreVector& q_oo, double tau);
// |1 - cos(f_p, target)| for a full-image prompted feature.
ad::Tensor dir_loss(const ImageFeature& f_p, const ad::Tensor& target);

enum class AlignmentVariant { norm, mse, direction };
AlignmentVariant parse_alignment_variant(const std::string& name);
const char* alignment_variant_name(AlignmentVariant v);
ad::Tensor alignment_variant_loss(const ad::Tensor& f, const ad::Tensor& m, AlignmentVariant variant);

struct LossReport {
    double ce = 0.0, sr = 0.0, cir = 0.0, dir = 0.0;
    double total = 0.0;
    double lambda = kDefaultLambda;
};

LossReport total_loss(double ce, double sr, double cir, double dir, double lambda);
// Differentiable counterpart; undefined components count as zero.
ad::Tensor total_loss(const ad::Tensor& ce, const ad::Tensor& sr, const ad::Tensor& cir, const ad::Tensor& dir,
                      double lambda);

// Class-mean frozen image embeddings.
class PrototypeTable {
   public:
    PrototypeTable() = default;
    PrototypeTable(std::map<int, std::vector<double>> means, std::map<int, std::size_t> counts);

    bool contains(int class_id) const { return means_.contains(class_id); }
    const std::vector<double>& mean(int class_id) const;
    std::size_t count(int class_id) const;
    ad::Tensor tensor(int class_id) const;
    std::vector<int> class_ids() const;
    std::size_t width() const;
    bool operator==(const PrototypeTable&) const = default;

   private:
    std::map<int, std::vector<double>> means_;
    std::map<int, std::size_t> counts_;
};

// `expected_classes`, when non-empty, must all be represented.
PrototypeTable compute_prototypes(std::span<const std::pair<std::vector<double>, int>> features,
                                  std::span<const int> expected_classes = {});

}  // namespace disa::regularizers
