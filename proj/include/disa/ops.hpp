#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "disa/tensor.hpp"

namespace disa::ad {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kKlFloor = 1e-12;

// Elementwise. The second operand may also be a rank-1 tensor whose length
// equals the first operand's column count; it is then added to every row.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
// Row selection of a rank-2 tensor, in the given order.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
Tensor pick(const Tensor& a, std::size_t flat_index);

// Reductions drop the reduced axis. sum_all/mean_all give a scalar.
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor power(const Tensor& a, double exponent);
Tensor abs(const Tensor& a);
Tensor gelu(const Tensor& a);

// Normalization over the last axis (no affine part).
Tensor layer_norm(const Tensor& a);
Tensor l2_normalize(const Tensor& a);

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);

Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);
// Temperature-scaled softmax of a logit vector.
Tensor softmax(const Tensor& v, double temperature);

double cosine_similarity_value(std::span<const double> a, std::span<const double> b);
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

// KL(p || q) = sum p_i log(p_i / max(q_i, kKlFloor)), with 0 log 0 = 0.
Tensor kl_divergence(const Tensor& p, const Tensor& q);

}  // namespace disa::ad
