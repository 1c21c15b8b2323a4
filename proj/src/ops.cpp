#include "disa/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace disa::ad {

namespace {

using detail::Node;

// Gradient buffer of parent i, or nullptr when that parent is constant.
double* parent_grad(Node& self, std::size_t i) {
    Node& p = *self.parents[i];
    return p.requires_grad ? p.grad.data() : nullptr;
}

const std::vector<double>& parent_value(const Node& self, std::size_t i) { return self.parents[i]->value; }

[[noreturn]] void shape_error(const char* kind, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(kind) + ": shape mismatch " + shape_string(a) + " vs " +
                                shape_string(b));
}

void require_rank(const char* kind, const Tensor& t, std::size_t rank) {
    if (t.rank() != rank) {
        throw std::invalid_argument(std::string(kind) + ": expected rank " + std::to_string(rank) + ", got " +
                                    shape_string(t.shape()));
    }
}

enum class Broadcast { same, row };

Broadcast binary_layout(const char* kind, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return Broadcast::same;
    if (a.rank() == 2 && b.rank() == 1 && b.shape()[0] == a.shape()[1]) return Broadcast::row;
    shape_error(kind, a.shape(), b.shape());
}

// Applies f elementwise; df returns the local derivative given (x, y).
template <typename F, typename DF>
Tensor unary(const char* kind, const Tensor& a, F f, DF df) {
    const auto x = a.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return Tensor::make(a.shape(), std::move(out), kind, {a}, [df](Node& self) {
        double* ga = parent_grad(self, 0);
        const auto& x = parent_value(self, 0);
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] += self.grad[i] * df(x[i], self.value[i]);
    });
}

// Shape of a after removing `axis`, plus the (outer, n, inner) strides.
struct AxisSplit {
    Shape reduced;
    std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const char* kind, const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) {
        throw std::invalid_argument(std::string(kind) + ": axis " + std::to_string(axis) + " out of range for " +
                                    shape_string(shape));
    }
    AxisSplit s;
    for (std::size_t d = 0; d < shape.size(); ++d) {
        if (d < axis) s.outer *= shape[d];
        if (d > axis) s.inner *= shape[d];
        if (d != axis) s.reduced.push_back(shape[d]);
    }
    s.n = shape[axis];
    return s;
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t m,
             std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* __restrict ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* __restrict bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c[m x k] += g[m x n] * b[k x n]^T, via a transposed copy of b so the inner
// loop is an axpy rather than a reduction.
void gemm_nt(const double* __restrict g, const double* __restrict b, double* __restrict c, std::size_t m,
             std::size_t k, std::size_t n) {
    std::vector<double> bt(n * k);
    for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
    gemm_nn(g, bt.data(), c, m, n, k);
}

// c[k x n] += a[m x k]^T * g[m x n]
void gemm_tn(const double* __restrict a, const double* __restrict g, double* __restrict c, std::size_t m,
             std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* __restrict gi = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            double* __restrict cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += av * gi[j];
        }
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    const Broadcast layout = binary_layout("add", a, b);
    const auto x = a.values();
    const auto y = b.values();
    std::vector<double> out(x.begin(), x.end());
    const std::size_t w = y.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[layout == Broadcast::same ? i : i % w];
    return Tensor::make(a.shape(), std::move(out), "add", {a, b}, [layout, w](Node& self) {
        if (double* ga = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
        }
        if (double* gb = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) gb[layout == Broadcast::same ? i : i % w] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    const Broadcast layout = binary_layout("sub", a, b);
    const auto x = a.values();
    const auto y = b.values();
    std::vector<double> out(x.begin(), x.end());
    const std::size_t w = y.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[layout == Broadcast::same ? i : i % w];
    return Tensor::make(a.shape(), std::move(out), "sub", {a, b}, [layout, w](Node& self) {
        if (double* ga = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
        }
        if (double* gb = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) gb[layout == Broadcast::same ? i : i % w] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const Broadcast layout = binary_layout("mul", a, b);
    const auto x = a.values();
    const auto y = b.values();
    std::vector<double> out(x.begin(), x.end());
    const std::size_t w = y.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[layout == Broadcast::same ? i : i % w];
    return Tensor::make(a.shape(), std::move(out), "mul", {a, b}, [layout, w](Node& self) {
        const auto& x = parent_value(self, 0);
        const auto& y = parent_value(self, 1);
        if (double* ga = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                ga[i] += self.grad[i] * y[layout == Broadcast::same ? i : i % w];
        }
        if (double* gb = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                gb[layout == Broadcast::same ? i : i % w] += self.grad[i] * x[i];
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    return unary("scale", a, [factor](double x) { return x * factor; },
                 [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
    return unary("add_scalar", a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) shape_error("matmul", a.shape(), b.shape());
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n, 0.0);
    gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
    return Tensor::make({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](Node& self) {
        if (double* ga = parent_grad(self, 0)) gemm_nt(self.grad.data(), parent_value(self, 1).data(), ga, m, k, n);
        if (double* gb = parent_grad(self, 1)) gemm_tn(parent_value(self, 0).data(), self.grad.data(), gb, m, k, n);
    });
}

Tensor transpose(const Tensor& a) {
    require_rank("transpose", a, 2);
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    const auto x = a.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    return Tensor::make({c, r}, std::move(out), "transpose", {a}, [r, c](Node& self) {
        double* ga = parent_grad(self, 0);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_size(shape) != a.size()) shape_error("reshape", a.shape(), shape);
    const auto x = a.values();
    return Tensor::make(std::move(shape), std::vector<double>(x.begin(), x.end()), "reshape", {a}, [](Node& self) {
        double* ga = parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw std::invalid_argument("concat: axis out of range for " + shape_string(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != first.size()) shape_error("concat", first, s);
        for (std::size_t d = 0; d < s.size(); ++d) {
            if (d != axis && s[d] != first[d]) shape_error("concat", first, s);
        }
        out_shape[axis] += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
    for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
    const std::size_t out_span = out_shape[axis] * inner;

    std::vector<double> out(shape_size(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t span = p.shape()[axis] * inner;
        const auto x = p.values();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(x.data() + o * span, span, out.data() + o * out_span + offset);
        offsets.push_back(offset);
        offset += span;
    }
    std::vector<Tensor> parents(parts.begin(), parts.end());
    return Tensor::make(std::move(out_shape), std::move(out), "concat", std::move(parents),
                        [offsets, outer, out_span](Node& self) {
                            for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                double* g = parent_grad(self, k);
                                if (!g) continue;
                                const std::size_t span = self.parents[k]->value.size() / outer;
                                for (std::size_t o = 0; o < outer; ++o) {
                                    const double* src = self.grad.data() + o * out_span + offsets[k];
                                    for (std::size_t i = 0; i < span; ++i) g[o * span + i] += src[i];
                                }
                            }
                        });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
    return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    const auto split = split_axis("slice", a.shape(), axis);
    if (begin >= end || end > split.n) {
        throw std::invalid_argument("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                    ") invalid for axis of length " + std::to_string(split.n));
    }
    Shape out_shape = a.shape();
    out_shape[axis] = end - begin;
    const std::size_t in_span = split.n * split.inner;
    const std::size_t out_span = (end - begin) * split.inner;
    const std::size_t start = begin * split.inner;
    const std::size_t outer = split.outer;
    const auto x = a.values();
    std::vector<double> out(outer * out_span);
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data() + o * in_span + start, out_span, out.data() + o * out_span);
    return Tensor::make(std::move(out_shape), std::move(out), "slice", {a},
                        [outer, in_span, out_span, start](Node& self) {
                            double* ga = parent_grad(self, 0);
                            for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t i = 0; i < out_span; ++i)
                                    ga[o * in_span + start + i] += self.grad[o * out_span + i];
                        });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
    require_rank("gather_rows", a, 2);
    if (rows.empty()) throw std::invalid_argument("gather_rows: empty row list");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    const auto x = a.values();
    std::vector<double> out(rows.size() * c);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= r) {
            throw std::out_of_range("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                                    shape_string(a.shape()));
        }
        std::copy_n(x.data() + rows[i] * c, c, out.data() + i * c);
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return Tensor::make({rows.size(), c}, std::move(out), "gather_rows", {a}, [idx, c](Node& self) {
        double* ga = parent_grad(self, 0);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < c; ++j) ga[idx[i] * c + j] += self.grad[i * c + j];
    });
}

Tensor pick(const Tensor& a, std::size_t flat_index) {
    if (flat_index >= a.size()) {
        throw std::out_of_range("pick: index " + std::to_string(flat_index) + " out of range for " +
                                shape_string(a.shape()));
    }
    return Tensor::make({}, {a.values()[flat_index]}, "pick", {a}, [flat_index](Node& self) {
        parent_grad(self, 0)[flat_index] += self.grad[0];
    });
}

Tensor sum(const Tensor& a, std::size_t axis) {
    const auto s = split_axis("sum", a.shape(), axis);
    const auto x = a.values();
    std::vector<double> out(s.outer * s.inner, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t k = 0; k < s.n; ++k)
            for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.n + k) * s.inner + i];
    return Tensor::make(s.reduced, std::move(out), "sum", {a}, [s](Node& self) {
        double* ga = parent_grad(self, 0);
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t k = 0; k < s.n; ++k)
                for (std::size_t i = 0; i < s.inner; ++i) ga[(o * s.n + k) * s.inner + i] += self.grad[o * s.inner + i];
    });
}

Tensor mean(const Tensor& a, std::size_t axis) {
    const auto n = split_axis("mean", a.shape(), axis).n;
    return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

Tensor sum_all(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    return Tensor::make({}, {acc}, "sum", {a}, [](Node& self) {
        double* ga = parent_grad(self, 0);
        const std::size_t n = self.parents[0]->value.size();
        for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[0];
    });
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

Tensor exp(const Tensor& a) {
    return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double v : a.values()) {
        if (!(v > 0.0)) throw std::domain_error("log: non-positive input " + std::to_string(v));
    }
    return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
    for (double v : a.values()) {
        if (!(v > 0.0)) throw std::domain_error("sqrt: non-positive input " + std::to_string(v));
    }
    return unary("sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor power(const Tensor& a, double exponent) {
    return unary("power", a, [exponent](double x) { return std::pow(x, exponent); },
                 [exponent](double x, double) { return exponent * std::pow(x, exponent - 1.0); });
}

Tensor abs(const Tensor& a) {
    return unary("abs", a, [](double x) { return std::fabs(x); },
                 [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor gelu(const Tensor& a) {
    static constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    static constexpr double k = 0.044715;
    return unary(
        "gelu", a,
        [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
        [](double x, double) {
            const double t = std::tanh(c * (x + k * x * x * x));
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
        });
}

Tensor layer_norm(const Tensor& a) {
    if (a.rank() == 0) throw std::invalid_argument("layer-norm: scalar input");
    const std::size_t w = a.shape().back();
    const std::size_t rows = a.size() / w;
    const auto x = a.values();
    std::vector<double> out(x.size());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * w;
        double mu = 0.0;
        for (std::size_t j = 0; j < w; ++j) mu += xr[j];
        mu /= static_cast<double>(w);
        double var = 0.0;
        for (std::size_t j = 0; j < w; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(w);
        inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
        for (std::size_t j = 0; j < w; ++j) out[r * w + j] = (xr[j] - mu) * inv_std[r];
    }
    return Tensor::make(a.shape(), std::move(out), "layer-norm", {a}, [w, rows, inv_std](Node& self) {
        double* ga = parent_grad(self, 0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * w;
            const double* g = self.grad.data() + r * w;
            double g_mean = 0.0, gy_mean = 0.0;
            for (std::size_t j = 0; j < w; ++j) {
                g_mean += g[j];
                gy_mean += g[j] * y[j];
            }
            g_mean /= static_cast<double>(w);
            gy_mean /= static_cast<double>(w);
            for (std::size_t j = 0; j < w; ++j) ga[r * w + j] += inv_std[r] * (g[j] - g_mean - y[j] * gy_mean);
        }
    });
}

Tensor l2_normalize(const Tensor& a) {
    if (a.rank() == 0) throw std::invalid_argument("l2-normalize: scalar input");
    const std::size_t w = a.shape().back();
    const std::size_t rows = a.size() / w;
    const auto x = a.values();
    std::vector<double> out(x.size());
    std::vector<double> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t j = 0; j < w; ++j) ss += x[r * w + j] * x[r * w + j];
        if (!(ss > 0.0)) throw std::domain_error("l2-normalize: zero-norm vector (row " + std::to_string(r) + ")");
        norms[r] = std::sqrt(ss);
        for (std::size_t j = 0; j < w; ++j) out[r * w + j] = x[r * w + j] / norms[r];
    }
    return Tensor::make(a.shape(), std::move(out), "l2-normalize", {a}, [w, rows, norms](Node& self) {
        double* ga = parent_grad(self, 0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * w;
            const double* g = self.grad.data() + r * w;
            double gy = 0.0;
            for (std::size_t j = 0; j < w; ++j) gy += g[j] * y[j];
            for (std::size_t j = 0; j < w; ++j) ga[r * w + j] += (g[j] - y[j] * gy) / norms[r];
        }
    });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
    require_rank("embedding-lookup", table, 2);
    for (auto id : ids) {
        if (id >= table.shape()[0]) {
            throw std::out_of_range("embedding-lookup: id " + std::to_string(id) + " out of range for table " +
                                    shape_string(table.shape()));
        }
    }
    return gather_rows(table, ids);
}

Tensor softmax(const Tensor& a, std::size_t axis) {
    const auto s = split_axis("softmax", a.shape(), axis);
    const auto x = a.values();
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
            double mx = x[at(0)];
            for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, x[at(k)]);
            double z = 0.0;
            for (std::size_t k = 0; k < s.n; ++k) z += (out[at(k)] = std::exp(x[at(k)] - mx));
            for (std::size_t k = 0; k < s.n; ++k) out[at(k)] /= z;
        }
    }
    return Tensor::make(a.shape(), std::move(out), "softmax", {a}, [s](Node& self) {
        double* ga = parent_grad(self, 0);
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
                double dot = 0.0;
                for (std::size_t k = 0; k < s.n; ++k) dot += self.grad[at(k)] * self.value[at(k)];
                for (std::size_t k = 0; k < s.n; ++k) ga[at(k)] += self.value[at(k)] * (self.grad[at(k)] - dot);
            }
        }
    });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
    const auto s = split_axis("log-softmax", a.shape(), axis);
    const auto x = a.values();
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
            double mx = x[at(0)];
            for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, x[at(k)]);
            double z = 0.0;
            for (std::size_t k = 0; k < s.n; ++k) z += std::exp(x[at(k)] - mx);
            const double lse = mx + std::log(z);
            for (std::size_t k = 0; k < s.n; ++k) out[at(k)] = x[at(k)] - lse;
        }
    }
    return Tensor::make(a.shape(), std::move(out), "log-softmax", {a}, [s](Node& self) {
        double* ga = parent_grad(self, 0);
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
                double gsum = 0.0;
                for (std::size_t k = 0; k < s.n; ++k) gsum += self.grad[at(k)];
                for (std::size_t k = 0; k < s.n; ++k) ga[at(k)] += self.grad[at(k)] - std::exp(self.value[at(k)]) * gsum;
            }
        }
    });
}

Tensor softmax(const Tensor& v, double temperature) {
    if (!(temperature > 0.0)) throw std::invalid_argument("softmax: temperature must be positive");
    require_rank("softmax", v, 1);
    return softmax(scale(v, 1.0 / temperature), std::size_t{0});
}

double cosine_similarity_value(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) {
        throw std::invalid_argument("cosine_similarity: length mismatch " + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()));
    }
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (!(aa > 0.0) || !(bb > 0.0)) throw std::domain_error("cosine_similarity: zero-norm input");
    return ab / (std::sqrt(aa) * std::sqrt(bb));
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    require_rank("cosine_similarity", a, 1);
    if (a.shape() != b.shape()) shape_error("cosine_similarity", a.shape(), b.shape());
    return sum_all(mul(l2_normalize(a), l2_normalize(b)));
}

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
    if (p.shape() != q.shape()) shape_error("kl_divergence", p.shape(), q.shape());
    const auto pv = p.values();
    const auto qv = q.values();
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        if (pv[i] > 0.0) acc += pv[i] * (std::log(pv[i]) - std::log(std::max(qv[i], kKlFloor)));
    }
    return Tensor::make({}, {acc}, "kl-divergence", {p, q}, [](Node& self) {
        const auto& pv = parent_value(self, 0);
        const auto& qv = parent_value(self, 1);
        const double g = self.grad[0];
        double* gp = parent_grad(self, 0);
        double* gq = parent_grad(self, 1);
        for (std::size_t i = 0; i < pv.size(); ++i) {
            const double qf = std::max(qv[i], kKlFloor);
            // A zero p_i contributes nothing and is held at the boundary.
            if (gp && pv[i] > 0.0) gp[i] += g * (std::log(pv[i]) - std::log(qf) + 1.0);
            if (gq && qv[i] > kKlFloor) gq[i] -= g * pv[i] / qf;
        }
    });
}

}  // namespace disa::ad
